import numpy as np
import pytest

from rpmforecast.domain import catalog_default
from rpmforecast.model import (
    ModelConfig,
    TrainingError,
    collate,
    embed_tokens,
    encode,
    forward,
    init_params,
    load_checkpoint,
    param_shapes,
    predict,
    predict_batch,
    save_checkpoint,
    train,
)
from rpmforecast.sampling import WindowSample, WindowSpec, build_dataset
from rpmforecast.synth import SynthConfig, generate_cohort


def random_sample(rng, n=None, label=0, n_vars=30):
    n = n or int(rng.integers(1, 25))
    return WindowSample(
        "R",
        30.0,
        -rng.random(n),
        rng.integers(0, n_vars, n),
        rng.normal(size=n),
        rng.normal(size=3),
        label,
    )


def permuted(s, perm):
    return WindowSample(s.patient_id, s.cutoff_days, s.t_rel[perm], s.var[perm], s.v_norm[perm], s.static_vec, s.label)


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert (cfg.cve_hidden, cfg.static_hidden, cfg.head_dim) == (8, 50, 12)

    def test_shapes(self):
        shapes = param_shapes(ModelConfig(), 30)
        assert shapes["type_table"] == (30, 50)
        assert shapes["block0.wq"] == (50, 48)
        assert shapes["block0.wo"] == (48, 50)
        assert shapes["head.w"] == (100, 1)
        assert shapes["cve_value.w1"] == (1, 8)

    def test_parameter_count_pure(self):
        a = init_params(ModelConfig(seed=1)).n_parameters()
        b = init_params(ModelConfig(seed=2)).n_parameters()
        assert a == b == sum(int(np.prod(s)) for s in param_shapes(ModelConfig(), 30).values())

    def test_invalid(self):
        with pytest.raises(ValueError):
            ModelConfig(dropout=1.0)


class TestEmbedding:
    def test_identical_tokens(self, tiny_config, rng):
        params = init_params(tiny_config)
        s = WindowSample("A", 10, np.array([-0.1, -0.1]), np.array([3, 3]), np.array([0.4, 0.4]), np.zeros(3), 0)
        emb, _ = embed_tokens(s, params)
        np.testing.assert_array_equal(emb.data[0, 0], emb.data[0, 1])

    def test_value_sensitive(self, tiny_config):
        params = init_params(tiny_config)
        s = WindowSample("A", 10, np.array([-0.1, -0.1]), np.array([3, 3]), np.array([0.0, 1.0]), np.zeros(3), 0)
        emb, _ = embed_tokens(s, params)
        assert not np.allclose(emb.data[0, 0], emb.data[0, 1])

    def test_empty_window(self, tiny_config):
        s = WindowSample("A", 10, np.zeros(0), np.zeros(0, int), np.zeros(0), np.zeros(3), 0)
        with pytest.raises(ValueError, match="window has no tokens"):
            predict(s, init_params(tiny_config))

    def test_unknown_variable(self, tiny_config, rng):
        s = random_sample(rng, 3)
        s.var[0] = 99
        with pytest.raises(ValueError):
            predict(s, init_params(tiny_config))


class TestEncoder:
    def test_single_token_self_attention(self, tiny_config, rng):
        params = init_params(tiny_config)
        s = random_sample(rng, 1)
        pred = predict(s, params)
        assert pred.fusion_weights.tolist() == [1.0]

    def test_permutation_equivariant(self, tiny_config, rng):
        params = init_params(tiny_config)
        s = random_sample(rng, 7)
        perm = rng.permutation(7)
        out = encode(*embed_tokens(collate([s]), params), params).data[0]
        out_p = encode(*embed_tokens(collate([permuted(s, perm)]), params), params).data[0]
        np.testing.assert_allclose(out_p, out[perm], atol=1e-9)

    def test_padding_does_not_leak(self, tiny_config, rng):
        params = init_params(tiny_config)
        s = random_sample(rng, 5)
        base = encode(*embed_tokens(collate([s]), params), params).data[0]
        padded = encode(*embed_tokens(collate([s], pad_to=11), params), params).data[0, :5]
        np.testing.assert_allclose(padded, base, atol=1e-12)


class TestPredict:
    def test_risk_range_and_weights(self, tiny_config, rng):
        params = init_params(tiny_config)
        for pred in predict_batch(params, [random_sample(rng) for _ in range(20)]):
            assert 0 <= pred.risk <= 1
            assert abs(pred.fusion_weights.sum() - 1) <= 1e-12
            assert np.all(pred.fusion_weights >= 0)

    def test_zero_head(self, tiny_config, rng):
        params = init_params(tiny_config)
        params["head.w"].data[:] = 0
        params["head.b"].data[:] = 0
        assert predict(random_sample(rng), params).risk == 0.5

    def test_pure(self, tiny_config, rng):
        params = init_params(tiny_config)
        s = random_sample(rng)
        assert predict(s, params).risk == predict(s, params).risk

    def test_duplicated_tokens(self, tiny_config, rng):
        params = init_params(tiny_config)
        s = random_sample(rng, 6)
        idx = np.repeat(np.arange(6), 2)
        assert abs(predict(permuted(s, idx), params).risk - predict(s, params).risk) <= 1e-9

    def test_batched_matches_single(self, tiny_config, rng):
        params = init_params(tiny_config)
        samples = [random_sample(rng) for _ in range(8)]
        batched = [p.risk for p in predict_batch(params, samples)]
        single = [predict(s, params).risk for s in samples]
        np.testing.assert_allclose(batched, single, atol=1e-12)

    def test_init_not_saturated(self, rng):
        params = init_params(ModelConfig(dtype="float64", seed=4))
        risks = [p.risk for p in predict_batch(params, [random_sample(rng) for _ in range(50)])]
        assert 0.3 < np.mean(risks) < 0.7

    def test_catalog_mismatch(self, tiny_config, rng):
        from rpmforecast.domain import VariableCatalog

        params = init_params(tiny_config)
        params.catalog = VariableCatalog(catalog_default().entries[:10])
        with pytest.raises(ValueError, match="catalog"):
            predict(random_sample(rng), params)


class TestCheckpoint:
    @pytest.mark.parametrize("dtype", ["float32", "float64"])
    def test_round_trip(self, tmp_path, rng, dtype):
        params = init_params(ModelConfig(d_model=8, n_heads=2, dtype=dtype))
        samples = [random_sample(rng) for _ in range(5)]
        save_checkpoint(params, tmp_path / "m.ckpt")
        loaded = load_checkpoint(tmp_path / "m.ckpt")
        for k, t in params.tensors.items():
            assert np.array_equal(t.data, loaded[k].data) and t.data.dtype == loaded[k].data.dtype
        before = [p.risk for p in predict_batch(params, samples)]
        after = [p.risk for p in predict_batch(loaded, samples)]
        assert before == after

    def test_format_version(self, tmp_path):
        save_checkpoint(init_params(ModelConfig(d_model=8, n_heads=2)), tmp_path / "m.ckpt")
        doc = (tmp_path / "m.ckpt").read_text()
        assert '"format_version": 1' in doc
        (tmp_path / "bad.ckpt").write_text(doc.replace('"format_version": 1', '"format_version": 9'))
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "bad.ckpt")


class TestTraining:
    def test_deterministic(self, tmp_path, rng):
        samples = [random_sample(rng, label=i % 2) for i in range(12)]
        cfg = ModelConfig(d_model=8, n_heads=2, epochs=2, batch_size=4, seed=5)
        for name in ("a", "b"):
            save_checkpoint(train(samples, cfg).params, tmp_path / f"{name}.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_nan_aborts(self, rng):
        samples = [random_sample(rng, label=i % 2) for i in range(4)]
        cfg = ModelConfig(d_model=8, n_heads=2, epochs=1, dtype="float64")
        params = init_params(cfg)
        params["head.b"].data[:] = np.nan
        with pytest.raises(TrainingError, match="learning rate"):
            train(samples, cfg, params=params)

    def test_single_class_warns(self, rng, caplog):
        samples = [random_sample(rng, label=0) for _ in range(4)]
        train(samples, ModelConfig(d_model=8, n_heads=2, epochs=1))
        assert "single class" in caplog.text

    def test_loss_descends_on_synthetic(self):
        recs, _ = generate_cohort(SynthConfig(n_patients=50, seed=7))
        ds = build_dataset(recs, WindowSpec(stride_days=7), seed=7)
        cfg = ModelConfig(d_model=16, n_heads=2, epochs=5, seed=7)
        history = train(ds.train, cfg, ds.stats).history
        assert history[4][1] < history[0][1]

    def test_dropout_changes_train_forward(self, rng):
        cfg = ModelConfig(d_model=8, n_heads=2, dropout=0.5, dtype="float64")
        params = init_params(cfg)
        batch = collate([random_sample(rng, 6)])
        a = forward(params, batch, train=True, rng=np.random.default_rng(0))[0].data
        b = forward(params, batch, train=False)[0].data
        c = forward(params, batch, train=False)[0].data
        assert not np.array_equal(a, b) and np.array_equal(b, c)
