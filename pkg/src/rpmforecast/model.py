"""Triplet-token transformer forecaster.

Each token (time, variable, value) is embedded as
``cve_value(v) + cve_time(t) + type_table[var]``, passed through pre-norm
self-attention blocks, pooled by a fusion attention layer (one weight per
token) and joined with an encoding of the static profile before a sigmoid
risk head.
"""

from __future__ import annotations

import base64
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .domain import VariableCatalog, catalog_default
from .sampling import NormStats, WindowSample
from .tensor import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 50
    n_blocks: int = 2
    n_heads: int = 4
    ffn_mult: int = 2
    dropout: float = 0.2
    cve_hidden: int | None = None  # defaults to ceil(sqrt(d_model))
    static_hidden: int | None = None  # defaults to d_model
    n_static: int = 3
    batch_size: int = 128
    epochs: int = 80
    lr: float = 5e-4
    seed: int = 0
    init_scale: float = 0.05
    pos_weight: float = 1.0
    dtype: str = "float32"
    # cap on batch * heads * n^2 attention entries held per forward chunk
    attention_budget: int = 6_000_000
    # samples per length-sorted chunk; smaller chunks pad less
    max_chunk: int = 8

    def __post_init__(self):
        if self.cve_hidden is None:
            self.cve_hidden = math.ceil(math.sqrt(self.d_model))
        if self.static_hidden is None:
            self.static_hidden = self.d_model
        for name in ("d_model", "n_blocks", "n_heads", "ffn_mult", "batch_size", "epochs", "cve_hidden", "max_chunk"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model // self.n_heads == 0:
            raise ValueError("n_heads exceeds d_model")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class ModelParams:
    tensors: dict[str, Tensor]
    config: ModelConfig
    norm_stats: NormStats | None = None
    catalog: VariableCatalog = field(default_factory=catalog_default)
    # free-form provenance saved with the checkpoint (window spec, split seed, patient ids)
    metadata: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def trainable(self) -> list[Tensor]:
        return [self.tensors[k] for k in sorted(self.tensors)]

    def n_parameters(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def astype(self, dtype) -> ModelParams:
        tensors = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.tensors.items()}
        return ModelParams(tensors, self.config, self.norm_stats, self.catalog, dict(self.metadata))


@dataclass
class Prediction:
    risk: float
    fusion_weights: np.ndarray


def param_shapes(cfg: ModelConfig, n_vars: int) -> dict[str, tuple[int, ...]]:
    d, k, hd, h = cfg.d_model, cfg.cve_hidden, cfg.head_dim, cfg.n_heads
    shapes = {
        "cve_value.w1": (1, k), "cve_value.b1": (k,), "cve_value.w2": (k, d),
        "cve_time.w1": (1, k), "cve_time.b1": (k,), "cve_time.w2": (k, d),
        "type_table": (n_vars, d),
    }
    for i in range(cfg.n_blocks):
        p = f"block{i}."
        shapes.update({
            p + "ln1.gamma": (d,), p + "ln1.beta": (d,),
            p + "wq": (d, h * hd), p + "bq": (h * hd,),
            p + "wk": (d, h * hd), p + "bk": (h * hd,),
            p + "wv": (d, h * hd), p + "bv": (h * hd,),
            p + "wo": (h * hd, d), p + "bo": (d,),
            p + "ln2.gamma": (d,), p + "ln2.beta": (d,),
            p + "ffn.w1": (d, cfg.ffn_mult * d), p + "ffn.b1": (cfg.ffn_mult * d,),
            p + "ffn.w2": (cfg.ffn_mult * d, d), p + "ffn.b2": (d,),
        })
    shapes.update({
        "final_ln.gamma": (d,), "final_ln.beta": (d,),
        "fusion.w": (d, d), "fusion.b": (d,), "fusion.u": (d, 1),
        "static.w1": (cfg.n_static, cfg.static_hidden), "static.b1": (cfg.static_hidden,),
        "static.w2": (cfg.static_hidden, d), "static.b2": (d,),
        "head.w": (2 * d, 1), "head.b": (1,),
    })
    return shapes


def init_params(
    cfg: ModelConfig, catalog: VariableCatalog | None = None, norm_stats: NormStats | None = None
) -> ModelParams:
    """Uniform(-init_scale, init_scale) weights; layer-norm gains 1 and offsets 0."""
    catalog = catalog or catalog_default()
    rng = np.random.default_rng(cfg.seed)
    tensors = {}
    for name, shape in param_shapes(cfg, len(catalog)).items():
        if name.endswith(".gamma"):
            data = np.ones(shape)
        elif name.endswith(".beta"):
            data = np.zeros(shape)
        else:
            data = rng.uniform(-cfg.init_scale, cfg.init_scale, size=shape)
        tensors[name] = Tensor(data.astype(cfg.np_dtype), requires_grad=True, name=name)
    return ModelParams(tensors, cfg, norm_stats, catalog)


# --------------------------------------------------------------------------- batching


@dataclass
class Batch:
    t_rel: np.ndarray  # (B, n)
    v_norm: np.ndarray  # (B, n)
    var: np.ndarray  # (B, n) int
    mask: np.ndarray  # (B, n) bool, True for real tokens
    static: np.ndarray  # (B, n_static)
    label: np.ndarray  # (B,)


def collate(samples: Sequence[WindowSample], dtype=np.float64, pad_to: int | None = None) -> Batch:
    if not samples:
        raise ValueError("empty batch")
    lengths = [len(s) for s in samples]
    if min(lengths) == 0:
        raise ValueError("window has no tokens")
    n = max(max(lengths), pad_to or 0)
    b = len(samples)
    t = np.zeros((b, n), dtype=dtype)
    v = np.zeros((b, n), dtype=dtype)
    var = np.zeros((b, n), dtype=np.int64)
    mask = np.zeros((b, n), dtype=bool)
    for i, s in enumerate(samples):
        k = lengths[i]
        t[i, :k] = s.t_rel
        v[i, :k] = s.v_norm
        var[i, :k] = s.var
        mask[i, :k] = True
    static = np.stack([s.static_vec for s in samples]).astype(dtype)
    label = np.array([s.label for s in samples], dtype=dtype)
    return Batch(t, v, var, mask, static, label)


# --------------------------------------------------------------------------- forward pieces


def _cve(x: np.ndarray, params: ModelParams, prefix: str) -> Tensor:
    h = T.tanh(T.matmul(Tensor(x[..., None]), params[prefix + ".w1"]) + params[prefix + ".b1"])
    return T.matmul(h, params[prefix + ".w2"])


def embed_tokens(batch: Batch | WindowSample, params: ModelParams) -> tuple[Tensor, np.ndarray]:
    """Token embeddings (B, n, d) as value CVE + time CVE + variable-type embedding."""
    if isinstance(batch, WindowSample):
        batch = collate([batch], params["head.w"].data.dtype)
    if batch.mask.shape[1] == 0 or not batch.mask.any(axis=1).all():
        raise ValueError("window has no tokens")
    emb = _cve(batch.v_norm, params, "cve_value") + _cve(batch.t_rel, params, "cve_time")
    emb = emb + T.embedding_lookup(params["type_table"], batch.var)
    return emb, batch.mask


def _attention(x: Tensor, mask: np.ndarray, params: ModelParams, p: str) -> Tensor:
    q = T.matmul(x, params[p + "wq"]) + params[p + "bq"]
    k = T.matmul(x, params[p + "wk"]) + params[p + "bk"]
    v = T.matmul(x, params[p + "wv"]) + params[p + "bv"]
    ctx = T.multihead_attention(q, k, v, mask, params.config.n_heads)
    return T.matmul(ctx, params[p + "wo"]) + params[p + "bo"]


def encode(
    emb: Tensor,
    mask: np.ndarray,
    params: ModelParams,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Pre-norm transformer blocks over the (unordered) token set."""
    cfg = params.config
    x = emb
    for i in range(cfg.n_blocks):
        p = f"block{i}."
        a = _attention(T.layer_norm(x, params[p + "ln1.gamma"], params[p + "ln1.beta"]), mask, params, p)
        x = x + T.dropout(a, cfg.dropout, train, rng)
        y = T.layer_norm(x, params[p + "ln2.gamma"], params[p + "ln2.beta"])
        y = T.matmul(T.relu(T.matmul(y, params[p + "ffn.w1"]) + params[p + "ffn.b1"]), params[p + "ffn.w2"])
        x = x + T.dropout(y + params[p + "ffn.b2"], cfg.dropout, train, rng)
    return T.layer_norm(x, params["final_ln.gamma"], params["final_ln.beta"])


def fuse_and_predict(
    contextual: Tensor,
    mask: np.ndarray,
    static: np.ndarray,
    params: ModelParams,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Fusion-attention pooling, static encoder and sigmoid head -> (risk (B,), weights (B, n))."""
    b, n, d = contextual.shape
    score = T.matmul(T.tanh(T.matmul(contextual, params["fusion.w"]) + params["fusion.b"]), params["fusion.u"])
    alpha = T.softmax_masked(T.reshape(score, (b, n)), mask)
    pooled = T.sum(T.mul(T.reshape(alpha, (b, n, 1)), contextual), axis=1)
    s = T.tanh(T.matmul(Tensor(static), params["static.w1"]) + params["static.b1"])
    s = T.matmul(s, params["static.w2"]) + params["static.b2"]
    z = T.concat([T.dropout(pooled, params.config.dropout, train, rng), s], axis=-1)
    logit = T.matmul(z, params["head.w"]) + params["head.b"]
    return T.sigmoid(T.reshape(logit, (b,))), alpha


def forward(params: ModelParams, batch: Batch, train: bool = False, rng=None) -> tuple[Tensor, Tensor]:
    emb, mask = embed_tokens(batch, params)
    ctx = encode(emb, mask, params, train, rng)
    return fuse_and_predict(ctx, mask, batch.static, params, train, rng)


# --------------------------------------------------------------------------- inference


def _chunks(order: Sequence[int], lengths: Sequence[int], cfg: ModelConfig) -> list[list[int]]:
    """Split ``order`` (ascending by length) into runs that fit the attention budget."""
    out, cur, cur_max = [], [], 0
    for i in order:
        n = max(cur_max, lengths[i])
        if cur and (len(cur) >= cfg.max_chunk or (len(cur) + 1) * cfg.n_heads * n * n > cfg.attention_budget):
            out.append(cur)
            cur, n = [], lengths[i]
        cur.append(i)
        cur_max = n
    if cur:
        out.append(cur)
    return out


def _check_catalog(params: ModelParams, samples: Sequence[WindowSample]) -> None:
    n_vars = params["type_table"].shape[0]
    if n_vars != len(params.catalog):
        raise ValueError("checkpoint catalog does not match its type table")
    for s in samples:
        if len(s.var) and (s.var.min() < 0 or s.var.max() >= n_vars):
            raise ValueError(f"sample for {s.patient_id} uses variable ids outside the checkpoint catalog")


def predict_batch(params: ModelParams, samples: Sequence[WindowSample]) -> list[Prediction]:
    """Eval-mode risks for many samples, batched by length."""
    _check_catalog(params, samples)
    dtype = params["head.w"].data.dtype
    lengths = [len(s) for s in samples]
    order = sorted(range(len(samples)), key=lambda i: lengths[i])
    out: list[Prediction | None] = [None] * len(samples)
    for chunk in _chunks(order, lengths, params.config):
        batch = collate([samples[i] for i in chunk], dtype)
        risk, alpha = forward(params, batch)
        for j, i in enumerate(chunk):
            out[i] = Prediction(float(risk.data[j]), alpha.data[j, : lengths[i]].astype(np.float64))
    return out  # type: ignore[return-value]


def predict(sample: WindowSample, params: ModelParams) -> Prediction:
    return predict_batch(params, [sample])[0]


# --------------------------------------------------------------------------- training


@dataclass
class TrainResult:
    params: ModelParams
    history: list[tuple[int, float]]


def _sample_weights(labels: np.ndarray, cfg: ModelConfig, batch_size: int) -> np.ndarray:
    w = np.where(labels == 1, cfg.pos_weight, 1.0)
    return w / batch_size


def train_step(params: ModelParams, samples: Sequence[WindowSample], state: T.AdamState, rng) -> float:
    """One optimizer step on ``samples``; gradients accumulated over length-sorted chunks."""
    cfg = params.config
    dtype = cfg.np_dtype
    trainable = params.trainable()
    for p in trainable:
        p.grad = None
    lengths = [len(s) for s in samples]
    order = sorted(range(len(samples)), key=lambda i: (lengths[i], i))
    total = 0.0
    for chunk in _chunks(order, lengths, cfg):
        batch = collate([samples[i] for i in chunk], dtype)
        with T.Tape() as tape:
            risk, _ = forward(params, batch, train=True, rng=rng)
            loss = T.bce_loss(risk, batch.label, _sample_weights(batch.label, cfg, len(samples)))
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError(
                f"non-finite loss at step {state.step + 1} (lr={state.lr}); "
                "lower the learning rate or use float64"
            )
        tape.backward(loss)
        total += value
    T.adam_step(trainable, [p.grad for p in trainable], state)
    return total


def train(
    samples: Sequence[WindowSample],
    config: ModelConfig | None = None,
    norm_stats: NormStats | None = None,
    catalog: VariableCatalog | None = None,
    params: ModelParams | None = None,
    progress=None,
) -> TrainResult:
    """Mini-batch Adam on mean BCE; deterministic given ``config.seed``."""
    cfg = config or ModelConfig()
    if not samples:
        raise ValueError("training set is empty")
    labels = {s.label for s in samples}
    if len(labels) < 2:
        log.warning("training set has a single class (%s)", labels.pop())
    params = params or init_params(cfg, catalog, norm_stats)
    _check_catalog(params, samples)
    state = T.AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 1)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(len(samples))
        losses, sizes = [], []
        for start in range(0, len(samples), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            losses.append(train_step(params, [samples[i] for i in idx], state, rng))
            sizes.append(len(idx))
        mean_loss = float(np.average(losses, weights=sizes))
        history.append((epoch, mean_loss))
        if progress is not None:
            progress(epoch, mean_loss)
    return TrainResult(params, history)


# --------------------------------------------------------------------------- checkpoint


def _encode_array(a: np.ndarray) -> dict:
    dt = "f64" if a.dtype == np.float64 else "f32"
    raw = a.astype("<f8" if dt == "f64" else "<f4").tobytes()
    return {"shape": list(a.shape), "dtype": dt, "data": base64.b64encode(raw).decode("ascii")}


def _decode_array(d: dict) -> np.ndarray:
    dt = "<f8" if d.get("dtype", "f32") == "f64" else "<f4"
    a = np.frombuffer(base64.b64decode(d["data"]), dtype=dt).reshape(d["shape"])
    return a.astype(a.dtype.newbyteorder("="))


def checkpoint_json(params: ModelParams) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "config": params.config.to_json(),
        "norm_stats": params.norm_stats.to_json() if params.norm_stats else None,
        "catalog": params.catalog.to_json(),
        "tensors": {k: _encode_array(params.tensors[k].data) for k in sorted(params.tensors)},
        "metadata": params.metadata,
    }


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    Path(path).write_text(json.dumps(checkpoint_json(params), indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> ModelParams:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    if d.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format {d.get('format_version')!r}")
    cfg = ModelConfig(**d["config"])
    catalog = VariableCatalog.from_json(d["catalog"])
    stats = NormStats.from_json(d["norm_stats"]) if d["norm_stats"] else None
    tensors = {k: Tensor(_decode_array(v), requires_grad=True, name=k) for k, v in d["tensors"].items()}
    expected = param_shapes(cfg, len(catalog))
    if {k: t.shape for k, t in tensors.items()} != expected:
        raise ValueError("checkpoint tensors do not match its config")
    return ModelParams(tensors, cfg, stats, catalog, d.get("metadata", {}))
