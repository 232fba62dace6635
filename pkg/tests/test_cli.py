import hashlib
import json

import pytest

from rpmforecast.cli import DataError, load_config_file, main, resolve


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def strip_timestamps(doc):
    if isinstance(doc, dict):
        return {k: strip_timestamps(v) for k, v in doc.items() if k != "created_utc"}
    return doc


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """synth -> ingest -> train on a small cohort; returns the work directory."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "raw"), "--seed", "4", "--n-patients", "10"]) == 0
    raw = root / "raw"
    assert main(["ingest", "--obs", str(raw / "observations.jsonl"), "--static", str(raw / "static.csv"),
                 "--events", str(raw / "events.jsonl"), "--out", str(root / "work" / "cohort.jsonl")]) == 0
    assert main(["train", "--cohort", str(root / "work" / "cohort.jsonl"), "--out", str(root / "work" / "m.ckpt"),
                 "--epochs", "1", "--stride", "7", "--d-model", "8", "--split-seed", "2"]) == 0
    return root


class TestUsage:
    def test_eval_without_model(self, capsys):
        assert main(["eval", "--cohort", "c.jsonl", "--out", "x"]) == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand(self):
        assert main(["fly"]) == 2

    def test_unknown_flag(self):
        assert main(["synth", "--out", "x", "--colour", "red"]) == 2

    def test_bad_threads(self):
        assert main(["--threads", "0", "synth", "--out", "x"]) == 2

    def test_help(self):
        assert main(["--help"]) == 0


class TestDataErrors:
    def test_missing_inputs(self, tmp_path, capsys):
        rc = main(["ingest", "--obs", str(tmp_path / "nope.jsonl"), "--static", "s.csv", "--events", "e.jsonl",
                   "--out", str(tmp_path / "c.jsonl")])
        assert rc == 1
        assert "error" in capsys.readouterr().err

    def test_missing_checkpoint(self, tiny_run, tmp_path):
        assert main(["importance", "--model", str(tmp_path / "none.ckpt"),
                     "--cohort", str(tiny_run / "work" / "cohort.jsonl"), "--out", str(tmp_path / "i.csv")]) == 1

    def test_unknown_patient(self, tiny_run, tmp_path):
        assert main(["trajectory", "--model", str(tiny_run / "work" / "m.ckpt"), "--cohort",
                     str(tiny_run / "work" / "cohort.jsonl"), "--patient", "ghost", "--out", str(tmp_path)]) == 1

    def test_bad_config_section(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"modle": {}}))
        assert main(["--config", str(cfg), "synth", "--out", str(tmp_path / "o")]) == 1


class TestLayeredConfig:
    def test_precedence(self, tmp_path, monkeypatch):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"model": {"epochs": 7, "lr": 0.01}}))
        file_cfg = load_config_file(str(cfg))
        assert resolve("model", file_cfg, {"epochs": None, "lr": None})["epochs"] == 7
        monkeypatch.setenv("RPMF_EPOCHS", "9")
        merged = resolve("model", file_cfg, {"epochs": None, "lr": None})
        assert (merged["epochs"], merged["lr"]) == (9, 0.01)
        assert resolve("model", file_cfg, {"epochs": 11, "lr": None})["epochs"] == 11

    def test_defaults(self):
        merged = resolve("model", {}, {})
        assert (merged["epochs"], merged["batch_size"], merged["lr"]) == (80, 128, 5e-4)
        assert resolve("window", {}, {})["horizon_days"] == 28.0

    def test_unknown_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"model": {"epoch": 3}}))
        with pytest.raises(DataError, match="epoch"):
            load_config_file(str(cfg))

    def test_config_reaches_synth(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"synth": {"n_patients": 3, "seed": 1}}))
        assert main(["--config", str(cfg), "synth", "--out", str(tmp_path / "o")]) == 0
        manifest = json.loads((tmp_path / "o" / "run_manifest.json").read_text())
        assert manifest["runs"]["synth"]["config"]["synth"]["n_patients"] == 3


class TestPipeline:
    def test_manifests_present(self, tiny_run):
        for d in ("raw", "work"):
            assert (tiny_run / d / "run_manifest.json").exists()
        work = json.loads((tiny_run / "work" / "run_manifest.json").read_text())
        assert set(work["runs"]) == {"ingest", "train"}
        assert work["format_versions"]["checkpoint"] == 1
        assert work["runs"]["train"]["config"]["split_seed"] == 2

    def test_downstream_and_rerun_identical(self, tiny_run, tmp_path):
        work = tiny_run / "work"
        cohort, model = str(work / "cohort.jsonl"), str(work / "m.ckpt")
        inputs = {p: digest(p) for p in (work / "cohort.jsonl", work / "m.ckpt")}

        def run(out):
            assert main(["importance", "--model", model, "--cohort", cohort, "--out", str(out / "imp.csv")]) == 0
            pid = json.loads((work / "cohort.jsonl").read_text().splitlines()[0])["patient_id"]
            assert main(["trajectory", "--model", model, "--cohort", cohort, "--patient", pid,
                         "--out", str(out)]) == 0
            return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "run_manifest.json"}

        a = run(tmp_path / "a")
        b = run(tmp_path / "a")
        assert a == b and len(a) == 3
        assert {p: digest(p) for p in inputs} == inputs  # inputs untouched
        m = json.loads((tmp_path / "a" / "run_manifest.json").read_text())
        assert "created_utc" in m["runs"]["importance"]
        assert strip_timestamps(m)["runs"]["importance"]["inputs"]["model"]["sha256"] == inputs[work / "m.ckpt"]
