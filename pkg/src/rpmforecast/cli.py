"""Command-line entry point: synth | ingest | train | eval | importance | trajectory.

Options resolve in layers: built-in default < ``--config`` JSON file < ``RPMF_*``
environment variables < command-line flags. Every command records the fully
resolved configuration, input/output digests and format versions in a
``run_manifest.json`` next to its outputs.

Exit status: 0 success, 1 data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .domain import ADVERSE_KINDS
from .evaluation import (
    TEST_RESAMPLE,
    TRAIN_RESAMPLE,
    bootstrap_eval,
    feature_importance,
    risk_trajectory,
    write_importance_csv,
    write_roc_csv,
    write_trajectory_csvs,
)
from .ingest import (
    IngestError,
    apply_filters,
    default_rules,
    parse_cohort_with_report,
    read_cohort,
    read_exclude_file,
    write_cohort,
)
from .model import CHECKPOINT_VERSION, ModelConfig, TrainingError, load_checkpoint, save_checkpoint, train
from .sampling import WindowSpec, build_dataset, write_cache
from .synth import SynthConfig, generate_raw, write_synth_files

log = logging.getLogger("rpmforecast")

ENV_PREFIX = "RPMF_"
MANIFEST_NAME = "run_manifest.json"
MANIFEST_VERSION = 1
COHORT_FORMAT_VERSION = 1

# config-file sections and the dataclass each one feeds
SECTIONS = {"synth": SynthConfig, "window": WindowSpec, "model": ModelConfig, "filter": None, "eval": None}
FILTER_DEFAULTS = {"min_rpm_days": 3}
EVAL_DEFAULTS = {"bootstrap": 30, "mode": TRAIN_RESAMPLE, "seed": 0, "threshold": 0.5}


class DataError(Exception):
    """Input data is missing, malformed or inconsistent (exit status 1)."""


# --------------------------------------------------------------------------- layered config


def _section_defaults(section: str) -> dict:
    cls = SECTIONS[section]
    if section == "filter":
        return dict(FILTER_DEFAULTS)
    if section == "eval":
        return dict(EVAL_DEFAULTS)
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
            out[f.name] = f.default_factory()  # type: ignore[misc]
    return out


def load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise DataError(f"{path}: top level must be an object")
    for section, values in doc.items():
        if section not in SECTIONS:
            raise DataError(f"{path}: unknown section {section!r} (expected one of {sorted(SECTIONS)})")
        unknown = set(values) - set(_section_defaults(section))
        if unknown:
            raise DataError(f"{path}: unknown keys in [{section}]: {sorted(unknown)}")
    return doc


def _coerce(raw: str, like):
    if isinstance(like, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def resolve(section: str, file_cfg: dict, flags: dict[str, object]) -> dict:
    """Merge one section: defaults < config file < ``RPMF_<KEY>`` env < explicit flags."""
    values = _section_defaults(section)
    values.update(file_cfg.get(section, {}))
    for key in list(values):
        env = os.environ.get(ENV_PREFIX + key.upper())
        if env is not None and key in flags:
            try:
                values[key] = _coerce(env, values[key] if values[key] is not None else "")
            except ValueError:
                raise DataError(f"environment {ENV_PREFIX}{key.upper()}={env!r} is not a valid {key}") from None
    for key, val in flags.items():
        if val is not None:
            values[key] = val
    return values


# --------------------------------------------------------------------------- manifests


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _jsonable(x):
    if dataclasses.is_dataclass(x):
        return _jsonable(dataclasses.asdict(x))
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def write_manifest(out_dir: Path, command: str, config: dict, inputs: dict, outputs: list[Path]) -> Path:
    """Add (or replace) this command's entry in ``out_dir/run_manifest.json``."""
    path = out_dir / MANIFEST_NAME
    doc = {}
    if path.exists():
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            log.warning("overwriting unreadable %s", path)
    doc.update(
        {
            "manifest_version": MANIFEST_VERSION,
            "package_version": __version__,
            "format_versions": {"checkpoint": CHECKPOINT_VERSION, "cohort": COHORT_FORMAT_VERSION},
        }
    )
    doc.setdefault("runs", {})[command] = {
        "config": _jsonable(config),
        "inputs": {k: {"path": str(p), "sha256": _sha256(Path(p))} for k, p in sorted(inputs.items()) if p},
        "outputs": {p.name: _sha256(p) for p in sorted(outputs)},
        "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# --------------------------------------------------------------------------- helpers


def _read_cohort(path: str):
    try:
        return read_cohort(path)
    except FileNotFoundError:
        raise DataError(f"cohort file not found: {path}") from None
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: not a cohort file ({exc})") from None


def _load_model(path: str):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: not a checkpoint ({exc})") from None


def _checkpoint_dataset(params, cohort):
    """Rebuild the windows the checkpoint was trained with and check they still match."""
    meta = params.metadata
    if "window" not in meta:
        raise DataError("checkpoint has no training metadata; retrain with this version")
    spec = WindowSpec(**meta["window"])
    ds = build_dataset(cohort, spec, seed=meta["split_seed"], ratio=meta["split_ratio"], catalog=params.catalog)
    if ds.train_ids != meta["train_ids"] or ds.test_ids != meta["test_ids"]:
        raise DataError("cohort does not reproduce the checkpoint's patient split (different cohort file?)")
    if params.norm_stats is not None and ds.stats != params.norm_stats:
        raise DataError("cohort does not reproduce the checkpoint's normalization statistics")
    return ds, spec


def _ensure_parent(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path.parent


# --------------------------------------------------------------------------- commands


def cmd_synth(args, file_cfg) -> int:
    cfg_values = resolve("synth", file_cfg, {"seed": args.seed, "n_patients": args.n_patients})
    cfg = SynthConfig(**cfg_values)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    raw, gt = generate_raw(cfg)
    paths = write_synth_files(raw, gt, out)
    write_manifest(out, "synth", {"synth": cfg.to_json()}, {}, list(paths.values()))
    n_events = sum(1 for p in raw for _, k in p.event_rows if k in ADVERSE_KINDS)
    print(f"wrote {len(raw)} patients ({n_events} adverse events) to {out}")
    return 0


def cmd_ingest(args, file_cfg) -> int:
    filt = resolve("filter", file_cfg, {"min_rpm_days": args.min_rpm_days})
    try:
        records, report = parse_cohort_with_report(args.obs, args.static, args.events)
    except FileNotFoundError as exc:
        raise DataError(f"input file not found: {exc.filename}") from None
    excluded = read_exclude_file(args.exclude_file) if args.exclude_file else []
    kept, freport = apply_filters(records, default_rules(filt["min_rpm_days"], excluded))
    out = Path(args.out)
    out_dir = _ensure_parent(out)
    write_cohort(kept, out)
    inputs = {"obs": args.obs, "static": args.static, "events": args.events, "exclude_file": args.exclude_file}
    write_manifest(out_dir, "ingest", {"filter": filt}, inputs, [out])
    print(f"parsed {report.n_patients} patients from {report.n_lines} lines "
          f"({report.n_epochs} raw epochs, {report.duplicates} duplicates replaced)")
    print(freport.table())
    print(f"wrote {len(kept)} patients to {out}")
    return 0


def cmd_train(args, file_cfg) -> int:
    window = resolve("window", file_cfg, {"stride_days": args.stride, "max_tokens": args.max_tokens})
    model = resolve(
        "model",
        file_cfg,
        {
            "epochs": args.epochs,
            "batch_size": args.batch_size,
            "lr": args.lr,
            "seed": args.seed,
            "d_model": args.d_model,
            "dropout": args.dropout,
            "pos_weight": args.pos_weight,
            "dtype": args.dtype,
        },
    )
    spec = WindowSpec(**window)
    cfg = ModelConfig(**model)
    split_seed = cfg.seed if args.split_seed is None else args.split_seed
    cohort = _read_cohort(args.cohort)
    if not cohort:
        raise DataError(f"{args.cohort}: cohort is empty")
    ds = build_dataset(cohort, spec, seed=split_seed, ratio=args.split_ratio)
    if not ds.train:
        raise DataError("no training windows (spans shorter than min history + horizon?)")
    cs = ds.class_stats
    print(f"windows: train {cs['train']['n']} (positive {cs['train']['rate']:.3f}), "
          f"test {cs['test']['n']} (positive {cs['test']['rate']:.3f})")
    if args.cache:
        write_cache(args.cache, ds.train + ds.test, ds.stats, spec)

    def progress(epoch, loss):
        print(f"epoch {epoch:3d}  loss {loss:.5f}", flush=True)

    result = train(ds.train, cfg, ds.stats, progress=progress)
    params = result.params
    params.metadata = {
        "window": dataclasses.asdict(spec),
        "split_seed": split_seed,
        "split_ratio": args.split_ratio,
        "train_ids": ds.train_ids,
        "test_ids": ds.test_ids,
        "class_stats": cs,
        "history": result.history,
    }
    out = Path(args.out)
    out_dir = _ensure_parent(out)
    save_checkpoint(params, out)
    config = {"window": spec, "model": cfg, "split_seed": split_seed, "split_ratio": args.split_ratio}
    write_manifest(out_dir, "train", config, {"cohort": args.cohort}, [out])
    print(f"saved {params.n_parameters()} parameters to {out}")
    return 0


def cmd_eval(args, file_cfg) -> int:
    ev = resolve("eval", file_cfg, {"bootstrap": args.bootstrap, "mode": args.mode, "seed": args.seed,
                                    "threshold": args.threshold})
    if ev["mode"] not in (TRAIN_RESAMPLE, TEST_RESAMPLE):
        raise DataError(f"unknown bootstrap mode {ev['mode']!r}")
    params = _load_model(args.model)
    ds, spec = _checkpoint_dataset(params, _read_cohort(args.cohort))
    if not ds.test:
        raise DataError("test split has no windows")
    cfg = params.config
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, epochs=args.epochs)
    report = bootstrap_eval(
        None,
        spec,
        cfg,
        n_boot=ev["bootstrap"],
        mode=ev["mode"],
        seed=ev["seed"],
        params=params if ev["mode"] == TEST_RESAMPLE else None,
        dataset=ds,
        threshold=ev["threshold"],
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = report.to_json()
    doc["class_stats"] = ds.class_stats
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_roc_csv(report.roc_points, out / "roc.csv")
    write_importance_csv(feature_importance(params, ds.test), out / "importance.csv")
    outputs = [out / "report.json", out / "roc.csv", out / "importance.csv"]
    write_manifest(out, "eval", {"eval": ev, "epochs": cfg.epochs}, {"cohort": args.cohort, "model": args.model},
                   outputs)
    lo, hi = report.auroc_ci
    alo, ahi = report.accuracy_ci
    print(f"{report.mode}, {report.n_boot} iterations, {report.n_windows} test windows "
          f"(positive rate {report.positive_rate:.3f})")
    print(f"AUROC    {report.auroc:.3f}  [{lo:.3f}, {hi:.3f}]")
    print(f"accuracy {report.accuracy:.3f}  [{alo:.3f}, {ahi:.3f}]")
    return 0


def cmd_importance(args, file_cfg) -> int:
    params = _load_model(args.model)
    ds, _ = _checkpoint_dataset(params, _read_cohort(args.cohort))
    samples = ds.test or ds.train
    if not ds.test:
        log.warning("test split has no windows; using training windows")
    report = feature_importance(params, samples)
    out = Path(args.out)
    out_dir = _ensure_parent(out)
    write_importance_csv(report, out)
    write_manifest(out_dir, "importance", {}, {"cohort": args.cohort, "model": args.model}, [out])
    print(f"{'rank':>4}  {'variable':<30} {'category':<9} score")
    for name, cat, score, rank in sorted(report.rows(), key=lambda r: r[3])[: args.top]:
        print(f"{rank:>4}  {name:<30} {cat:<9} {score:.4f}")
    print("categories: " + ", ".join(f"{k} {v:.3f}" for k, v in sorted(report.category_scores.items())))
    return 0


def cmd_trajectory(args, file_cfg) -> int:
    params = _load_model(args.model)
    cohort = {r.patient_id: r for r in _read_cohort(args.cohort)}
    if args.patient not in cohort:
        raise DataError(f"patient {args.patient!r} not in {args.cohort}")
    meta = params.metadata
    spec = WindowSpec(**meta["window"]) if "window" in meta else WindowSpec()
    traj = risk_trajectory(params, cohort[args.patient], params.norm_stats, spec)
    out = Path(args.out)
    risk_path, ev_path = write_trajectory_csvs(traj, out)
    write_manifest(out, f"trajectory:{args.patient}", {"window": spec}, {"cohort": args.cohort, "model": args.model},
                   [risk_path, ev_path])
    print(f"{len(traj.points)} daily risks and {len(traj.annotations)} events written to {out}")
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rpmforecast", description="Adverse-event risk forecasting from remote monitoring.")
    p.add_argument("--config", help="JSON config file with sections synth/window/model/filter/eval")
    p.add_argument("--threads", type=int, default=int(os.environ.get(ENV_PREFIX + "THREADS", 1)),
                   help="cap on numeric library threads (1 = bit-deterministic; default 1)")
    p.add_argument("--log-level", default=os.environ.get(ENV_PREFIX + "LOG_LEVEL", "WARNING"))
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic cohort in ingest format")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int)
    s.add_argument("--n-patients", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="parse, aggregate and filter raw files into a cohort file")
    s.add_argument("--obs", required=True, help="observations JSON-lines (aggregated or raw epochs)")
    s.add_argument("--static", required=True, help="static CSV")
    s.add_argument("--events", required=True, help="events JSON-lines")
    s.add_argument("--exclude-file", help="patient ids to exclude, one per line")
    s.add_argument("--min-rpm-days", type=int)
    s.add_argument("--out", required=True, help="cohort JSON-lines to write")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train", help="train the forecaster on the training split")
    s.add_argument("--cohort", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--split-seed", type=int, help="patient split seed (default: --seed)")
    s.add_argument("--split-ratio", type=float, default=0.8)
    s.add_argument("--d-model", type=int)
    s.add_argument("--dropout", type=float)
    s.add_argument("--pos-weight", type=float)
    s.add_argument("--dtype", choices=["float32", "float64"])
    s.add_argument("--stride", type=float, help="window stride in days")
    s.add_argument("--max-tokens", type=int)
    s.add_argument("--cache", help="also write the tokenized windows to this JSON-lines file")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="bootstrap metrics, ROC and importance on the held-out split")
    s.add_argument("--cohort", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--bootstrap", type=int)
    s.add_argument("--mode", choices=[TRAIN_RESAMPLE, TEST_RESAMPLE])
    s.add_argument("--seed", type=int)
    s.add_argument("--threshold", type=float)
    s.add_argument("--epochs", type=int, help="epochs per retrain in train-resample mode")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("importance", help="attention-based variable importance on the held-out split")
    s.add_argument("--model", required=True)
    s.add_argument("--cohort", required=True)
    s.add_argument("--out", required=True, help="importance CSV")
    s.add_argument("--top", type=int, default=10)
    s.set_defaults(func=cmd_importance)

    s = sub.add_parser("trajectory", help="daily risk trajectory for one patient")
    s.add_argument("--model", required=True)
    s.add_argument("--cohort", required=True)
    s.add_argument("--patient", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_trajectory)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help/--version, 2 for usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.print_usage(sys.stderr)
        print("rpmforecast: error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        file_cfg = load_config_file(args.config)
        with threadpool_limits(limits=args.threads):
            return args.func(args, file_cfg)
    except (DataError, IngestError, TrainingError, ValueError, OSError) as exc:
        print(f"rpmforecast: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
