"""Metrics, bootstrap confidence intervals, attention importance and risk trajectories."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .domain import EVENT, PatientRecord, VariableCatalog
from .model import ModelConfig, ModelParams, predict_batch, train
from .sampling import Dataset, NormStats, WindowSample, WindowSpec, build_dataset, tokenize_window

log = logging.getLogger(__name__)

TRAIN_RESAMPLE = "train-resample"
TEST_RESAMPLE = "test-resample"
MAX_REDRAWS = 100


def _arrays(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=float)
    y = np.asarray(labels, dtype=int)
    if p.shape != y.shape:
        raise ValueError(f"preds and labels differ in length ({p.size} vs {y.size})")
    if p.size == 0:
        raise ValueError("no predictions")
    return p, y


def accuracy(preds, labels, threshold: float = 0.5) -> float:
    """Fraction of windows where ``pred >= threshold`` agrees with the label."""
    p, y = _arrays(preds, labels)
    return float(np.mean((p >= threshold).astype(int) == y))


def _class_counts(y: np.ndarray) -> tuple[int, int]:
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC undefined: labels contain a single class")
    return n_pos, n_neg


def auroc(preds, labels) -> float:
    """Mann-Whitney AUROC via average ranks (ties count one half)."""
    p, y = _arrays(preds, labels)
    n_pos, n_neg = _class_counts(y)
    ranks = rankdata(p)  # average ranks for ties
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(preds, labels) -> list[tuple[float, float, float]]:
    """(fpr, tpr, threshold) points, one per distinct score from high to low.

    The first point (0, 0) uses threshold +inf; the last reaches (1, 1).
    """
    p, y = _arrays(preds, labels)
    n_pos, n_neg = _class_counts(y)
    order = np.argsort(-p, kind="stable")
    p, y = p[order], y[order]
    distinct = np.r_[np.nonzero(np.diff(p))[0], p.size - 1]
    tps = np.cumsum(y)[distinct]
    fps = (distinct + 1) - tps
    points = [(0.0, 0.0, float("inf"))]
    points += [(fp / n_neg, tp / n_pos, float(p[i])) for tp, fp, i in zip(tps, fps, distinct)]
    return points


def roc_area(points: Sequence[tuple[float, float, float]]) -> float:
    x = np.array([pt[0] for pt in points])
    y = np.array([pt[1] for pt in points])
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def percentile_ci(values: Sequence[float], level: float = 95.0) -> tuple[float, float]:
    lo = (100.0 - level) / 2.0
    return float(np.percentile(values, lo)), float(np.percentile(values, 100.0 - lo))


@dataclass
class EvalReport:
    accuracy: float
    accuracy_ci: tuple[float, float]
    auroc: float
    auroc_ci: tuple[float, float]
    roc_points: list[tuple[float, float, float]]
    n_windows: int
    positive_rate: float
    mode: str
    n_boot: int
    boot_accuracy: list[float] = field(default_factory=list)
    boot_auroc: list[float] = field(default_factory=list)
    predictions: list[float] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "accuracy_ci": list(self.accuracy_ci),
            "auroc": self.auroc,
            "auroc_ci": list(self.auroc_ci),
            "n_windows": self.n_windows,
            "positive_rate": self.positive_rate,
            "mode": self.mode,
            "n_boot": self.n_boot,
            "bootstrap": {"accuracy": self.boot_accuracy, "auroc": self.boot_auroc},
        }


def _draw(rng: np.random.Generator, groups: Sequence[np.ndarray], labels: np.ndarray) -> np.ndarray:
    """Resample ``groups`` with replacement until both classes are present."""
    for attempt in range(MAX_REDRAWS):
        pick = rng.integers(0, len(groups), size=len(groups))
        idx = np.concatenate([groups[i] for i in pick])
        if 0 < labels[idx].sum() < idx.size:
            if attempt:
                log.warning("bootstrap resample was single-class; redrew %d time(s)", attempt)
            return idx
    raise ValueError(f"no two-class resample in {MAX_REDRAWS} attempts")


def bootstrap_eval(
    cohort: Sequence[PatientRecord] | None,
    spec: WindowSpec = WindowSpec(),
    config: ModelConfig | None = None,
    n_boot: int = 30,
    mode: str = TRAIN_RESAMPLE,
    seed: int = 0,
    params: ModelParams | None = None,
    dataset: Dataset | None = None,
    threshold: float = 0.5,
) -> EvalReport:
    """Bootstrap point estimates and 95% percentile intervals on a fixed patient-level test split.

    ``train-resample`` redraws training patients and retrains every iteration;
    ``test-resample`` trains once (or uses ``params``) and redraws test windows.
    Iteration ``i`` draws with seed ``seed + i``.
    """
    if mode not in (TRAIN_RESAMPLE, TEST_RESAMPLE):
        raise ValueError(f"unknown bootstrap mode {mode!r}")
    config = config or (params.config if params is not None else ModelConfig())
    if dataset is None:
        dataset = build_dataset(cohort, spec, seed)
    test = dataset.test
    if not test:
        raise ValueError("test split has no windows")
    y_test = np.array([s.label for s in test])
    if y_test.min() == y_test.max():
        raise ValueError(f"test windows are all labelled {y_test[0]}; AUROC undefined")
    accs, aucs = [], []

    if mode == TEST_RESAMPLE:
        if params is None:
            params = train(dataset.train, config, dataset.stats).params
        preds = np.array([p.risk for p in predict_batch(params, test)])
        singles = [np.array([i]) for i in range(len(test))]
        for i in range(n_boot):
            idx = _draw(np.random.default_rng(seed + i), singles, y_test)
            accs.append(accuracy(preds[idx], y_test[idx], threshold))
            aucs.append(auroc(preds[idx], y_test[idx]))
        final_preds = preds
    else:
        train_set = dataset.train
        y_train = np.array([s.label for s in train_set])
        by_patient: dict[str, list[int]] = {}
        for j, s in enumerate(train_set):
            by_patient.setdefault(s.patient_id, []).append(j)
        groups = [np.array(by_patient[k]) for k in sorted(by_patient)]
        all_preds = []
        for i in range(n_boot):
            idx = _draw(np.random.default_rng(seed + i), groups, y_train)
            cfg_i = replace(config, seed=config.seed + i)
            model = train([train_set[j] for j in idx], cfg_i, dataset.stats).params
            preds = np.array([p.risk for p in predict_batch(model, test)])
            all_preds.append(preds)
            accs.append(accuracy(preds, y_test, threshold))
            aucs.append(auroc(preds, y_test))
        final_preds = np.mean(all_preds, axis=0)

    return EvalReport(
        accuracy=float(np.mean(accs)),
        accuracy_ci=percentile_ci(accs),
        auroc=float(np.mean(aucs)),
        auroc_ci=percentile_ci(aucs),
        roc_points=roc_curve(final_preds, y_test),
        n_windows=len(test),
        positive_rate=float(y_test.mean()),
        mode=mode,
        n_boot=n_boot,
        boot_accuracy=accs,
        boot_auroc=aucs,
        predictions=final_preds.tolist(),
    )


# --------------------------------------------------------------------------- importance


@dataclass
class ImportanceReport:
    names: list[str]
    categories: list[str]
    scores: np.ndarray
    category_scores: dict[str, float]
    n_windows: int

    @property
    def ranking(self) -> list[str]:
        order = sorted(range(len(self.names)), key=lambda i: (-self.scores[i], i))
        return [self.names[i] for i in order]

    def rank_of(self, name: str) -> int:
        return self.ranking.index(name) + 1

    def rows(self) -> list[tuple[str, str, float, int]]:
        ranks = {n: r for r, n in enumerate(self.ranking, 1)}
        return [(n, c, float(s), ranks[n]) for n, c, s in zip(self.names, self.categories, self.scores)]


def feature_importance(params: ModelParams, samples: Sequence[WindowSample]) -> ImportanceReport:
    """Mean per-window share of fusion-attention mass received by each variable."""
    if not samples:
        raise ValueError("need at least one window")
    catalog = params.catalog
    n_vars = len(catalog)
    total = np.zeros(n_vars)
    for s, pred in zip(samples, predict_batch(params, samples)):
        w = np.bincount(s.var, weights=pred.fusion_weights, minlength=n_vars)
        total += w / w.sum()
    scores = total / total.sum()
    cats = [e.category for e in catalog]
    rollup: dict[str, float] = {}
    for c, sc in zip(cats, scores):
        rollup[c] = rollup.get(c, 0.0) + float(sc)
    rollup["monitoring"] = float(sum(v for c, v in rollup.items() if c != EVENT))
    return ImportanceReport(catalog.names, cats, scores, rollup, len(samples))


# --------------------------------------------------------------------------- trajectories


@dataclass
class RiskTrajectory:
    patient_id: str
    points: list[tuple[float, float]]
    annotations: list[tuple[float, str]]


def trajectory_cutoffs(rec: PatientRecord, spec: WindowSpec) -> list[float]:
    start = rec.monitoring_start_days + spec.min_history_days
    n = int(np.floor(rec.monitoring_end_days - start + 1e-9)) + 1
    return [start + i for i in range(max(n, 0))]


def clinical_annotations(rec: PatientRecord, catalog: VariableCatalog) -> list[tuple[float, str]]:
    event_names = {e.name for e in catalog if e.category == EVENT}
    notes = {(e.t_days, e.kind) for e in rec.adverse_events}
    notes |= {(o.t_days, o.variable.name) for o in rec.observations if o.variable.name in event_names}
    lo, hi = rec.monitoring_start_days, rec.monitoring_end_days
    return sorted(n for n in notes if lo <= n[0] <= hi)


def risk_trajectory(
    params: ModelParams, rec: PatientRecord, stats: NormStats | None = None, spec: WindowSpec = WindowSpec()
) -> RiskTrajectory:
    """Daily risk from ``start + min_history`` to the end of monitoring, with events annotated."""
    stats = stats or params.norm_stats
    if stats is None:
        raise ValueError("normalization statistics required")
    if rec.span_days < spec.min_history_days:
        raise ValueError(f"patient {rec.patient_id}: span {rec.span_days:g} d shorter than min history")
    samples = [tokenize_window(rec, c, stats, spec) for c in trajectory_cutoffs(rec, spec)]
    keep = [s for s in samples if len(s)]
    preds = predict_batch(params, keep) if keep else []
    points = [(s.cutoff_days, p.risk) for s, p in zip(keep, preds)]
    return RiskTrajectory(rec.patient_id, points, clinical_annotations(rec, params.catalog))


# --------------------------------------------------------------------------- csv output


def write_roc_csv(points, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr", "threshold"])
        for fpr, tpr, thr in points:
            w.writerow([repr(fpr), repr(tpr), "inf" if thr == float("inf") else repr(thr)])


def write_importance_csv(report: ImportanceReport, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variable", "category", "score", "rank"])
        for name, cat, score, rank in sorted(report.rows(), key=lambda r: r[3]):
            w.writerow([name, cat, repr(score), rank])


def write_trajectory_csvs(traj: RiskTrajectory, out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    risk_path = out_dir / f"trajectory_{traj.patient_id}.csv"
    ev_path = out_dir / f"events_{traj.patient_id}.csv"
    with open(risk_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cutoff_days", "risk"])
        w.writerows([repr(c), repr(r)] for c, r in traj.points)
    with open(ev_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_days", "kind"])
        w.writerows([repr(t), k] for t, k in traj.annotations)
    return risk_path, ev_path
