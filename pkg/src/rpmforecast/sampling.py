"""Sliding-window cutoffs, labels, normalization and patient-level splitting."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .domain import BINARY, PatientRecord, VariableCatalog, catalog_default, AdverseEvent

log = logging.getLogger(__name__)

STD_FLOOR = 1e-6
STATIC_FIELDS = ("age", "gender", "bmi")


@dataclass(frozen=True)
class WindowSpec:
    min_history_days: float = 14.0
    horizon_days: float = 28.0
    stride_days: float = 1.0
    max_tokens: int = 1000

    def __post_init__(self):
        if min(self.horizon_days, self.stride_days, self.max_tokens) <= 0 or self.min_history_days < 1:
            raise ValueError(f"invalid window spec {self}")


@dataclass(frozen=True)
class Token:
    t_rel: float
    var: int
    v_norm: float


@dataclass
class WindowSample:
    """One model input: tokens observed up to ``cutoff_days`` and the horizon label.

    Tokens are held column-wise (``t_rel``, ``var``, ``v_norm``); ``tokens``
    gives the row view.
    """

    patient_id: str
    cutoff_days: float
    t_rel: np.ndarray
    var: np.ndarray
    v_norm: np.ndarray
    static_vec: np.ndarray
    label: int
    max_source_t: float = -math.inf

    @property
    def tokens(self) -> list[Token]:
        return [Token(float(t), int(v), float(x)) for t, v, x in zip(self.t_rel, self.var, self.v_norm)]

    def __len__(self) -> int:
        return len(self.var)

    @classmethod
    def from_tokens(cls, patient_id, cutoff_days, tokens: Sequence[Token], static_vec, label) -> WindowSample:
        return cls(
            patient_id,
            cutoff_days,
            np.array([t.t_rel for t in tokens], dtype=float),
            np.array([t.var for t in tokens], dtype=np.int64),
            np.array([t.v_norm for t in tokens], dtype=float),
            np.asarray(static_vec, dtype=float),
            int(label),
        )

    def to_json(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "cutoff_days": self.cutoff_days,
            "t_rel": self.t_rel.tolist(),
            "var": self.var.tolist(),
            "v_norm": self.v_norm.tolist(),
            "static_vec": self.static_vec.tolist(),
            "label": self.label,
        }

    @classmethod
    def from_json(cls, row: dict) -> WindowSample:
        return cls(
            row["patient_id"],
            float(row["cutoff_days"]),
            np.array(row["t_rel"], dtype=float),
            np.array(row["var"], dtype=np.int64),
            np.array(row["v_norm"], dtype=float),
            np.array(row["static_vec"], dtype=float),
            int(row["label"]),
        )


@dataclass
class NormStats:
    var_mean: np.ndarray
    var_std: np.ndarray
    static_mean: np.ndarray
    static_std: np.ndarray
    time_scale_days: float = 28.0

    def to_json(self) -> dict:
        return {
            "var_mean": self.var_mean.tolist(),
            "var_std": self.var_std.tolist(),
            "static_mean": self.static_mean.tolist(),
            "static_std": self.static_std.tolist(),
            "time_scale_days": self.time_scale_days,
        }

    @classmethod
    def from_json(cls, d: dict) -> NormStats:
        return cls(
            np.array(d["var_mean"], dtype=float),
            np.array(d["var_std"], dtype=float),
            np.array(d["static_mean"], dtype=float),
            np.array(d["static_std"], dtype=float),
            float(d["time_scale_days"]),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, NormStats):
            return NotImplemented
        return (
            self.time_scale_days == other.time_scale_days
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("var_mean", "var_std", "static_mean", "static_std")
            )
        )


def generate_cutoffs(rec: PatientRecord, spec: WindowSpec = WindowSpec()) -> list[float]:
    """Cutoffs from ``start + min_history`` in steps of ``stride`` with the horizon fully observed."""
    start = rec.monitoring_start_days
    span = rec.monitoring_end_days - start
    room = span - spec.min_history_days - spec.horizon_days
    if room < 0:
        return []
    n = int(math.floor(room / spec.stride_days + 1e-9)) + 1
    return [start + spec.min_history_days + i * spec.stride_days for i in range(n)]


def label_window(events: Sequence[AdverseEvent], cutoff: float, horizon: float) -> int:
    """1 iff some event falls in the half-open interval (cutoff, cutoff + horizon]."""
    return int(any(cutoff < e.t_days <= cutoff + horizon for e in events))


def compute_norm_stats(
    records: Sequence[PatientRecord], catalog: VariableCatalog | None = None, time_scale_days: float = 28.0
) -> NormStats:
    """Per-variable z-score statistics over training observations; binary variables pass through."""
    if not records:
        raise ValueError("training set is empty")
    catalog = catalog or catalog_default()
    n_var = len(catalog)
    var = np.concatenate([_arrays(r)[1] for r in records])
    val = np.concatenate([_arrays(r)[2] for r in records])
    mean = np.zeros(n_var)
    std = np.ones(n_var)
    counts = np.bincount(var, minlength=n_var)
    for e in catalog:
        if e.value_kind == BINARY:
            continue
        if counts[e.id] == 0:
            log.warning("variable %s never observed in training data; using (0, 1)", e.name)
            continue
        x = val[var == e.id]
        mean[e.id] = x.mean()
        std[e.id] = max(float(x.std()), STD_FLOOR)
    statics = np.array([r.static.as_vector() for r in records], dtype=float)
    s_mean = statics.mean(axis=0)
    s_std = np.maximum(statics.std(axis=0), STD_FLOOR)
    g = STATIC_FIELDS.index("gender")
    s_mean[g], s_std[g] = 0.0, 1.0
    return NormStats(mean, std, s_mean, s_std, time_scale_days)


_ARRAY_CACHE: dict[int, tuple[PatientRecord, tuple[np.ndarray, np.ndarray, np.ndarray]]] = {}


def _arrays(rec: PatientRecord) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Column view (t, var id, value) of a record's observations, cached per record object."""
    hit = _ARRAY_CACHE.get(id(rec))
    if hit is not None and hit[0] is rec:
        return hit[1]
    n = len(rec.observations)
    t = np.fromiter((o.t_days for o in rec.observations), dtype=float, count=n)
    v = np.fromiter((o.variable.id for o in rec.observations), dtype=np.int64, count=n)
    x = np.fromiter((o.value for o in rec.observations), dtype=float, count=n)
    if len(_ARRAY_CACHE) > 4096:
        _ARRAY_CACHE.clear()
    _ARRAY_CACHE[id(rec)] = (rec, (t, v, x))
    return t, v, x


def normalize_static(rec: PatientRecord, stats: NormStats) -> np.ndarray:
    return (np.array(rec.static.as_vector(), dtype=float) - stats.static_mean) / stats.static_std


def tokenize_window(
    rec: PatientRecord, cutoff: float, stats: NormStats, spec: WindowSpec = WindowSpec()
) -> WindowSample:
    """Tokenize every observation at or before ``cutoff``, keeping the most recent ``max_tokens``."""
    t, var, val = _arrays(rec)
    k = int(np.searchsorted(t, cutoff, side="right"))
    lo = max(0, k - spec.max_tokens)
    t, var, val = t[lo:k], var[lo:k], val[lo:k]
    return WindowSample(
        rec.patient_id,
        cutoff,
        (t - cutoff) / stats.time_scale_days,
        var.copy(),
        (val - stats.var_mean[var]) / stats.var_std[var],
        normalize_static(rec, stats),
        label_window(rec.adverse_events, cutoff, spec.horizon_days),
        float(t[-1]) if len(t) else -math.inf,
    )


def has_adverse_event(rec: PatientRecord) -> bool:
    return any(rec.monitoring_start_days <= e.t_days <= rec.monitoring_end_days for e in rec.adverse_events)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_patients(
    cohort: Sequence[PatientRecord], ratio: float = 0.8, seed: int = 0
) -> tuple[list[str], list[str]]:
    """Patient-level split stratified on whether the patient had any adverse event."""
    if not cohort:
        raise ValueError("cannot split an empty cohort")
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    rng = np.random.default_rng(seed)
    strata: dict[bool, list[str]] = {True: [], False: []}
    for rec in cohort:
        strata[has_adverse_event(rec)].append(rec.patient_id)
    groups = [sorted(ids) for ids in strata.values() if ids]
    if any(len(g) < 2 for g in groups):
        log.warning("a stratum has fewer than 2 patients; falling back to unstratified assignment")
        groups = [sorted(pid for g in groups for pid in g)]
    train, test = [], []
    for ids in groups:
        order = rng.permutation(len(ids))
        n_train = _round_half_up(ratio * len(ids))
        train += [ids[i] for i in order[:n_train]]
        test += [ids[i] for i in order[n_train:]]
    if not test:
        log.warning("test split is empty (ratio=%s)", ratio)
    return sorted(train), sorted(test)


@dataclass
class Dataset:
    train: list[WindowSample]
    test: list[WindowSample]
    stats: NormStats
    class_stats: dict
    train_ids: list[str]
    test_ids: list[str]
    skipped_empty: int = 0


def windows_for(
    records: Iterable[PatientRecord], stats: NormStats, spec: WindowSpec
) -> tuple[list[WindowSample], int]:
    out, empty = [], 0
    for rec in records:
        for c in generate_cutoffs(rec, spec):
            s = tokenize_window(rec, c, stats, spec)
            if len(s) == 0:
                empty += 1
                continue
            out.append(s)
    return out, empty


def _rates(samples: Sequence[WindowSample]) -> dict:
    n = len(samples)
    pos = sum(s.label for s in samples)
    return {"n": n, "positive": pos, "rate": pos / n if n else 0.0}


def build_dataset(
    cohort: Sequence[PatientRecord],
    spec: WindowSpec = WindowSpec(),
    seed: int = 0,
    ratio: float = 0.8,
    catalog: VariableCatalog | None = None,
) -> Dataset:
    """Split patients, fit normalization on the training side, tokenize every window."""
    train_ids, test_ids = split_patients(cohort, ratio, seed)
    by_id = {r.patient_id: r for r in cohort}
    train_recs = [by_id[i] for i in train_ids]
    stats = compute_norm_stats(train_recs, catalog, time_scale_days=spec.horizon_days)
    train, e1 = windows_for(train_recs, stats, spec)
    test, e2 = windows_for((by_id[i] for i in test_ids), stats, spec)
    if e1 + e2:
        log.warning("skipped %d windows with no tokens before the cutoff", e1 + e2)
    class_stats = {"train": _rates(train), "test": _rates(test), "all": _rates(train + test)}
    if class_stats["all"]["positive"] == 0:
        log.warning("no positive windows in the cohort; every label is 0")
    return Dataset(train, test, stats, class_stats, train_ids, test_ids, e1 + e2)


def write_cache(path: str | Path, samples: Sequence[WindowSample], stats: NormStats, spec: WindowSpec) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"norm_stats": stats.to_json(), "spec": asdict(spec)}) + "\n")
        for s in samples:
            fh.write(json.dumps(s.to_json()) + "\n")


def read_cache(path: str | Path) -> tuple[list[WindowSample], NormStats, WindowSpec]:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        samples = [WindowSample.from_json(json.loads(line)) for line in fh if line.strip()]
    return samples, NormStats.from_json(header["norm_stats"]), WindowSpec(**header["spec"])
