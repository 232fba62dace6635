"""Raw stream parsing, vital clipping, daily aggregation and patient filtering.

Wearables arrive as 5-minute epochs (heart rate in bpm, step counts per epoch).
They are clamped to physiological bounds, bucketed into days by
``floor(t_days)`` and summarised into one observation per variable per day,
stamped at the end of that day so nothing leaks ahead of a cutoff.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .domain import (
    ADVERSE_KINDS,
    ADVERSE_TO_VARIABLE,
    EVENT,
    GENDER_CODES,
    SURVEY,
    TREATMENT_VARIABLES,
    AdverseEvent,
    Observation,
    PatientRecord,
    StaticProfile,
    VariableCatalog,
    catalog_default,
    obs_sort_key,
    validate_record,
)

log = logging.getLogger(__name__)

HEART_RATE = "heart_rate"
STEPS = "steps"
SENSOR_KINDS = (HEART_RATE, STEPS)
CLIP_BOUNDS = {HEART_RATE: (40.0, 200.0), STEPS: (0.0, 600.0)}
EPOCHS_PER_DAY = 288
DEFAULT_GAP_THRESHOLD = 0.5


class IngestError(ValueError):
    """Input data that cannot be turned into valid patient records."""


class RejectedRecordError(IngestError):
    pass


@dataclass(frozen=True)
class RawSensorEpoch:
    patient_id: str
    t_days: float
    kind: str
    value: float


def clip_vitals(epoch: RawSensorEpoch) -> RawSensorEpoch:
    """Clamp heart rate to [40, 200] bpm and steps to [0, 600] per epoch."""
    if not math.isfinite(epoch.value):
        raise RejectedRecordError(f"non-finite {epoch.kind} value for {epoch.patient_id} at t={epoch.t_days}")
    lo, hi = CLIP_BOUNDS[epoch.kind]
    value = min(max(epoch.value, lo), hi)
    if value == epoch.value:
        return epoch
    return RawSensorEpoch(epoch.patient_id, epoch.t_days, epoch.kind, value)


def clip_array(kind: str, values: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise RejectedRecordError(f"non-finite {kind} values")
    lo, hi = CLIP_BOUNDS[kind]
    return np.clip(values, lo, hi)


@dataclass
class EpochStream:
    """Columnar sensor epochs of one patient, the bulk form of RawSensorEpoch lists."""

    hr_t: np.ndarray
    hr_value: np.ndarray
    steps_t: np.ndarray
    steps_value: np.ndarray

    @classmethod
    def from_epochs(cls, epochs: Iterable[RawSensorEpoch]) -> EpochStream:
        cols: dict[str, tuple[list[float], list[float]]] = {k: ([], []) for k in SENSOR_KINDS}
        for e in epochs:
            if e.kind not in cols:
                raise IngestError(f"unknown sensor kind {e.kind!r}")
            cols[e.kind][0].append(e.t_days)
            cols[e.kind][1].append(e.value)
        return cls.from_arrays(*cols[HEART_RATE], *cols[STEPS])

    @classmethod
    def from_arrays(cls, hr_t, hr_value, steps_t, steps_value) -> EpochStream:
        hr_t = np.asarray(hr_t, dtype=float)
        steps_t = np.asarray(steps_t, dtype=float)
        ho = np.argsort(hr_t, kind="stable")
        so = np.argsort(steps_t, kind="stable")
        return cls(
            hr_t[ho],
            clip_array(HEART_RATE, np.asarray(hr_value, dtype=float)[ho]),
            steps_t[so],
            clip_array(STEPS, np.asarray(steps_value, dtype=float)[so]),
        )

    def __len__(self) -> int:
        return len(self.hr_t) + len(self.steps_t)


def _day_summaries(stream: EpochStream, days: np.ndarray) -> dict[str, np.ndarray]:
    """Per-day max HR, total steps, HR epoch count and distinct HR slots for ``days``."""
    n = len(days)
    first = int(days[0]) if n else 0
    hr_day = np.floor(stream.hr_t).astype(np.int64) - first
    st_day = np.floor(stream.steps_t).astype(np.int64) - first
    hr_in = (hr_day >= 0) & (hr_day < n)
    st_in = (st_day >= 0) & (st_day < n)

    max_hr = np.full(n, -np.inf)
    np.maximum.at(max_hr, hr_day[hr_in], stream.hr_value[hr_in])
    hr_count = np.bincount(hr_day[hr_in], minlength=n)
    steps = np.bincount(st_day[st_in], weights=stream.steps_value[st_in], minlength=n)

    slot = np.floor((stream.hr_t[hr_in] - np.floor(stream.hr_t[hr_in])) * EPOCHS_PER_DAY + 1e-6).astype(np.int64)
    slot = np.minimum(slot, EPOCHS_PER_DAY - 1)
    pairs = np.unique(hr_day[hr_in] * EPOCHS_PER_DAY + slot)
    slots = np.bincount(pairs // EPOCHS_PER_DAY, minlength=n)
    return {"max_hr": max_hr, "steps": steps, "hr_count": hr_count, "slots": slots}


def _daily_observations(
    patient_id: str, days: np.ndarray, summary: dict[str, np.ndarray], catalog: VariableCatalog
) -> list[Observation]:
    v_hr = catalog.by_name("daily_max_hr").var
    v_steps = catalog.by_name("daily_total_steps").var
    v_wear = catalog.by_name("daily_wear_pct").var
    out = []
    for i, day in enumerate(days):
        t = float(day) + 1.0
        if summary["hr_count"][i] == 0:
            out.append(Observation(patient_id, t, v_wear, 0.0))
            continue
        out.append(Observation(patient_id, t, v_hr, float(summary["max_hr"][i])))
        out.append(Observation(patient_id, t, v_steps, float(summary["steps"][i])))
        out.append(Observation(patient_id, t, v_wear, 100.0 * float(summary["slots"][i]) / EPOCHS_PER_DAY))
    return out


def aggregate_daily(
    epochs: Sequence[RawSensorEpoch], day: int, catalog: VariableCatalog | None = None
) -> list[Observation]:
    """Summarise one day's clipped epochs into observations stamped at ``day + 1``.

    A day without heart-rate epochs yields only ``daily_wear_pct = 0``; max HR
    and steps are skipped rather than imputed.
    """
    if day < 0:
        raise ValueError(f"day must be non-negative, got {day}")
    catalog = catalog or catalog_default()
    for e in epochs:
        if not day <= e.t_days < day + 1:
            raise ValueError(f"epoch at t={e.t_days} outside day {day}")
    pid = epochs[0].patient_id if epochs else ""
    stream = EpochStream.from_epochs(epochs)
    days = np.array([day])
    return _daily_observations(pid, days, _day_summaries(stream, days), catalog)


def aggregate_stream(
    patient_id: str,
    stream: EpochStream,
    start_days: float,
    end_days: float,
    catalog: VariableCatalog | None = None,
) -> list[Observation]:
    """Daily summaries for every complete day of the monitoring span."""
    catalog = catalog or catalog_default()
    first = max(int(math.floor(start_days)), 0)
    last = int(math.floor(end_days)) - 1  # day d is complete once d + 1 <= end
    days = np.arange(first, last + 1)
    if not len(days):
        return []
    return _daily_observations(patient_id, days, _day_summaries(stream, days), catalog)


def absence_tokens(
    epochs: Sequence[RawSensorEpoch] | EpochStream,
    gap_threshold: float = DEFAULT_GAP_THRESHOLD,
    catalog: VariableCatalog | None = None,
    patient_id: str | None = None,
) -> list[Observation]:
    """One ``continuous_absence_duration`` token at the end of each long HR gap."""
    catalog = catalog or catalog_default()
    var = catalog.by_name("continuous_absence_duration").var
    if isinstance(epochs, EpochStream):
        t = epochs.hr_t
        pid = patient_id or ""
    else:
        t = np.array([e.t_days for e in epochs if e.kind == HEART_RATE])
        pid = patient_id or (epochs[0].patient_id if epochs else "")
    if len(t) < 2:
        return []
    gaps = np.diff(t)
    idx = np.nonzero(gaps >= gap_threshold)[0]
    return [Observation(pid, float(t[i + 1]), var, float(gaps[i])) for i in idx]


def wearable_observations(
    patient_id: str,
    stream: EpochStream,
    start_days: float,
    end_days: float,
    gap_threshold: float = DEFAULT_GAP_THRESHOLD,
    catalog: VariableCatalog | None = None,
) -> list[Observation]:
    """Daily aggregates plus absence tokens for a patient's whole sensor stream."""
    if len(stream.hr_t) == 0 and len(stream.steps_t) == 0:
        return []
    obs = aggregate_stream(patient_id, stream, start_days, end_days, catalog)
    obs += [
        o
        for o in absence_tokens(stream, gap_threshold, catalog, patient_id)
        if start_days <= o.t_days <= end_days
    ]
    return obs


# --------------------------------------------------------------------------- files


def event_inputs(kind: str) -> tuple[str, ...]:
    """Input variables set to 1.0 by a clinical event of ``kind``."""
    if kind in ADVERSE_KINDS:
        counterpart = ADVERSE_TO_VARIABLE.get(kind)
        return (counterpart,) if counterpart else ()
    return (kind,)


def assemble_record(
    patient_id: str,
    profile: StaticProfile,
    start: float,
    end: float,
    values: dict[tuple[float, str], float],
    adverse: Sequence[AdverseEvent],
    stream: EpochStream | None = None,
    catalog: VariableCatalog | None = None,
    gap_threshold: float = DEFAULT_GAP_THRESHOLD,
) -> PatientRecord:
    """Build a sorted record from keyed observations, adverse events and raw epochs."""
    catalog = catalog or catalog_default()
    obs = [Observation(patient_id, t, catalog.by_name(name).var, v) for (t, name), v in values.items()]
    if stream is not None:
        obs += wearable_observations(patient_id, stream, start, end, gap_threshold, catalog)
    obs.sort(key=obs_sort_key)
    return PatientRecord(
        patient_id,
        profile,
        tuple(obs),
        tuple(sorted(adverse, key=lambda e: (e.t_days, e.kind))),
        start,
        end,
    )


@dataclass
class ParseReport:
    n_lines: int = 0
    n_epochs: int = 0
    duplicates: int = 0
    n_patients: int = 0


def _read_jsonl(path: Path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(row, dict):
                raise IngestError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, row


def _number(row: dict, key: str, where: str) -> float:
    try:
        value = float(row[key])
    except (KeyError, TypeError, ValueError):
        raise IngestError(f"{where}: missing or non-numeric {key!r}") from None
    if not math.isfinite(value):
        raise IngestError(f"{where}: non-finite {key!r}")
    return value


def read_static(path: str | Path) -> dict[str, tuple[StaticProfile, float, float]]:
    path = Path(path)
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = ["patient_id", "age", "gender", "bmi", "monitoring_start_days", "monitoring_end_days"]
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != expected:
            raise IngestError(f"{path}: header must be {','.join(expected)}")
        for lineno, row in enumerate(reader, 2):
            row = {k.strip(): (v or "").strip() for k, v in row.items() if k is not None}
            where = f"{path}:{lineno}"
            gender = row["gender"]
            if gender not in GENDER_CODES:
                raise IngestError(f"{where}: gender must be F or M, got {gender!r}")
            try:
                age, bmi, start, end = (
                    float(row[k]) for k in ("age", "bmi", "monitoring_start_days", "monitoring_end_days")
                )
            except ValueError:
                raise IngestError(f"{where}: non-numeric field") from None
            out[row["patient_id"]] = (StaticProfile(age, GENDER_CODES[gender], bmi), start, end)
    return out


def parse_cohort_with_report(
    observations_path: str | Path,
    static_path: str | Path,
    events_path: str | Path,
    catalog: VariableCatalog | None = None,
    gap_threshold: float = DEFAULT_GAP_THRESHOLD,
) -> tuple[list[PatientRecord], ParseReport]:
    catalog = catalog or catalog_default()
    report = ParseReport()
    statics = read_static(static_path)

    values: dict[str, dict[tuple[float, str], float]] = {pid: {} for pid in statics}
    epochs: dict[str, dict[str, tuple[list[float], list[float]]]] = {}
    unknown: Counter[str] = Counter()
    orphans: set[str] = set()

    def put(pid: str, t: float, name: str, value: float) -> None:
        bucket = values[pid]
        if (t, name) in bucket:
            report.duplicates += 1
        bucket[(t, name)] = value

    for lineno, row in _read_jsonl(Path(observations_path)):
        report.n_lines += 1
        where = f"{observations_path}:{lineno}"
        pid = str(row.get("patient_id", "")).strip()
        t = _number(row, "t_days", where)
        value = _number(row, "value", where)
        if pid not in statics:
            orphans.add(pid)
            continue
        if "variable" in row:
            name = str(row["variable"]).strip()
            if name not in catalog:
                unknown[name] += 1
                continue
            put(pid, t, name, value)
        elif "kind" in row:
            kind = str(row["kind"]).strip()
            if kind not in SENSOR_KINDS:
                raise IngestError(f"{where}: unknown sensor kind {kind!r}")
            cols = epochs.setdefault(pid, {k: ([], []) for k in SENSOR_KINDS})
            cols[kind][0].append(t)
            cols[kind][1].append(value)
            report.n_epochs += 1
        else:
            raise IngestError(f"{where}: row needs 'variable' or 'kind'")
    if unknown:
        raise IngestError("unknown variable names: " + ", ".join(sorted(unknown)))

    adverse: dict[str, list[AdverseEvent]] = {pid: [] for pid in statics}
    event_kinds = set(ADVERSE_KINDS) | {e.name for e in catalog if e.category == EVENT}
    for lineno, row in _read_jsonl(Path(events_path)):
        where = f"{events_path}:{lineno}"
        pid = str(row.get("patient_id", "")).strip()
        t = _number(row, "t_days", where)
        kind = str(row.get("kind", "")).strip()
        if kind not in event_kinds:
            raise IngestError(f"{where}: unknown event kind {kind!r}")
        if pid not in statics:
            orphans.add(pid)
            continue
        for name in event_inputs(kind):
            put(pid, t, name, 1.0)
        if kind in ADVERSE_KINDS:
            adverse[pid].append(AdverseEvent(t, kind))
    if orphans:
        raise IngestError("patients missing from static file: " + ", ".join(sorted(orphans)))

    records = []
    for pid in sorted(statics):
        profile, start, end = statics[pid]
        stream = None
        if pid in epochs:
            cols = epochs[pid]
            stream = EpochStream.from_arrays(*cols[HEART_RATE], *cols[STEPS])
        rec = assemble_record(pid, profile, start, end, values[pid], adverse[pid], stream, catalog, gap_threshold)
        problems = validate_record(rec, catalog)
        if problems:
            raise IngestError(f"patient {pid}: " + "; ".join(problems))
        records.append(rec)
    report.n_patients = len(records)
    if report.duplicates:
        log.warning("%d duplicate (patient, t, variable) rows; kept the last of each", report.duplicates)
    return records, report


def parse_cohort(
    observations_path: str | Path,
    static_path: str | Path,
    events_path: str | Path,
    catalog: VariableCatalog | None = None,
) -> list[PatientRecord]:
    """Read the observation, static and event files into validated records."""
    return parse_cohort_with_report(observations_path, static_path, events_path, catalog)[0]


def write_cohort_files(records: Sequence[PatientRecord], out_dir: str | Path) -> dict[str, Path]:
    """Write records back out in the three ingest formats (already aggregated)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "observations": out_dir / "observations.jsonl",
        "static": out_dir / "static.csv",
        "events": out_dir / "events.jsonl",
    }
    catalog = catalog_default()
    inv_gender = {v: k for k, v in GENDER_CODES.items()}
    with open(paths["static"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "age", "gender", "bmi", "monitoring_start_days", "monitoring_end_days"])
        for r in records:
            w.writerow(
                [r.patient_id, repr(r.static.age), inv_gender[r.static.gender], repr(r.static.bmi),
                 repr(r.monitoring_start_days), repr(r.monitoring_end_days)]
            )
    with open(paths["observations"], "w", encoding="utf-8") as obs_fh, open(
        paths["events"], "w", encoding="utf-8"
    ) as ev_fh:
        for r in records:
            implied = {(e.t_days, ADVERSE_TO_VARIABLE[e.kind]) for e in r.adverse_events if e.kind in ADVERSE_TO_VARIABLE}
            for e in r.adverse_events:
                ev_fh.write(json.dumps({"patient_id": r.patient_id, "t_days": e.t_days, "kind": e.kind}) + "\n")
            for o in r.observations:
                name = o.variable.name
                if (o.t_days, name) in implied and o.value == 1.0:
                    continue
                if catalog.by_name(name).category == EVENT:
                    ev_fh.write(json.dumps({"patient_id": r.patient_id, "t_days": o.t_days, "kind": name}) + "\n")
                else:
                    row = {"patient_id": r.patient_id, "t_days": o.t_days, "variable": name, "value": o.value}
                    obs_fh.write(json.dumps(row) + "\n")
    return paths


# --------------------------------------------------------------------------- cohort file


def record_to_json(rec: PatientRecord) -> dict:
    return {
        "patient_id": rec.patient_id,
        "static": {"age": rec.static.age, "gender": rec.static.gender, "bmi": rec.static.bmi},
        "monitoring_start_days": rec.monitoring_start_days,
        "monitoring_end_days": rec.monitoring_end_days,
        "observations": [[o.t_days, o.variable.name, o.value] for o in rec.observations],
        "adverse_events": [[e.t_days, e.kind] for e in rec.adverse_events],
    }


def record_from_json(row: dict, catalog: VariableCatalog | None = None) -> PatientRecord:
    catalog = catalog or catalog_default()
    pid = row["patient_id"]
    s = row["static"]
    return PatientRecord(
        pid,
        StaticProfile(float(s["age"]), float(s["gender"]), float(s["bmi"])),
        tuple(Observation(pid, float(t), catalog.by_name(n).var, float(v)) for t, n, v in row["observations"]),
        tuple(AdverseEvent(float(t), k) for t, k in row["adverse_events"]),
        float(row["monitoring_start_days"]),
        float(row["monitoring_end_days"]),
    )


def write_cohort(records: Sequence[PatientRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_json(rec)) + "\n")


def read_cohort(path: str | Path, catalog: VariableCatalog | None = None) -> list[PatientRecord]:
    return [record_from_json(row, catalog) for _, row in _read_jsonl(Path(path))]


# --------------------------------------------------------------------------- filters


@dataclass(frozen=True)
class FilterRule:
    rule_id: str
    description: str
    drop: Callable[[PatientRecord], bool]
    params: dict = field(default_factory=dict)


@dataclass
class FilterReport:
    drop_counts: dict[str, int]
    kept: list[str]
    dropped: list[tuple[str, str]]

    def table(self) -> str:
        width = max([len(k) for k in self.drop_counts] + [len("kept")])
        lines = [f"{'rule'.ljust(width)}  patients"]
        lines += [f"{rid.ljust(width)}  {n}" for rid, n in self.drop_counts.items()]
        lines.append(f"{'kept'.ljust(width)}  {len(self.kept)}")
        return "\n".join(lines)


def rpm_days(rec: PatientRecord) -> int:
    """Distinct days carrying real monitoring data (a worn device or a survey answer)."""
    catalog = catalog_default()
    days = set()
    for o in rec.observations:
        name = o.variable.name
        if name == "daily_max_hr":
            days.add(math.floor(o.t_days) - 1)  # stamped at the end of the day it summarises
        elif catalog.by_name(name).category == SURVEY:
            days.add(math.floor(o.t_days))
    return len(days)


def _has_treatment(rec: PatientRecord) -> bool:
    return any(
        o.variable.name in TREATMENT_VARIABLES
        and rec.monitoring_start_days <= o.t_days <= rec.monitoring_end_days
        for o in rec.observations
    )


def default_rules(min_rpm_days: int = 3, exclude_ids: Iterable[str] = ()) -> list[FilterRule]:
    excluded = frozenset(exclude_ids)
    return [
        FilterRule("empty_record", "patients with empty record", lambda r: not r.observations),
        FilterRule("no_treatment", "no treatment received in monitoring period", lambda r: not _has_treatment(r)),
        FilterRule(
            "few_rpm_days",
            f"any RPM data for < {min_rpm_days} days",
            lambda r: rpm_days(r) < min_rpm_days,
            {"min_rpm_days": min_rpm_days},
        ),
        FilterRule(
            "excluded_list",
            "explicitly excluded (externally known reason)",
            lambda r: r.patient_id in excluded,
            {"n_ids": len(excluded)},
        ),
    ]


def read_exclude_file(path: str | Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip() and not line.lstrip().startswith("#")]


def apply_filters(
    cohort: Sequence[PatientRecord], rules: Sequence[FilterRule] | None = None
) -> tuple[list[PatientRecord], FilterReport]:
    """Drop patients matching any rule; the first matching rule is credited."""
    rules = default_rules() if rules is None else rules
    counts = {r.rule_id: 0 for r in rules}
    kept, kept_ids, dropped = [], [], []
    for rec in cohort:
        hit = next((r for r in rules if r.drop(rec)), None)
        if hit is None:
            kept.append(rec)
            kept_ids.append(rec.patient_id)
        else:
            counts[hit.rule_id] += 1
            dropped.append((rec.patient_id, hit.rule_id))
    return kept, FilterReport(counts, kept_ids, dropped)

