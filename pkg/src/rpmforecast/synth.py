"""Synthetic remote-monitoring cohorts with a known daily event hazard.

Every patient has one latent health value per day, a mean-reverting random
walk knocked down by each treatment. Wearable epochs, surveys and the
wellness check-in are noisy views of it, and sicker patients wear the device
and answer surveys less often (missing not at random). Adverse events are
daily Bernoulli draws from ``logistic(intercept + slope * max(0, -health))``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .domain import ADVERSE_KINDS, AdverseEvent, PatientRecord, StaticProfile
from .evaluation import auroc
from .ingest import EPOCHS_PER_DAY, EpochStream, assemble_record, event_inputs
from .sampling import WindowSample

MODALITIES = ("hr", "steps", "wear", "survey", "wellness", "treatment")

DEFAULT_KIND_PROBS = {
    "dose_reduction_delay": 0.48,
    "gp_visit_treatment_related": 0.20,
    "ae_visit": 0.15,
    "readmission": 0.14,
    "death": 0.03,
}
# observation-model overrides used for learnability experiments
HIGH_SIGNAL = {"hr_slope": 20.0, "wellness_intercept": -0.2}
# constant hazard with roughly the same window positive rate as the defaults
NULL_HAZARD = {"hazard_slope": 0.0, "hazard_intercept": -5.4}
REGIMEN_PROBS = {"chemotherapy": 0.45, "hormone_therapy": 0.15, "immunotherapy": 0.25, "mixed_therapy": 0.15}


def _logistic(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class SynthConfig:
    n_patients: int = 50
    seed: int = 7
    # monitoring span: lognormal around the median, clipped
    span_median_days: float = 76.0
    span_sigma: float = 0.45
    span_min_days: float = 42.0
    span_max_days: float = 298.0
    # treatment cycle and latent health
    cycle_days: float = 21.0
    delay_days: float = 7.0
    mean_reversion: float = 0.08
    noise_sd: float = 0.2
    shock: float = 0.5
    frailty_sd: float = 0.7
    # daily adverse-event hazard
    hazard_intercept: float = -9.0
    hazard_slope: float = 3.5
    kind_probs: dict = field(default_factory=lambda: dict(DEFAULT_KIND_PROBS))
    # observation models
    hr_rest_mean: float = 72.0
    hr_slope: float = 14.0
    steps_active_mean: float = 70.0
    steps_slope: float = 0.35
    qor_item_mean: float = 7.5
    qor_loading: float = 1.2
    # missingness: logit of daily wear / response probability = intercept + slope * health
    wear_intercept: float = 2.0
    wear_slope: float = 1.2
    survey_intercept: float = -2.4
    survey_slope: float = 0.8
    wellness_intercept: float = -0.8
    wellness_slope: float = 0.8
    # which modalities see the latent health (the rest see a healthy constant)
    linked: tuple[str, ...] = MODALITIES

    def __post_init__(self):
        self.linked = tuple(self.linked)
        if self.n_patients <= 0:
            raise ValueError("n_patients must be positive")
        for name in ("span_sigma", "cycle_days", "mean_reversion", "noise_sd", "frailty_sd", "span_median_days"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.span_min_days <= self.span_max_days:
            raise ValueError("span bounds must satisfy 0 < min <= max")
        if self.hazard_slope < 0 or self.shock < 0:
            raise ValueError("hazard_slope and shock must be non-negative")
        if set(self.kind_probs) - set(ADVERSE_KINDS) or abs(sum(self.kind_probs.values()) - 1) > 1e-9:
            raise ValueError("kind_probs must be a distribution over the adverse event kinds")
        unknown = set(self.linked) - set(MODALITIES)
        if unknown:
            raise ValueError(f"unknown modalities {sorted(unknown)}")

    @classmethod
    def high_signal(cls, **overrides) -> SynthConfig:
        """Defaults with a stronger heart-rate response and more frequent check-ins."""
        return cls(**{**HIGH_SIGNAL, **overrides})

    @classmethod
    def null(cls, **overrides) -> SynthConfig:
        """High-signal observation model with the hazard decoupled from health."""
        return cls.high_signal(**{**NULL_HAZARD, **overrides})

    def to_json(self) -> dict:
        d = asdict(self)
        d["linked"] = list(self.linked)
        return d


@dataclass
class RawPatient:
    """Everything the generator emits for one patient, before aggregation."""

    patient_id: str
    static: StaticProfile
    start_days: float
    end_days: float
    survey_rows: list[tuple[float, str, float]]
    event_rows: list[tuple[float, str]]
    stream: EpochStream

    def to_record(self) -> PatientRecord:
        values = {(t, name): v for t, name, v in self.survey_rows}
        adverse = []
        for t, kind in self.event_rows:
            for name in event_inputs(kind):
                values[(t, name)] = 1.0
            if kind in ADVERSE_KINDS:
                adverse.append(AdverseEvent(t, kind))
        return assemble_record(
            self.patient_id, self.static, self.start_days, self.end_days, values, adverse, self.stream
        )


@dataclass
class GroundTruth:
    health: dict[str, np.ndarray]
    hazard: dict[str, np.ndarray]
    events: dict[str, list[tuple[float, str]]]

    def window_risk(self, patient_id: str, cutoff: float, horizon: float = 28.0) -> float:
        """P(at least one event in (cutoff, cutoff + horizon]) under the true daily hazard."""
        hz = self.hazard[patient_id]
        days = np.arange(len(hz))
        sel = (days >= np.floor(cutoff)) & (days < cutoff + horizon)
        return float(1.0 - np.prod(1.0 - hz[sel]))


def _simulate_patient(i: int, cfg: SynthConfig, rng: np.random.Generator, loadings: np.ndarray):
    pid = f"P{i:04d}"
    linked = set(cfg.linked)
    span = float(np.clip(np.round(cfg.span_median_days * np.exp(cfg.span_sigma * rng.standard_normal())),
                         cfg.span_min_days, cfg.span_max_days))
    static = StaticProfile(
        age=float(np.clip(np.round(rng.normal(62, 11), 1), 20, 95)),
        gender=float(rng.random() < 0.5),
        bmi=float(np.clip(np.round(rng.normal(27, 5), 1), 15, 50)),
    )
    regimen = rng.choice(list(REGIMEN_PROBS), p=list(REGIMEN_PROBS.values()))
    frailty = rng.normal(0, cfg.frailty_sd)
    hr_rest = rng.normal(cfg.hr_rest_mean, 7)
    steps_scale = np.exp(rng.normal(0, 0.3))
    shock = cfg.shock if "treatment" in linked else 0.0
    kinds = list(cfg.kind_probs)
    kind_p = np.array([cfg.kind_probs[k] for k in kinds])

    n_days = int(np.ceil(span))
    health, hazard = [], []
    events: list[tuple[float, str]] = []
    survey: list[tuple[float, str, float]] = []
    hr_t, hr_v, st_t, st_v = [], [], [], []
    next_treatment = float(rng.integers(0, 7))
    last_delay = -np.inf
    end = span
    h = frailty + rng.normal(0, 0.3)

    for d in range(n_days):
        # treatment (delayed after a recent dose reduction / delay event)
        if next_treatment < d + 1:
            if next_treatment - last_delay < cfg.delay_days:
                next_treatment += cfg.delay_days
            else:
                t_treat = d + 0.375
                if t_treat < end:
                    events.append((t_treat, regimen))
                h -= shock
                next_treatment += cfg.cycle_days
        health.append(h)
        p = float(_logistic(cfg.hazard_intercept + cfg.hazard_slope * max(0.0, -h)))
        hazard.append(p)

        def view(m: str) -> float:
            return h if m in linked else 0.0

        # wearable epochs
        if rng.random() < _logistic(cfg.wear_intercept + cfg.wear_slope * view("wear")):
            frac = float(np.clip(0.7 + 0.1 * view("wear") + rng.normal(0, 0.1), 0.2, 1.0))
            n_slots = max(1, int(round(frac * EPOCHS_PER_DAY)))
            s0 = int(rng.integers(0, EPOCHS_PER_DAY - n_slots + 1))
            t = d + np.arange(s0, s0 + n_slots) / EPOCHS_PER_DAY
            keep = t < end
            t = t[keep]
            active = rng.random(t.size) < 0.3
            lam = cfg.steps_active_mean * steps_scale * np.exp(cfg.steps_slope * view("steps"))
            steps = np.where(active, rng.poisson(lam, t.size), 0).astype(float)
            hr = hr_rest + 0.12 * steps + cfg.hr_slope * max(0.0, -view("hr")) + rng.normal(0, 4, t.size)
            hr_t.append(t); hr_v.append(hr); st_t.append(t); st_v.append(steps)
        # QoR-15 with complication seriousness
        if rng.random() < _logistic(cfg.survey_intercept + cfg.survey_slope * view("survey")):
            t = d + float(rng.uniform(0.3, 0.9))
            if t < end:
                hs = view("survey")
                items = np.clip(np.round(cfg.qor_item_mean + loadings * cfg.qor_loading * hs
                                         + rng.normal(0, 1.2, 15)), 0, 10)
                survey.append((t, "qor15_total", float(items.sum())))
                survey += [(t, f"qor15_item_{j + 1}", float(v)) for j, v in enumerate(items)]
                sev = float(np.clip(np.round(0.8 - 0.9 * hs + rng.normal(0, 0.5)), 0, 4))
                survey.append((t, "complication_seriousness", sev))
        # wellness check-in
        if rng.random() < _logistic(cfg.wellness_intercept + cfg.wellness_slope * view("wellness")):
            t = d + float(rng.uniform(0.3, 0.95))
            if t < end:
                survey.append((t, "wellness_checkin", float(view("wellness") + rng.normal(0, 0.6) > -0.4)))
        # adverse event
        if rng.random() < p:
            t = d + float(rng.random())
            if t < end:
                kind = kinds[int(rng.choice(len(kinds), p=kind_p))]
                events.append((t, kind))
                if kind == "dose_reduction_delay":
                    last_delay = t
                if kind == "death":
                    end = t
                    break
        h = h + cfg.mean_reversion * (frailty - h) + cfg.noise_sd * rng.standard_normal()

    def cat(parts):
        return np.concatenate(parts) if parts else np.zeros(0)

    hr_t, hr_v, st_t, st_v = cat(hr_t), cat(hr_v), cat(st_t), cat(st_v)
    if end < span:  # death: drop anything after it
        survey = [r for r in survey if r[0] <= end]
        hr_v, st_v = hr_v[hr_t <= end], st_v[st_t <= end]
        hr_t, st_t = hr_t[hr_t <= end], st_t[st_t <= end]
    stream = EpochStream.from_arrays(hr_t, hr_v, st_t, st_v)
    raw = RawPatient(pid, static, 0.0, float(end), sorted(survey), sorted(events), stream)
    return raw, np.array(health), np.array(hazard), events


def generate_raw(cfg: SynthConfig) -> tuple[list[RawPatient], GroundTruth]:
    root = np.random.SeedSequence(cfg.seed)
    cohort_rng = np.random.default_rng(root.spawn(1)[0])
    loadings = cohort_rng.uniform(0.6, 1.4, 15)
    patients, gt = [], GroundTruth({}, {}, {})
    for i, child in enumerate(np.random.SeedSequence(cfg.seed).spawn(cfg.n_patients + 1)[1:]):
        raw, health, hazard, events = _simulate_patient(i, cfg, np.random.default_rng(child), loadings)
        patients.append(raw)
        gt.health[raw.patient_id] = health
        gt.hazard[raw.patient_id] = hazard
        gt.events[raw.patient_id] = [e for e in events if e[1] in ADVERSE_KINDS]
    return patients, gt


def generate_cohort(cfg: SynthConfig | None = None) -> tuple[list[PatientRecord], GroundTruth]:
    """Simulate ``cfg.n_patients`` patients and aggregate them through the ingest path."""
    cfg = cfg or SynthConfig()
    raw, gt = generate_raw(cfg)
    return [r.to_record() for r in raw], gt


def oracle_auroc(gt: GroundTruth, windows: Sequence[WindowSample], horizon: float = 28.0) -> float:
    """AUROC of the true horizon risk against the realized window labels."""
    scores = [gt.window_risk(w.patient_id, w.cutoff_days, horizon) for w in windows]
    return auroc(scores, [w.label for w in windows])


def write_synth_files(patients: Sequence[RawPatient], gt: GroundTruth, out_dir: str | Path) -> dict[str, Path]:
    """Write raw epochs + survey rows, static CSV, events and ground truth."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "observations": out_dir / "observations.jsonl",
        "static": out_dir / "static.csv",
        "events": out_dir / "events.jsonl",
        "ground_truth": out_dir / "ground_truth.jsonl",
    }
    with open(paths["observations"], "w", encoding="utf-8") as fh:
        for p in patients:
            pid = json.dumps(p.patient_id)
            for t, name, v in p.survey_rows:
                fh.write(f'{{"patient_id": {pid}, "t_days": {t!r}, "variable": "{name}", "value": {v!r}}}\n')
            for kind, ts, vs in (("heart_rate", p.stream.hr_t, p.stream.hr_value),
                                 ("steps", p.stream.steps_t, p.stream.steps_value)):
                lines = [
                    f'{{"patient_id": {pid}, "t_days": {t!r}, "kind": "{kind}", "value": {v!r}}}\n'
                    for t, v in zip(ts.tolist(), vs.tolist())
                ]
                fh.writelines(lines)
    with open(paths["static"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "age", "gender", "bmi", "monitoring_start_days", "monitoring_end_days"])
        for p in patients:
            s = p.static
            w.writerow([p.patient_id, repr(s.age), "M" if s.gender else "F", repr(s.bmi),
                        repr(p.start_days), repr(p.end_days)])
    with open(paths["events"], "w", encoding="utf-8") as fh:
        for p in patients:
            for t, kind in p.event_rows:
                fh.write(json.dumps({"patient_id": p.patient_id, "t_days": t, "kind": kind}) + "\n")
    with open(paths["ground_truth"], "w", encoding="utf-8") as fh:
        for p in patients:
            pid = p.patient_id
            fh.write(json.dumps({
                "patient_id": pid,
                "health": gt.health[pid].tolist(),
                "hazard": gt.hazard[pid].tolist(),
                "events": [[t, k] for t, k in gt.events[pid]],
            }) + "\n")
    return paths


def read_ground_truth(path: str | Path) -> GroundTruth:
    gt = GroundTruth({}, {}, {})
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            pid = row["patient_id"]
            gt.health[pid] = np.array(row["health"])
            gt.hazard[pid] = np.array(row["hazard"])
            gt.events[pid] = [(float(t), k) for t, k in row["events"]]
    return gt
