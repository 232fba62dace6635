"""Variable catalog and patient record types shared by the whole pipeline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

WEARABLE = "wearable"
SURVEY = "survey"
EVENT = "event"
CATEGORIES = (WEARABLE, SURVEY, EVENT)

CONTINUOUS = "continuous"
BINARY = "binary"
ORDINAL = "ordinal"

# Label-eligible adverse event kinds.
ADVERSE_KINDS = (
    "gp_visit_treatment_related",
    "ae_visit",
    "readmission",
    "dose_reduction_delay",
    "death",
)
TREATMENT_VARIABLES = ("chemotherapy", "hormone_therapy", "immunotherapy", "mixed_therapy")
# Input-side counterpart of each adverse kind; death has none.
ADVERSE_TO_VARIABLE = {
    "gp_visit_treatment_related": "gp_visit",
    "ae_visit": "ae_visit",
    "readmission": "readmission",
    "dose_reduction_delay": "dose_reduction_delay",
}

GENDER_CODES = {"F": 0.0, "M": 1.0}


@dataclass(frozen=True)
class VariableId:
    id: int
    name: str


@dataclass(frozen=True)
class CatalogEntry:
    var: VariableId
    category: str
    value_kind: str

    @property
    def name(self) -> str:
        return self.var.name

    @property
    def id(self) -> int:
        return self.var.id


@dataclass(frozen=True)
class VariableCatalog:
    entries: tuple[CatalogEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def by_name(self, name: str) -> CatalogEntry:
        try:
            return self._index()[name]
        except KeyError:
            raise KeyError(f"unknown variable {name!r}") from None

    def id_of(self, name: str) -> int:
        return self.by_name(name).id

    def __contains__(self, name: object) -> bool:
        return name in self._index()

    def count(self, category: str) -> int:
        return sum(1 for e in self.entries if e.category == category)

    def _index(self) -> dict[str, CatalogEntry]:
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {e.name: e for e in self.entries}
            object.__setattr__(self, "_idx", idx)
        return idx

    def to_json(self) -> list[dict]:
        return [
            {"id": e.id, "name": e.name, "category": e.category, "value_kind": e.value_kind}
            for e in self.entries
        ]

    @classmethod
    def from_json(cls, rows: list[dict]) -> VariableCatalog:
        return cls(
            tuple(
                CatalogEntry(VariableId(int(r["id"]), r["name"]), r["category"], r["value_kind"])
                for r in rows
            )
        )


_DEFAULT_SPEC = (
    [
        ("daily_max_hr", WEARABLE, CONTINUOUS),
        ("daily_total_steps", WEARABLE, CONTINUOUS),
        ("daily_wear_pct", WEARABLE, CONTINUOUS),
        ("continuous_absence_duration", WEARABLE, CONTINUOUS),
        ("qor15_total", SURVEY, ORDINAL),
    ]
    + [(f"qor15_item_{i}", SURVEY, ORDINAL) for i in range(1, 16)]
    + [
        ("complication_seriousness", SURVEY, ORDINAL),
        ("wellness_checkin", SURVEY, BINARY),
    ]
    + [(name, EVENT, BINARY) for name in TREATMENT_VARIABLES]
    + [
        ("readmission", EVENT, BINARY),
        ("gp_visit", EVENT, BINARY),
        ("ae_visit", EVENT, BINARY),
        ("dose_reduction_delay", EVENT, BINARY),
    ]
)


@lru_cache(maxsize=1)
def catalog_default() -> VariableCatalog:
    """The 30 time-varying input variables: 4 wearable, 18 survey, 8 event."""
    return VariableCatalog(
        tuple(
            CatalogEntry(VariableId(i, name), cat, kind)
            for i, (name, cat, kind) in enumerate(_DEFAULT_SPEC)
        )
    )


@dataclass(frozen=True)
class Observation:
    patient_id: str
    t_days: float
    variable: VariableId
    value: float


@dataclass(frozen=True)
class StaticProfile:
    age: float
    gender: float  # 0 = female, 1 = male
    bmi: float

    def as_vector(self) -> tuple[float, float, float]:
        return (self.age, self.gender, self.bmi)


@dataclass(frozen=True)
class AdverseEvent:
    t_days: float
    kind: str


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    static: StaticProfile
    observations: tuple[Observation, ...]
    adverse_events: tuple[AdverseEvent, ...]
    monitoring_start_days: float
    monitoring_end_days: float
    extra: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def span_days(self) -> float:
        return self.monitoring_end_days - self.monitoring_start_days


def obs_sort_key(obs: Observation) -> tuple[float, int]:
    return (obs.t_days, obs.variable.id)


def validate_record(rec: PatientRecord, catalog: VariableCatalog | None = None) -> list[str]:
    """Return human-readable invariant violations; an empty list means valid."""
    catalog = catalog or catalog_default()
    out: list[str] = []
    s = rec.static
    if not 0 < s.age < 120:
        out.append(f"static.age: age in (0, 120), got {s.age}")
    if not 5 < s.bmi < 100:
        out.append(f"static.bmi: bmi in (5, 100), got {s.bmi}")
    if rec.monitoring_start_days > rec.monitoring_end_days:
        out.append("monitoring: monitoring_start_days <= monitoring_end_days")

    bad_t = bad_span = bad_value = bad_var = 0
    for o in rec.observations:
        if not math.isfinite(o.t_days) or o.t_days < 0:
            bad_t += 1
        elif not rec.monitoring_start_days <= o.t_days <= rec.monitoring_end_days:
            bad_span += 1
        name = o.variable.name
        if name not in catalog or catalog.id_of(name) != o.variable.id:
            bad_var += 1
        elif not math.isfinite(o.value) or not _value_ok(name, o.value):
            bad_value += 1
    if bad_t:
        out.append(f"observations.t_days: t_days ≥ 0 and finite ({bad_t} offending)")
    if bad_span:
        out.append(f"observations.t_days: within monitoring span ({bad_span} offending)")
    if bad_var:
        out.append(f"observations.variable: resolves in catalog ({bad_var} offending)")
    if bad_value:
        out.append(f"observations.value: finite and in range for variable ({bad_value} offending)")
    keys = [obs_sort_key(o) for o in rec.observations]
    if any(a > b for a, b in zip(keys, keys[1:])):
        out.append("observations: sorted by t_days then variable id")

    kinds_ok = all(e.kind in ADVERSE_KINDS for e in rec.adverse_events)
    if not kinds_ok:
        out.append("adverse_events.kind: one of the five label-eligible kinds")
    times = [e.t_days for e in rec.adverse_events]
    if any(a > b for a, b in zip(times, times[1:])):
        out.append("adverse_events: sorted by t_days")
    return out


def _value_ok(name: str, value: float) -> bool:
    if name == "wellness_checkin":
        return value in (0.0, 1.0)
    if name.startswith("qor15_item_"):
        return 0.0 <= value <= 10.0
    return True
