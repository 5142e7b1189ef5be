"""Synthetic patients, clinicians and facilities for the four FQHC archetypes."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np

from .kernel import MINUTES_PER_DAY, RngStream, SimTime

MEASURES = ("HbA1c", "LDL", "EyeExam", "Nephropathy")
INSURANCE_CATEGORIES = ("continuous", "intermittent", "uninsured", "medicaid")
MINORITY_GROUPS = ("hispanic", "black", "other")
MINORITY_SPLIT = (0.50, 0.35, 0.15)
DAYS_PER_YEAR = 365


class InvalidSpec(ValueError):
    pass


class NoClinicians(ValueError):
    pass


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterSpec:
    cluster_id: int
    fqhc_count: int
    description: str
    age_mean: float
    age_sd: float
    female_share: float
    minority_share: float
    ses_alpha: float
    ses_beta: float
    ins_continuous: float
    ins_intermittent: float
    ins_uninsured: float
    ins_medicaid: float
    diabetes_prevalence: float
    population_served: int

    @property
    def insurance_weights(self) -> dict[str, float]:
        return dict(zip(INSURANCE_CATEGORIES, (self.ins_continuous, self.ins_intermittent,
                                               self.ins_uninsured, self.ins_medicaid)))

    @property
    def ses_mean(self) -> float:
        return self.ses_alpha / (self.ses_alpha + self.ses_beta)

    def validate(self) -> None:
        weights = list(self.insurance_weights.values())
        if any(w < 0 for w in weights) or not math.isclose(sum(weights), 1.0, abs_tol=1e-9):
            raise InvalidSpec(f"cluster {self.cluster_id}: insurance weights must be "
                              f"non-negative and sum to 1, got {weights}")
        for name in ("female_share", "minority_share", "diabetes_prevalence"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidSpec(f"cluster {self.cluster_id}: {name}={value} outside [0, 1]")
        if self.age_sd < 0 or self.ses_alpha <= 0 or self.ses_beta <= 0:
            raise InvalidSpec(f"cluster {self.cluster_id}: bad age/SES parameters")
        if self.fqhc_count < 0:
            raise InvalidSpec(f"cluster {self.cluster_id}: negative fqhc_count")


def builtin_cluster_specs() -> list[ClusterSpec]:
    """The four archetypes and their FQHC counts.

    Attribute values are calibration defaults picked to respect the ordinal
    descriptions of each archetype (which one is older, poorer, more diverse);
    they are not measured quantities.
    """
    return [
        ClusterSpec(1, 399, "Older, low diversity population, with better access to "
                    "insurance, and more income",
                    age_mean=52.0, age_sd=16.0, female_share=0.56, minority_share=0.25,
                    ses_alpha=4.0, ses_beta=3.0,
                    ins_continuous=0.55, ins_intermittent=0.20, ins_uninsured=0.15,
                    ins_medicaid=0.10, diabetes_prevalence=0.10, population_served=8000),
        ClusterSpec(2, 274, "High diversity, poor, with a lot of uninsured, in FQHCs "
                    "serving a small population",
                    age_mean=40.0, age_sd=15.0, female_share=0.55, minority_share=0.70,
                    ses_alpha=2.0, ses_beta=4.0,
                    ins_continuous=0.25, ins_intermittent=0.20, ins_uninsured=0.40,
                    ins_medicaid=0.15, diabetes_prevalence=0.11, population_served=4000),
        ClusterSpec(3, 69, "Poor, with higher diabetes, relatively high diversity "
                    "(~50% minority), and FQHCs serving a large population",
                    age_mean=45.0, age_sd=16.0, female_share=0.56, minority_share=0.50,
                    ses_alpha=2.0, ses_beta=4.0,
                    ins_continuous=0.30, ins_intermittent=0.20, ins_uninsured=0.25,
                    ins_medicaid=0.25, diabetes_prevalence=0.16, population_served=20000),
        ClusterSpec(4, 456, "Young, relatively poor, with high diversity, and high "
                    "Medicaid enrollment and FQHCs serving a large population",
                    age_mean=34.0, age_sd=14.0, female_share=0.57, minority_share=0.70,
                    ses_alpha=2.5, ses_beta=3.5,
                    ins_continuous=0.25, ins_intermittent=0.15, ins_uninsured=0.20,
                    ins_medicaid=0.40, diabetes_prevalence=0.09, population_served=18000),
    ]


CLUSTER_COLUMNS = tuple(f.name for f in fields(ClusterSpec))
_INT_COLUMNS = {"cluster_id", "fqhc_count", "population_served"}


def dump_cluster_csv(specs: Sequence[ClusterSpec], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CLUSTER_COLUMNS)
        for spec in specs:
            writer.writerow([repr(getattr(spec, c)) if isinstance(getattr(spec, c), float)
                             else getattr(spec, c) for c in CLUSTER_COLUMNS])


def load_cluster_csv(path) -> list[ClusterSpec]:
    """Read cluster archetypes from a CSV with one row per cluster.

    Every column of :data:`CLUSTER_COLUMNS` is required; ``fqhc_count`` becomes
    the aggregation weight of the cluster.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in CLUSTER_COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
        specs = []
        for lineno, row in enumerate(reader, start=2):
            values = {}
            for column in CLUSTER_COLUMNS:
                raw = row[column]
                try:
                    if column == "description":
                        values[column] = raw
                    elif column in _INT_COLUMNS:
                        values[column] = int(raw)
                    else:
                        values[column] = float(raw)
                except (TypeError, ValueError):
                    raise SchemaError(f"{path}:{lineno}: bad value {raw!r} in column "
                                      f"{column}") from None
            spec = ClusterSpec(**values)
            spec.validate()
            specs.append(spec)
    if not specs:
        raise SchemaError(f"{path}: no cluster rows")
    ids = [s.cluster_id for s in specs]
    if len(set(ids)) != len(ids):
        raise SchemaError(f"{path}: duplicate cluster_id")
    return specs


@dataclass(slots=True)
class PatientProfile:
    id: int
    age: int
    sex: str
    race_ethnicity: str
    ses_index: float
    insurance: str
    has_diabetes: bool
    symptom_propensity: dict
    wellness_due: SimTime
    assigned_clinician: Optional[int] = None
    screening_history: dict = field(default_factory=lambda: dict.fromkeys(MEASURES))

    @property
    def minority(self) -> bool:
        return self.race_ethnicity != "white"

    def as_row(self) -> tuple:
        return (self.id, self.age, self.sex, self.race_ethnicity, repr(self.ses_index),
                self.insurance, self.has_diabetes,
                repr(self.symptom_propensity["sick"]),
                repr(self.symptom_propensity["diabetes_symptoms"]),
                self.wellness_due, self.assigned_clinician)


def generate_population(spec: ClusterSpec, n: int, stream: RngStream) -> list[PatientProfile]:
    if n < 0:
        raise ValueError("population size must be non-negative")
    spec.validate()
    if n == 0:
        return []
    g = stream.generator
    ages = np.clip(np.rint(g.normal(spec.age_mean, spec.age_sd, n)), 18, 90).astype(int)
    female = g.random(n) < spec.female_share
    minority = g.random(n) < spec.minority_share
    group = g.choice(len(MINORITY_GROUPS), size=n, p=MINORITY_SPLIT)
    ses = g.beta(spec.ses_alpha, spec.ses_beta, n)
    ins_w = np.array(list(spec.insurance_weights.values()))
    insurance = g.choice(len(INSURANCE_CATEGORIES), size=n, p=ins_w / ins_w.sum())
    diabetic = g.random(n) < spec.diabetes_prevalence
    # individual frailty scales the daily prompt hazards; mean 1
    frailty = g.gamma(4.0, 0.25, size=(n, 2))
    due_day = g.integers(0, DAYS_PER_YEAR, n)

    patients = []
    for i in range(n):
        patients.append(PatientProfile(
            id=i,
            age=int(ages[i]),
            sex="F" if female[i] else "M",
            race_ethnicity=MINORITY_GROUPS[group[i]] if minority[i] else "white",
            ses_index=float(ses[i]),
            insurance=INSURANCE_CATEGORIES[insurance[i]],
            has_diabetes=bool(diabetic[i]),
            symptom_propensity={"sick": float(frailty[i, 0]),
                                "diabetes_symptoms": float(frailty[i, 1])},
            wellness_due=int(due_day[i]) * MINUTES_PER_DAY,
        ))
    return patients


@dataclass
class ClinicianProfile:
    id: int
    shift_start: int = 8 * 60
    shift_end: int = 16 * 60
    working_days: tuple = (0, 1, 2, 3, 4)
    slot_length: int = 15
    training_count: int = 0
    order_multiplier: dict = field(default_factory=lambda: dict.fromkeys(MEASURES, 1.0))

    def __post_init__(self):
        if self.shift_end <= self.shift_start:
            raise InvalidSpec(f"clinician {self.id}: shift end must follow start")
        if self.slot_length <= 0 or self.slot_length > self.shift_end - self.shift_start:
            raise InvalidSpec(f"clinician {self.id}: bad slot length {self.slot_length}")
        if not self.working_days:
            raise InvalidSpec(f"clinician {self.id}: no working days")

    def next_slot(self, t: SimTime) -> SimTime:
        """Earliest slot start >= t inside this clinician's shift."""
        day, minute = divmod(t, MINUTES_PER_DAY)
        last_start = self.shift_end - self.slot_length
        while True:
            if day % 7 in self.working_days:
                if minute <= self.shift_start:
                    return day * MINUTES_PER_DAY + self.shift_start
                offset = -(-(minute - self.shift_start) // self.slot_length) * self.slot_length
                start = self.shift_start + offset
                if start <= last_start:
                    return day * MINUTES_PER_DAY + start
            day += 1
            minute = 0


class AppointmentBook:
    """One clinician's appointment book.

    Requests are handled in arrival order; each takes the earliest free slot at
    or after its request time.  Without cancellations this keeps grant times
    nondecreasing in arrival order.
    """

    def __init__(self, clinician: ClinicianProfile):
        self.clinician = clinician
        self.booked: dict[SimTime, int] = {}

    def earliest_free(self, at: SimTime) -> SimTime:
        c = self.clinician
        slot = c.next_slot(at)
        while slot in self.booked:
            slot = c.next_slot(slot + c.slot_length)
        return slot

    def book(self, start: SimTime, patient_id: int) -> None:
        if start in self.booked:
            raise ValueError(f"slot {start} already booked")
        self.booked[start] = patient_id

    def __len__(self) -> int:
        return len(self.booked)


@dataclass
class FacilityConfig:
    n_clinicians: int = 5
    slot_length: int = 15
    shift_start: int = 8 * 60
    shift_hours: int = 8
    working_days: tuple = (0, 1, 2, 3, 4)
    hours_variant: str = "standard"
    assignment: str = "round_robin"

    def clinician_shifts(self) -> list[tuple[int, int]]:
        start = self.shift_start
        end = start + self.shift_hours * 60
        if self.hours_variant == "standard":
            return [(start, end)] * self.n_clinicians
        if self.hours_variant == "extended_staggered":
            # two extra hours per shift, starts staggered an hour apart
            stagger = (-60, 0, 60)
            length = (self.shift_hours + 2) * 60
            shifts = []
            for j in range(self.n_clinicians):
                s = start + stagger[j % len(stagger)]
                shifts.append((s, min(s + length, MINUTES_PER_DAY)))
            return shifts
        raise InvalidSpec(f"unknown hours variant {self.hours_variant!r}")


@dataclass
class FacilityProfile:
    cluster_id: int
    clinicians: list
    hours: tuple
    books: dict
    panels: dict
    registry_enabled: bool = True

    def clinician(self, cid: int) -> ClinicianProfile:
        return self.clinicians[cid]


def build_facility(spec: ClusterSpec, config: FacilityConfig,
                   patients: list[PatientProfile], stream: Optional[RngStream] = None
                   ) -> FacilityProfile:
    if config.n_clinicians < 1:
        raise NoClinicians("a facility needs at least one clinician")
    clinicians = [ClinicianProfile(id=j, shift_start=s, shift_end=e,
                                   working_days=tuple(config.working_days),
                                   slot_length=config.slot_length)
                  for j, (s, e) in enumerate(config.clinician_shifts())]
    panels: dict[int, list[int]] = {c.id: [] for c in clinicians}
    if config.assignment == "round_robin":
        owners = [i % len(clinicians) for i in range(len(patients))]
    elif config.assignment == "random":
        if stream is None:
            raise ValueError("random assignment needs a stream")
        owners = [int(x) for x in stream.generator.integers(0, len(clinicians), len(patients))]
    else:
        raise InvalidSpec(f"unknown assignment policy {config.assignment!r}")
    for patient, owner in zip(patients, owners):
        patient.assigned_clinician = owner
        panels[owner].append(patient.id)
    hours = (min(c.shift_start for c in clinicians), max(c.shift_end for c in clinicians))
    books = {c.id: AppointmentBook(c) for c in clinicians}
    return FacilityProfile(cluster_id=spec.cluster_id, clinicians=clinicians, hours=hours,
                           books=books, panels=panels)


def with_multiplier(clinician: ClinicianProfile, multiplier: dict, k: int) -> ClinicianProfile:
    return replace(clinician, training_count=k, order_multiplier=dict(multiplier))
