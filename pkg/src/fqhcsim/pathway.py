"""Care-pathway event library and the per-run simulation driver.

An episode of care starts with an entry prompt (wellness recall, getting sick,
diabetes symptoms), goes through the assigned clinician's appointment book and
ends with a visit that may order the four diabetes screenings.
"""
from __future__ import annotations

import operator
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Union

import numpy as np
import yaml

from .kernel import (MINUTES_PER_DAY, EventCalendar, EventRecord, RngStream, SimTime,
                     derive_stream, run_until)
from .population import (MEASURES, ClinicianProfile, FacilityProfile, InvalidSpec,
                         PatientProfile)

REASONS = ("wellness_check", "sick_visit", "diabetes_symptoms", "recurring_followup")

PROMPT_KINDS = ("prompt_wellness", "prompt_sick", "prompt_diabetes_symptoms")
ORDER_KINDS = {m: f"order_{m.lower()}" for m in MEASURES}
COMPLETE_KINDS = {m: f"complete_{m.lower()}" for m in MEASURES}
EVENT_KINDS = (PROMPT_KINDS
               + ("appointment_request", "queue_grant", "balk", "attendance", "no_show",
                  "doctor_visit")
               + tuple(ORDER_KINDS.values()) + tuple(COMPLETE_KINDS.values())
               + ("wellness_reset", "recall", "warmup_booking"))


class MissingPdf(KeyError):
    pass


def clamp01(x: float) -> float:
    return 0.0 if x < 0.0 else 1.0 if x > 1.0 else x


_OPS = {"eq": operator.eq, "ne": operator.ne, "lt": operator.lt, "le": operator.le,
        "gt": operator.gt, "ge": operator.ge, "in": lambda a, b: a in b}


@dataclass(frozen=True)
class Modifier:
    """``attribute <op> value`` selects patients; ``effect`` adjusts the PDF.

    ``mul`` multiplies and ``add`` shifts the probability (bernoulli), both
    bounds (uniform) or the weight of ``target`` (categorical).
    """
    attribute: str
    op: str
    value: Any
    effect: str
    amount: float
    target: Optional[str] = None

    def applies(self, patient) -> bool:
        return _OPS[self.op](getattr(patient, self.attribute), self.value)

    def adjust(self, x: float) -> float:
        return x * self.amount if self.effect == "mul" else x + self.amount


@dataclass(frozen=True)
class PdfSpec:
    kind: str
    p: Optional[float] = None
    lo: Optional[float] = None
    hi: Optional[float] = None
    weights: Optional[tuple] = None
    modifiers: tuple = ()

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.kind == "bernoulli":
            if self.p is None or not 0.0 <= self.p <= 1.0:
                raise InvalidSpec(f"bernoulli needs p in [0, 1], got {self.p}")
        elif self.kind == "uniform":
            if self.lo is None or self.hi is None or self.lo > self.hi:
                raise InvalidSpec(f"uniform needs lo <= hi, got ({self.lo}, {self.hi})")
        elif self.kind == "categorical":
            if not self.weights:
                raise InvalidSpec("categorical needs weights")
            w = [v for _, v in self.weights]
            if any(v < 0 for v in w) or sum(w) <= 0:
                raise InvalidSpec(f"categorical weights must be non-negative with a "
                                  f"positive sum, got {w}")
        else:
            raise InvalidSpec(f"unknown pdf kind {self.kind!r}")
        for m in self.modifiers:
            if m.op not in _OPS or m.effect not in ("mul", "add"):
                raise InvalidSpec(f"bad modifier {m}")

    def _active(self, patient):
        if patient is None:
            return ()
        return [m for m in self.modifiers if m.applies(patient)]

    def probability(self, patient=None) -> float:
        if self.kind != "bernoulli":
            raise InvalidSpec(f"{self.kind} spec has no probability")
        p = self.p
        for m in self._active(patient):
            p = m.adjust(p)
        return clamp01(p)

    def bounds(self, patient=None) -> tuple[float, float]:
        if self.kind != "uniform":
            raise InvalidSpec(f"{self.kind} spec has no bounds")
        lo, hi = self.lo, self.hi
        for m in self._active(patient):
            lo, hi = m.adjust(lo), m.adjust(hi)
        return (min(lo, hi), max(lo, hi))

    def category_weights(self, patient=None) -> dict[str, float]:
        if self.kind != "categorical":
            raise InvalidSpec(f"{self.kind} spec has no categories")
        w = dict(self.weights)
        for m in self._active(patient):
            if m.target in w:
                w[m.target] = max(0.0, m.adjust(w[m.target]))
        if sum(w.values()) <= 0:
            raise InvalidSpec("modifiers zeroed every category weight")
        return w

    @classmethod
    def from_dict(cls, data: Mapping) -> "PdfSpec":
        data = dict(data)
        mods = tuple(Modifier(**m) for m in data.pop("modifiers", ()) or ())
        weights = data.pop("weights", None)
        if isinstance(weights, Mapping):
            weights = tuple((str(k), float(v)) for k, v in weights.items())
        unknown = set(data) - {"kind", "p", "lo", "hi"}
        if unknown:
            raise InvalidSpec(f"unknown pdf field(s) {sorted(unknown)}")
        return cls(weights=weights, modifiers=mods, **data)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"kind": self.kind}
        if self.kind == "bernoulli":
            out["p"] = self.p
        elif self.kind == "uniform":
            out["lo"], out["hi"] = self.lo, self.hi
        else:
            out["weights"] = dict(self.weights)
        if self.modifiers:
            out["modifiers"] = [{k: v for k, v in vars(m).items() if v is not None}
                                for m in self.modifiers]
        return out


def placeholder_event_outcome(spec: PdfSpec, patient, stream: RngStream):
    """Draw the outcome of an event that only has a placeholder PDF."""
    if spec.kind == "bernoulli":
        return stream.uniform() < spec.probability(patient)
    if spec.kind == "uniform":
        lo, hi = spec.bounds(patient)
        return lo + (hi - lo) * stream.uniform()
    if spec.kind == "categorical":
        w = spec.category_weights(patient)
        names = list(w)
        return names[stream.categorical([w[n] for n in names])]
    raise InvalidSpec(f"unknown pdf kind {spec.kind!r}")


# Calibrated so the pilot-minus-baseline effect for eye exams and nephropathy
# testing lands inside the first-year pilot intervals at one or two trainings;
# see README "Calibration".
DEFAULT_PDFS: dict[str, dict] = {
    "prompt.sick": {"kind": "bernoulli", "p": 0.008, "modifiers": [
        {"attribute": "age", "op": "ge", "value": 65, "effect": "mul", "amount": 1.4},
        {"attribute": "ses_index", "op": "lt", "value": 0.3, "effect": "mul", "amount": 1.2},
        {"attribute": "insurance", "op": "eq", "value": "uninsured", "effect": "mul",
         "amount": 0.75}]},
    "prompt.diabetes_symptoms": {"kind": "bernoulli", "p": 0.004, "modifiers": [
        {"attribute": "ses_index", "op": "lt", "value": 0.3, "effect": "mul", "amount": 1.25}]},
    "attendance": {"kind": "bernoulli", "p": 0.9, "modifiers": [
        {"attribute": "insurance", "op": "eq", "value": "uninsured", "effect": "mul",
         "amount": 0.92}]},
    "order.HbA1c": {"kind": "bernoulli", "p": 0.30},
    "order.LDL": {"kind": "bernoulli", "p": 0.25},
    "order.EyeExam": {"kind": "bernoulli", "p": 0.0445},
    "order.Nephropathy": {"kind": "bernoulli", "p": 0.0345},
    "complete.HbA1c": {"kind": "bernoulli", "p": 0.95},
    "complete.LDL": {"kind": "bernoulli", "p": 0.92},
    "complete.EyeExam": {"kind": "bernoulli", "p": 0.55},
    "complete.Nephropathy": {"kind": "bernoulli", "p": 0.90},
    "delay.HbA1c": {"kind": "uniform", "lo": 0, "hi": 3},
    "delay.LDL": {"kind": "uniform", "lo": 0, "hi": 3},
    "delay.EyeExam": {"kind": "uniform", "lo": 7, "hi": 60},
    "delay.Nephropathy": {"kind": "uniform", "lo": 0, "hi": 7},
}
for _m in MEASURES:
    DEFAULT_PDFS[f"order.{_m}"]["modifiers"] = [
        {"attribute": "insurance", "op": "eq", "value": "intermittent", "effect": "mul",
         "amount": 0.9},
        {"attribute": "insurance", "op": "eq", "value": "uninsured", "effect": "mul",
         "amount": 0.8}]
    DEFAULT_PDFS[f"complete.{_m}"]["modifiers"] = [
        {"attribute": "insurance", "op": "eq", "value": "uninsured", "effect": "mul",
         "amount": 0.9}]

REQUIRED_PDFS = tuple(DEFAULT_PDFS)


class PdfTable:
    """Event kind -> :class:`PdfSpec`."""

    def __init__(self, specs: Mapping[str, PdfSpec]):
        self.specs = dict(specs)

    def __getitem__(self, key: str) -> PdfSpec:
        try:
            return self.specs[key]
        except KeyError:
            raise MissingPdf(key) from None

    def __contains__(self, key: str) -> bool:
        return key in self.specs

    def __eq__(self, other) -> bool:
        return isinstance(other, PdfTable) and self.specs == other.specs

    @classmethod
    def default(cls) -> "PdfTable":
        return cls.from_dict(DEFAULT_PDFS)

    @classmethod
    def from_dict(cls, data: Mapping) -> "PdfTable":
        return cls({k: PdfSpec.from_dict(v) for k, v in data.items()})

    @classmethod
    def load(cls, path) -> "PdfTable":
        """Load a table from YAML; entries override the defaults key by key."""
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        return cls.default().with_overrides(data)

    def with_overrides(self, overrides: Optional[Mapping]) -> "PdfTable":
        specs = dict(self.specs)
        for key, value in (overrides or {}).items():
            if isinstance(value, PdfSpec):
                specs[key] = value
            elif key in specs and "kind" not in value:
                merged = self.specs[key].to_dict()
                merged.update(value)
                specs[key] = PdfSpec.from_dict(merged)
            else:
                specs[key] = PdfSpec.from_dict(value)
        return PdfTable(specs)

    def to_dict(self) -> dict:
        return {k: self.specs[k].to_dict() for k in sorted(self.specs)}

    def check_complete(self) -> None:
        missing = [k for k in REQUIRED_PDFS if k not in self.specs]
        if missing:
            raise MissingPdf(", ".join(missing))


@dataclass
class Appointment:
    patient: int
    clinician: int
    slot_start: SimTime
    duration: int
    reason: str
    requested_at: SimTime = 0


@dataclass
class Balk:
    patient: int
    reason: str
    requested_at: SimTime
    earliest_slot: SimTime


@dataclass
class CareOrder:
    patient: int
    measure: str
    ordered_at: SimTime
    completed: bool = False
    completed_at: Optional[SimTime] = None


@dataclass
class PathwaySettings:
    horizon_days: int = 365
    warmup_days: int = 30
    acceptance_window_days: int = 30
    recall_retry_days: int = 30
    orders_on_sick_visits: bool = True
    prompt_minute: int = 7 * 60


def prompt_hazard(patient: PatientProfile, prompt: str, pdf_table: PdfTable) -> float:
    base = pdf_table[f"prompt.{prompt}"].probability(patient)
    return clamp01(base * patient.symptom_propensity[prompt])


def daily_entry_prompts(patient: PatientProfile, day: int, pdf_table: PdfTable,
                        stream: RngStream, wellness_pending: bool = False
                        ) -> list[EventRecord]:
    """Entry prompts for one patient on one day.

    Always consumes two uniforms (sick, symptoms) so the draw sequence does
    not depend on which prompts fire.
    """
    u_sick, u_sym = stream.uniforms(2)
    at = day * MINUTES_PER_DAY
    subject = f"patient:{patient.id}"
    out = []
    if not wellness_pending and at >= patient.wellness_due:
        out.append(EventRecord("prompt_wellness", subject, {"reason": "wellness_check"}, at))
    if u_sick < prompt_hazard(patient, "sick", pdf_table):
        out.append(EventRecord("prompt_sick", subject, {"reason": "sick_visit"}, at))
    if patient.has_diabetes and u_sym < prompt_hazard(patient, "diabetes_symptoms", pdf_table):
        out.append(EventRecord("prompt_diabetes_symptoms", subject,
                               {"reason": "diabetes_symptoms"}, at))
    return out


def prompt_schedule(patients: list[PatientProfile], n_days: int, pdf_table: PdfTable,
                    stream: RngStream) -> list[tuple[np.ndarray, np.ndarray]]:
    """Sick and symptom prompt days for every patient over ``n_days``.

    Vectorised form of :func:`daily_entry_prompts`: patient ``i`` uses row
    ``i`` of one (n, n_days, 2) uniform block, which for a single patient is
    exactly the day-by-day draw sequence.
    """
    n = len(patients)
    if n == 0:
        return []
    u = stream.uniforms((n, n_days, 2))
    h_sick = np.array([prompt_hazard(p, "sick", pdf_table) for p in patients])
    h_sym = np.array([prompt_hazard(p, "diabetes_symptoms", pdf_table) if p.has_diabetes
                      else -1.0 for p in patients])
    sick = u[:, :, 0] < h_sick[:, None]
    sym = u[:, :, 1] < h_sym[:, None]
    return [(np.flatnonzero(sick[i]), np.flatnonzero(sym[i])) for i in range(n)]


def request_appointment(patient: PatientProfile, reason: str, at: SimTime,
                        facility: FacilityProfile, config: PathwaySettings
                        ) -> Union[Appointment, Balk]:
    book = facility.books[patient.assigned_clinician]
    slot = book.earliest_free(at)
    if slot - at > config.acceptance_window_days * MINUTES_PER_DAY:
        return Balk(patient.id, reason, at, slot)
    book.book(slot, patient.id)
    return Appointment(patient.id, patient.assigned_clinician, slot,
                       book.clinician.slot_length, reason, at)


def order_probability(patient: PatientProfile, clinician: ClinicianProfile, measure: str,
                      pdf_table: PdfTable) -> float:
    base = pdf_table[f"order.{measure}"].probability(patient)
    return clamp01(base * clinician.order_multiplier[measure])


def measure_satisfied(patient: PatientProfile, measure: str, at: SimTime) -> bool:
    done = patient.screening_history[measure]
    return done is not None and done <= at


def doctor_visit(patient: PatientProfile, clinician: ClinicianProfile, at: SimTime,
                 pdf_table: PdfTable, stream: RngStream, reason: str = "wellness_check",
                 orders_on_sick_visits: bool = True) -> list[CareOrder]:
    """Screening orders placed during one visit.

    One uniform per measure is consumed whether or not the measure is
    eligible, keeping paired runs on the same draws.
    """
    u = stream.uniforms(len(MEASURES))
    orders = []
    eligible = patient.has_diabetes and (reason == "wellness_check" or orders_on_sick_visits)
    if eligible:
        for measure, draw in zip(MEASURES, u):
            if measure_satisfied(patient, measure, at):
                continue
            if draw < order_probability(patient, clinician, measure, pdf_table):
                orders.append(CareOrder(patient.id, measure, at))
    if reason == "wellness_check":
        day = at // MINUTES_PER_DAY
        patient.wellness_due = (day + 365) * MINUTES_PER_DAY
    return orders


def complete_test(order: CareOrder, pdf_table: PdfTable, stream: RngStream,
                  patient: Optional[PatientProfile] = None) -> CareOrder:
    """Resolve whether and when an order is performed; consumes two uniforms."""
    if order.completed:
        raise ValueError("order already completed")
    u_done, u_delay = stream.uniforms(2)
    if u_done >= pdf_table[f"complete.{order.measure}"].probability(patient):
        return order
    lo, hi = pdf_table[f"delay.{order.measure}"].bounds(patient)
    delay = int(round((lo + (hi - lo) * u_delay) * MINUTES_PER_DAY))
    return CareOrder(order.patient, order.measure, order.ordered_at, True,
                     order.ordered_at + delay)


VISIT_BLOCK = 256


class DrawBuffer:
    """Pre-drawn uniforms for one patient, topped up from an overflow stream.

    Offers the ``uniform``/``uniforms`` subset of :class:`RngStream`.
    """

    def __init__(self, block: np.ndarray, overflow):
        self._block = block
        self._pos = 0
        self._overflow = overflow
        self._stream: Optional[RngStream] = None

    def _take(self, n: int) -> np.ndarray:
        pos = self._pos
        if pos + n <= len(self._block):
            self._pos = pos + n
            return self._block[pos:pos + n]
        head = self._block[pos:]
        self._pos = len(self._block)
        if self._stream is None:
            self._stream = self._overflow()
        return np.concatenate([head, self._stream.uniforms(n - len(head))])

    def uniforms(self, size: int) -> np.ndarray:
        return self._take(size)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * float(self._take(1)[0])


@dataclass
class ClinicState:
    patients: list
    facility: FacilityProfile
    pdf_table: PdfTable
    settings: PathwaySettings
    master_seed: int
    label: str
    calendar: EventCalendar = field(default_factory=EventCalendar)
    wellness_pending: set = field(default_factory=set)
    warmup_log: list = field(default_factory=list)

    def patient_stream(self, pid: int, purpose: str) -> RngStream:
        return derive_stream(self.master_seed, f"{self.label}/patient{pid}/{purpose}")

    def stream(self, purpose: str) -> RngStream:
        return derive_stream(self.master_seed, f"{self.label}/{purpose}")


def warmup(state: ClinicState, warmup_days: int) -> ClinicState:
    """Pre-book the recurring wellness visits that fall due early in the year.

    Patients due within the first ``warmup_days`` booked their visit during the
    warm-up period, so their appointment already sits in the book at t=0.  The
    bookings go to ``state.warmup_log`` and never reach the measured trace.
    """
    if warmup_days < 0:
        raise ValueError("warmup_days must be non-negative")
    cutoff = warmup_days * MINUTES_PER_DAY
    due = sorted((p.wellness_due, p.id) for p in state.patients if p.wellness_due < cutoff)
    for when, pid in due:
        patient = state.patients[pid]
        book = state.facility.books[patient.assigned_clinician]
        slot = book.earliest_free(when)
        book.book(slot, pid)
        appt = Appointment(pid, patient.assigned_clinician, slot,
                           book.clinician.slot_length, "wellness_check", when)
        state.wellness_pending.add(pid)
        state.warmup_log.append(EventRecord("warmup_booking", f"patient:{pid}",
                                            {"slot": slot}, 0))
        state.calendar.push(slot, _attendance_record(appt))
    return state


def _attendance_record(appt: Appointment) -> EventRecord:
    return EventRecord("attendance", f"patient:{appt.patient}",
                       {"clinician": appt.clinician, "reason": appt.reason,
                        "requested_at": appt.requested_at}, appt.slot_start)


@dataclass
class RunOutcome:
    trace: list
    appointments: list
    orders: list
    balks: list


def _pid(record: EventRecord) -> int:
    return int(record.subject[8:])


def simulate(state: ClinicState) -> RunOutcome:
    """Run the measured year and return its trace.

    ``state`` must already have been through :func:`warmup`.
    """
    settings = state.settings
    table = state.pdf_table
    table.check_complete()
    patients = state.patients
    facility = state.facility
    horizon = settings.horizon_days * MINUTES_PER_DAY
    cal = state.calendar
    appointments: list[Appointment] = []
    orders: list[CareOrder] = []
    balks: list[Balk] = []
    # row i of one block belongs to patient i, so draws do not depend on the
    # order in which patients are seen
    block = state.stream("visits").uniforms((len(patients), VISIT_BLOCK))
    visit_draws = [DrawBuffer(block[i], lambda pid=i: state.patient_stream(pid, "visit"))
                   for i in range(len(patients))]

    def visit_stream(pid: int) -> DrawBuffer:
        return visit_draws[pid]

    def on_prompt(rec: EventRecord):
        return [EventRecord("appointment_request", rec.subject,
                            {"reason": rec.payload["reason"]}, rec.time)]

    def on_request(rec: EventRecord):
        pid = _pid(rec)
        reason = rec.payload["reason"]
        result = request_appointment(patients[pid], reason, rec.time, facility, settings)
        if isinstance(result, Balk):
            balks.append(result)
            out = [EventRecord("balk", rec.subject,
                               {"reason": reason, "earliest_slot": result.earliest_slot},
                               rec.time)]
            if reason == "wellness_check" and facility.registry_enabled:
                out.append(_recall(rec))
            return out
        appointments.append(result)
        return [EventRecord("queue_grant", rec.subject,
                            {"reason": reason, "slot": result.slot_start,
                             "clinician": result.clinician}, rec.time),
                _attendance_record(result)]

    def _recall(rec: EventRecord) -> EventRecord:
        return EventRecord("recall", rec.subject, {"reason": "wellness_check"},
                           rec.time + settings.recall_retry_days * MINUTES_PER_DAY)

    def on_attendance(rec: EventRecord):
        pid = _pid(rec)
        patient = patients[pid]
        if visit_stream(pid).uniform() < table["attendance"].probability(patient):
            return [EventRecord("doctor_visit", rec.subject, dict(rec.payload), rec.time)]
        out = [EventRecord("no_show", rec.subject, {"reason": rec.payload["reason"]},
                           rec.time)]
        if rec.payload["reason"] == "wellness_check" and facility.registry_enabled:
            out.append(_recall(rec))
        return out

    def on_visit(rec: EventRecord):
        pid = _pid(rec)
        patient = patients[pid]
        reason = rec.payload["reason"]
        clinician = facility.clinician(rec.payload["clinician"])
        stream = visit_stream(pid)
        placed = doctor_visit(patient, clinician, rec.time, table, stream, reason,
                              settings.orders_on_sick_visits)
        by_measure = {o.measure: o for o in placed}
        out = []
        for measure in MEASURES:
            order = by_measure.get(measure)
            if order is None:
                stream.uniforms(2)  # keep paired arms on the same draws
                continue
            done = complete_test(order, table, stream, patient)
            orders.append(done)
            out.append(EventRecord(ORDER_KINDS[measure], rec.subject,
                                   {"completed_at": done.completed_at}, rec.time))
        if reason == "wellness_check":
            state.wellness_pending.discard(pid)
            out.append(EventRecord("wellness_reset", rec.subject,
                                   {"wellness_due": patient.wellness_due}, rec.time))
        return out

    def on_order(rec: EventRecord):
        done_at = rec.payload["completed_at"]
        if done_at is None:
            return None
        measure = rec.kind[len("order_"):]
        return [EventRecord(f"complete_{measure}", rec.subject, {}, done_at)]

    def on_complete(rec: EventRecord):
        measure = _MEASURE_BY_COMPLETE[rec.kind]
        history = patients[_pid(rec)].screening_history
        if history[measure] is None:
            history[measure] = rec.time
        return None

    def on_wellness_reset(rec: EventRecord):
        due = rec.payload["wellness_due"]
        if due < horizon:
            return [EventRecord("prompt_wellness", rec.subject,
                                {"reason": "wellness_check"}, due + settings.prompt_minute)]
        return None

    def noop(rec: EventRecord):
        return None

    handlers = {kind: on_prompt for kind in PROMPT_KINDS}
    handlers.update({"appointment_request": on_request, "recall": on_request,
                     "queue_grant": noop, "balk": noop, "no_show": noop,
                     "attendance": on_attendance, "doctor_visit": on_visit,
                     "wellness_reset": on_wellness_reset})
    handlers.update({k: on_order for k in ORDER_KINDS.values()})
    handlers.update({k: on_complete for k in COMPLETE_KINDS.values()})

    schedule = prompt_schedule(patients, settings.horizon_days, table, state.stream("prompts"))
    offset = settings.prompt_minute
    initial = []
    for patient, (sick_days, sym_days) in zip(patients, schedule):
        subject = f"patient:{patient.id}"
        if patient.id not in state.wellness_pending and patient.wellness_due < horizon:
            state.wellness_pending.add(patient.id)
            initial.append((patient.wellness_due + offset, 0, EventRecord(
                "prompt_wellness", subject, {"reason": "wellness_check"})))
        for d in sick_days:
            initial.append((int(d) * MINUTES_PER_DAY + offset, 1, EventRecord(
                "prompt_sick", subject, {"reason": "sick_visit"})))
        for d in sym_days:
            initial.append((int(d) * MINUTES_PER_DAY + offset, 2, EventRecord(
                "prompt_diabetes_symptoms", subject, {"reason": "diabetes_symptoms"})))
    # prompts of one day are queued patient by patient, wellness/sick/symptom
    initial.sort(key=lambda item: (item[0], int(item[2].subject[8:]), item[1]))
    for time, _, record in initial:
        cal.push(time, record)

    trace = run_until(cal, handlers, horizon - 1)
    return RunOutcome(trace=trace, appointments=appointments, orders=orders, balks=balks)


_MEASURE_BY_COMPLETE = {v: m for m, v in COMPLETE_KINDS.items()}
