import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fqhcsim.intervention import ScenarioConfig, realize_scenario
from fqhcsim.kernel import MINUTES_PER_DAY, derive_stream
from fqhcsim.pathway import (EVENT_KINDS, Appointment, Balk, CareOrder, MissingPdf,
                             PathwaySettings, PdfSpec, PdfTable, complete_test,
                             daily_entry_prompts, doctor_visit, placeholder_event_outcome,
                             prompt_schedule, request_appointment, simulate)
from fqhcsim.population import (ClinicianProfile, FacilityConfig, PatientProfile,
                                build_facility, builtin_cluster_specs)

DAY = MINUTES_PER_DAY
CLUSTER3 = builtin_cluster_specs()[2]


def patient(pid=0, diabetic=True, insurance="continuous", age=50, due=400 * DAY, **kw):
    return PatientProfile(id=pid, age=age, sex="F", race_ethnicity="white", ses_index=0.5,
                          insurance=insurance, has_diabetes=diabetic,
                          symptom_propensity={"sick": 1.0, "diabetes_symptoms": 1.0},
                          wellness_due=due, **kw)


def table(**overrides):
    return PdfTable.default().with_overrides(
        {k.replace("__", "."): v for k, v in overrides.items()})


def facility(patients, n_clinicians=1, **kw):
    return build_facility(CLUSTER3, FacilityConfig(n_clinicians=n_clinicians, **kw), patients)


# -- PDF table -------------------------------------------------------------------

def test_event_inventory():
    assert len(EVENT_KINDS) == 20 and len(set(EVENT_KINDS)) == 20


def test_pdf_table_round_trip_and_overrides(tmp_path):
    t = PdfTable.default()
    assert PdfTable.from_dict(t.to_dict()) == t
    t2 = t.with_overrides({"order.LDL": {"p": 0.5}})
    assert t2["order.LDL"].p == 0.5
    assert t2["order.LDL"].modifiers == t["order.LDL"].modifiers
    (tmp_path / "pdf.yaml").write_text("order.HbA1c:\n  p: 0.7\n")
    assert PdfTable.load(tmp_path / "pdf.yaml")["order.HbA1c"].p == 0.7


def test_missing_pdf():
    t = PdfTable({k: v for k, v in PdfTable.default().specs.items() if k != "prompt.sick"})
    with pytest.raises(MissingPdf):
        t.check_complete()
    with pytest.raises(MissingPdf):
        daily_entry_prompts(patient(), 0, t, derive_stream(1, "p"))


def test_pdf_spec_validation():
    from fqhcsim.population import InvalidSpec
    for bad in ({"kind": "bernoulli", "p": 1.5}, {"kind": "uniform", "lo": 2, "hi": 1},
                {"kind": "categorical", "weights": {"a": -1}}, {"kind": "gamma"}):
        with pytest.raises(InvalidSpec):
            PdfSpec.from_dict(bad)


# -- placeholder events ----------------------------------------------------------------

def test_placeholder_degenerate_uniform():
    spec = PdfSpec("uniform", lo=0.4, hi=0.4)
    s = derive_stream(1, "ph")
    assert all(placeholder_event_outcome(spec, patient(), s) == 0.4 for _ in range(100))


def test_placeholder_uniform_mean():
    spec = PdfSpec("uniform", lo=0.0, hi=1.0)
    s = derive_stream(2, "ph")
    draws = [placeholder_event_outcome(spec, patient(), s) for _ in range(100_000)]
    assert abs(np.mean(draws) - 0.5) < 0.005


def test_placeholder_modifier_clamped():
    spec = PdfSpec.from_dict({"kind": "bernoulli", "p": 0.2, "modifiers": [
        {"attribute": "age", "op": "ge", "value": 0, "effect": "mul", "amount": 10}]})
    assert spec.probability(patient()) == 1.0
    s = derive_stream(3, "ph")
    assert all(placeholder_event_outcome(spec, patient(), s) for _ in range(1000))


def test_placeholder_categorical():
    spec = PdfSpec.from_dict({"kind": "categorical", "weights": {"a": 1, "b": 1},
                              "modifiers": [{"attribute": "insurance", "op": "eq",
                                             "value": "uninsured", "effect": "mul",
                                             "amount": 0, "target": "a"}]})
    s = derive_stream(4, "ph")
    assert {placeholder_event_outcome(spec, patient(insurance="uninsured"), s)
            for _ in range(200)} == {"b"}
    assert {placeholder_event_outcome(spec, patient(), s) for _ in range(200)} == {"a", "b"}


# -- entry prompts --------------------------------------------------------------------

def test_non_diabetic_never_gets_symptom_prompt():
    t = table(prompt__diabetes_symptoms={"p": 1.0, "modifiers": []})
    s = derive_stream(1, "p")
    p = patient(diabetic=False)
    kinds = {r.kind for d in range(365) for r in daily_entry_prompts(p, d, t, s)}
    assert "prompt_diabetes_symptoms" not in kinds
    kinds = {r.kind for d in range(5) for r in daily_entry_prompts(patient(), d, t, s)}
    assert "prompt_diabetes_symptoms" in kinds


def test_zero_sick_hazard():
    t = table(prompt__sick={"p": 0.0})
    s = derive_stream(1, "p")
    p = patient(age=80, insurance="uninsured")
    assert not any(r.kind == "prompt_sick" for d in range(365)
                   for r in daily_entry_prompts(p, d, t, s))
    pats = [patient(i) for i in range(50)]
    assert all(len(sick) == 0 for sick, _ in prompt_schedule(pats, 365, t, s))


def test_wellness_prompt_fires_when_due():
    p = patient(due=10 * DAY)
    s = derive_stream(1, "p")
    t = table(prompt__sick={"p": 0.0}, prompt__diabetes_symptoms={"p": 0.0})
    assert daily_entry_prompts(p, 9, t, s) == []
    assert [r.kind for r in daily_entry_prompts(p, 10, t, s)] == ["prompt_wellness"]
    assert daily_entry_prompts(p, 11, t, s, wellness_pending=True) == []


def test_prompt_count_binomial():
    h, days, n = 0.01, 365, 10_000
    t = table(prompt__sick={"p": h, "modifiers": []})
    pats = [patient(i) for i in range(n)]
    sched = prompt_schedule(pats, days, t, derive_stream(11, "prompts"))
    count = sum(len(sick) for sick, _ in sched)
    trials = days * n
    assert abs(count - trials * h) <= 3 * math.sqrt(trials * h * (1 - h))


def test_prompt_schedule_matches_daily_draws():
    t = table(prompt__sick={"p": 0.05}, prompt__diabetes_symptoms={"p": 0.05})
    p = patient(due=10**9)
    (sick, sym), = prompt_schedule([p], 200, t, derive_stream(5, "s"))
    daily = derive_stream(5, "s")
    fired = [(d, r.kind) for d in range(200) for r in daily_entry_prompts(p, d, t, daily)]
    assert [d for d, k in fired if k == "prompt_sick"] == sick.tolist()
    assert [d for d, k in fired if k == "prompt_diabetes_symptoms"] == sym.tolist()


# -- scheduling -------------------------------------------------------------------------

def test_empty_book_same_or_next_day():
    p = patient()
    fac = facility([p])
    cfg = PathwaySettings()
    monday_9am = 7 * DAY + 9 * 60
    appt = request_appointment(p, "sick_visit", monday_9am, fac, cfg)
    assert isinstance(appt, Appointment) and appt.slot_start == monday_9am
    monday_late = 7 * DAY + 15 * 60 + 50
    appt = request_appointment(p, "sick_visit", monday_late, fac, cfg)
    assert appt.slot_start == 8 * DAY + 8 * 60


def test_saturated_book_balks():
    p = patient()
    fac = facility([p])
    book = fac.books[0]
    t = 0
    while t < 45 * DAY:
        slot = book.earliest_free(t)
        book.book(slot, 99)
        t = slot
    result = request_appointment(p, "wellness_check", 0, fac, PathwaySettings())
    assert isinstance(result, Balk)
    assert result.earliest_slot - result.requested_at > 30 * DAY


def naive_slot(booked, at, clinician, window):
    """Scan minute by minute for the first free, aligned, in-shift start."""
    m = at
    while True:
        day, minute = divmod(m, DAY)
        if (day % 7 in clinician.working_days
                and clinician.shift_start <= minute <= clinician.shift_end - clinician.slot_length
                and (minute - clinician.shift_start) % clinician.slot_length == 0
                and m not in booked):
            return m if m - at <= window * DAY else None
        m += 1


@pytest.mark.parametrize("seed", range(3))
def test_request_stream_matches_naive_scan(seed):
    rng = np.random.default_rng(seed)
    pats = [patient(i) for i in range(40)]
    fac = facility(pats, n_clinicians=2, slot_length=20)
    cfg = PathwaySettings(acceptance_window_days=5)
    booked = {0: set(), 1: set()}
    t = 0
    for _ in range(600):
        t += int(rng.integers(0, 90))
        p = pats[int(rng.integers(0, 40))]
        clin = fac.clinicians[p.assigned_clinician]
        expected = naive_slot(booked[clin.id], t, clin, 5)
        got = request_appointment(p, "sick_visit", t, fac, cfg)
        if expected is None:
            assert isinstance(got, Balk)
        else:
            assert got.slot_start == expected
            booked[clin.id].add(expected)


# -- visits and tests -------------------------------------------------------------------------

def test_zero_order_probability_never_orders():
    t = table(**{f"order__{m}": {"p": 0.0} for m in ("HbA1c", "LDL", "EyeExam", "Nephropathy")})
    c = ClinicianProfile(0)
    s = derive_stream(1, "v")
    assert not any(doctor_visit(patient(), c, 0, t, s) for _ in range(1000))


def test_certain_order_probability_always_orders():
    t = table(**{f"order__{m}": {"p": 1.0} for m in ("HbA1c", "LDL", "EyeExam", "Nephropathy")})
    c = ClinicianProfile(0, order_multiplier=dict.fromkeys(
        ("HbA1c", "LDL", "EyeExam", "Nephropathy"), 2.3))
    s = derive_stream(1, "v")
    assert all(len(doctor_visit(patient(), c, 0, t, s)) == 4 for _ in range(1000))


def test_order_rate_with_multiplier():
    t = table(order__LDL={"p": 0.5, "modifiers": []})
    c = ClinicianProfile(0, order_multiplier={"HbA1c": 1.28, "LDL": 1.28, "EyeExam": 1.28,
                                              "Nephropathy": 1.28})
    s = derive_stream(2, "v")
    n = 100_000
    hits = sum(any(o.measure == "LDL" for o in doctor_visit(patient(), c, 0, t, s))
               for _ in range(n))
    assert abs(hits / n - 0.64) <= 0.005


def test_non_diabetic_visit_orders_nothing_and_wellness_resets():
    t = table(**{f"order__{m}": {"p": 1.0} for m in ("HbA1c", "LDL", "EyeExam", "Nephropathy")})
    p = patient(diabetic=False, due=3 * DAY)
    assert doctor_visit(p, ClinicianProfile(0), 3 * DAY + 600, t, derive_stream(1, "v")) == []
    assert p.wellness_due == 368 * DAY


def test_satisfied_measure_not_reordered():
    t = table(**{f"order__{m}": {"p": 1.0} for m in ("HbA1c", "LDL", "EyeExam", "Nephropathy")})
    p = patient()
    p.screening_history["LDL"] = 100
    orders = doctor_visit(p, ClinicianProfile(0), 200, t, derive_stream(1, "v"))
    assert sorted(o.measure for o in orders) == ["EyeExam", "HbA1c", "Nephropathy"]


def test_sick_visit_orders_are_configurable():
    t = table(**{f"order__{m}": {"p": 1.0} for m in ("HbA1c", "LDL", "EyeExam", "Nephropathy")})
    s = derive_stream(1, "v")
    assert len(doctor_visit(patient(), ClinicianProfile(0), 0, t, s, "sick_visit")) == 4
    assert doctor_visit(patient(), ClinicianProfile(0), 0, t, s, "sick_visit",
                        orders_on_sick_visits=False) == []


def test_complete_certain_and_immediate():
    t = table(complete__HbA1c={"p": 1.0, "modifiers": []},
              delay__HbA1c={"kind": "uniform", "lo": 0, "hi": 0})
    done = complete_test(CareOrder(0, "HbA1c", 5000), t, derive_stream(1, "c"))
    assert done.completed and done.completed_at == 5000


def test_complete_never():
    t = table(complete__LDL={"p": 0.0})
    s = derive_stream(1, "c")
    assert not any(complete_test(CareOrder(0, "LDL", 0), t, s).completed for _ in range(1000))


def test_completion_delay_support():
    t = table(complete__EyeExam={"p": 1.0, "modifiers": []},
              delay__EyeExam={"kind": "uniform", "lo": 1, "hi": 14})
    s = derive_stream(1, "c")
    for _ in range(5000):
        done = complete_test(CareOrder(0, "EyeExam", 777), t, s)
        assert DAY <= done.completed_at - done.ordered_at <= 14 * DAY


def test_complete_rejects_completed_order():
    with pytest.raises(ValueError):
        complete_test(CareOrder(0, "LDL", 0, True, 0), PdfTable.default(), derive_stream(1, "c"))


# -- whole runs --------------------------------------------------------------------------

def realize(k=0, seed=20110101, n=300, warmup_days=30, **kw):
    cfg = ScenarioConfig(arm="baseline" if k == 0 else "pilot", trainings_k=k,
                         population_size=n, warmup_days=warmup_days, master_seed=seed, **kw)
    return realize_scenario(cfg, CLUSTER3, 0)


def test_warmup_zero_books_nothing():
    state = realize(warmup_days=0)
    assert state.warmup_log == []
    assert all(len(b) == 0 for b in state.facility.books.values())
    assert len(state.calendar) == 0


def test_default_warmup_prebooks_early_wellness():
    state = realize()
    due_early = {p.id for p in state.patients if p.wellness_due < 30 * DAY}
    assert {int(r.subject[8:]) for r in state.warmup_log} == due_early
    assert all(0 <= p.wellness_due < 365 * DAY for p in state.patients)
    assert all(r.kind == "warmup_booking" for r in state.warmup_log)


@pytest.fixture(scope="module", params=[0, 30])
def run(request):
    state = realize(warmup_days=request.param, seed=7)
    due = {p.id: p.wellness_due for p in state.patients}
    booked = list(state.warmup_log)
    outcome = simulate(state)
    return state, outcome, due, booked


def test_trace_inside_measured_year(run):
    _, outcome, _, _ = run
    times = [r.time for r in outcome.trace]
    assert times == sorted(times)
    assert min(times) >= 0 and max(times) < 365 * DAY
    assert not any(r.kind == "warmup_booking" for r in outcome.trace)
    assert len({r.id for r in outcome.trace}) == len(outcome.trace)


def test_no_double_booking(run):
    state, outcome, _, _ = run
    by_clinician = {}
    for appt in outcome.appointments:
        by_clinician.setdefault(appt.clinician, []).append(appt)
    for cid, appts in by_clinician.items():
        c = state.facility.clinicians[cid]
        starts = sorted(a.slot_start for a in appts)
        assert all(b - a >= c.slot_length for a, b in zip(starts, starts[1:]))
        for s in starts:
            day, minute = divmod(s, DAY)
            assert day % 7 in c.working_days
            assert c.shift_start <= minute and minute + c.slot_length <= c.shift_end
    for book in state.facility.books.values():
        starts = sorted(book.booked)
        assert all(b - a >= book.clinician.slot_length for a, b in zip(starts, starts[1:]))


def test_orders_and_tests_only_for_diabetics(run):
    state, outcome, _, _ = run
    diabetic = {f"patient:{p.id}" for p in state.patients if p.has_diabetes}
    cqm_kinds = {k for k in EVENT_KINDS if k.startswith(("order_", "complete_"))}
    assert all(r.subject in diabetic for r in outcome.trace if r.kind in cqm_kinds)
    assert all(r.subject in diabetic for r in outcome.trace
               if r.kind == "prompt_diabetes_symptoms")
    for o in outcome.orders:
        if o.completed:
            assert o.completed_at >= o.ordered_at


def test_registry_recall_never_drops_a_due_patient(run):
    _, outcome, due, booked = run
    prebooked = {int(r.subject[8:]) for r in booked}
    handled = {int(r.subject[8:]) for r in outcome.trace
               if r.kind in ("appointment_request", "balk", "recall")
               and r.payload.get("reason") == "wellness_check"}
    for pid, when in due.items():
        if when < 365 * DAY - 7 * 60 and pid not in prebooked:
            assert pid in handled, pid


def test_every_appointment_resolves(run):
    _, outcome, _, _ = run
    grants = sum(1 for r in outcome.trace if r.kind == "queue_grant")
    resolved_in_year = sum(1 for r in outcome.trace if r.kind in ("doctor_visit", "no_show"))
    attendance = sum(1 for r in outcome.trace if r.kind == "attendance")
    assert attendance == resolved_in_year
    assert grants <= attendance + sum(1 for a in outcome.appointments
                                      if a.slot_start >= 365 * DAY)


def test_same_seed_same_trace():
    from fqhcsim.kernel import serialize_trace
    a = serialize_trace(simulate(realize(seed=3, n=150)).trace)
    b = serialize_trace(simulate(realize(seed=3, n=150)).trace)
    assert a == b


@given(st.integers(1, 5), st.integers(0, 10**6))
def test_paired_pilot_dominates_baseline_per_patient(k, seed):
    def satisfied(state):
        outcome = simulate(state)
        return {(r.subject, r.kind) for r in outcome.trace if r.kind.startswith("complete_")}

    base = satisfied(realize(0, seed=seed, n=60))
    pilot = satisfied(realize(k, seed=seed, n=60))
    assert base <= pilot
