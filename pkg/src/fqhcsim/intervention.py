"""Baseline and pilot scenario arms.

The pilot arm sends every clinician to ``k`` trainings.  Each training adds an
independent draw from the meta-analytic effect range to the clinician's
screening-order multiplier, so the effect grows linearly in ``k``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

from .kernel import RngStream, derive_stream
from .pathway import ClinicState, PathwaySettings, PdfTable, warmup
from .population import (MEASURES, ClinicianProfile, ClusterSpec, FacilityConfig,
                         build_facility, generate_population)

ARMS = ("baseline", "pilot")
HOURS_VARIANTS = ("standard", "extended_staggered")


class NegativeTrainings(ValueError):
    pass


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class TrainingEffectParams:
    mean_pp: float = 14.0
    ci_low_pp: float = 0.68
    ci_high_pp: float = 26.44
    draw_rule: str = "uniform"

    def __post_init__(self):
        if not self.ci_low_pp <= self.mean_pp <= self.ci_high_pp:
            raise ScenarioError("training effect needs ci_low <= mean <= ci_high")
        if self.draw_rule not in ("uniform", "triangular"):
            raise ScenarioError(f"unknown draw rule {self.draw_rule!r}")

    @property
    def expected_fraction(self) -> float:
        if self.draw_rule == "uniform":
            return (self.ci_low_pp + self.ci_high_pp) / 200.0
        return (self.ci_low_pp + self.mean_pp + self.ci_high_pp) / 300.0


def draw_training_effect(params: TrainingEffectParams, stream: RngStream) -> float:
    """One training's gain as a fraction (14 pp -> 0.14)."""
    lo, hi = params.ci_low_pp / 100.0, params.ci_high_pp / 100.0
    u = stream.uniform()
    if params.draw_rule == "uniform" or lo == hi:
        return lo + (hi - lo) * u
    # inverse CDF of the triangular distribution peaked at the mean
    mode = params.mean_pp / 100.0
    cut = (mode - lo) / (hi - lo)
    if u < cut:
        return lo + ((hi - lo) * (mode - lo) * u) ** 0.5
    return hi - ((hi - lo) * (hi - mode) * (1.0 - u)) ** 0.5


def apply_trainings(clinician: ClinicianProfile, k: int, params: TrainingEffectParams,
                    stream: RngStream, measures=MEASURES) -> ClinicianProfile:
    """Return ``clinician`` with multiplier ``1 + e_1 + ... + e_k`` on ``measures``.

    Draws are taken in training order, so the first ``k`` gains are shared by
    every dose that uses the same stream.
    """
    if k < 0:
        raise NegativeTrainings(f"trainings must be >= 0, got {k}")
    gain = sum(draw_training_effect(params, stream) for _ in range(k))
    multiplier = dict(clinician.order_multiplier)
    for m in measures:
        multiplier[m] = 1.0 + gain
    return replace(clinician, training_count=k, order_multiplier=multiplier)


@dataclass
class ScenarioConfig:
    arm: str = "baseline"
    trainings_k: int = 0
    hours_variant: str = "standard"
    pdf_overrides: dict = field(default_factory=dict)
    population_size: int = 2000
    warmup_days: int = 30
    horizon_days: int = 365
    master_seed: int = 20110101
    paired: bool = True
    n_clinicians: int = 5
    slot_length: int = 15
    acceptance_window_days: int = 30
    recall_retry_days: int = 30
    orders_on_sick_visits: bool = True
    training: TrainingEffectParams = field(default_factory=TrainingEffectParams)

    def __post_init__(self):
        if self.arm not in ARMS:
            raise ScenarioError(f"arm must be one of {ARMS}, got {self.arm!r}")
        if self.arm == "baseline" and self.trainings_k != 0:
            raise ScenarioError("the baseline arm has no trainings")
        if self.arm == "pilot" and not 1 <= self.trainings_k <= 5:
            raise ScenarioError(f"pilot trainings must be in 1..5, got {self.trainings_k}")
        if self.hours_variant not in HOURS_VARIANTS:
            raise ScenarioError(f"hours_variant must be one of {HOURS_VARIANTS}, "
                                f"got {self.hours_variant!r}")
        if self.population_size < 0 or self.warmup_days < 0 or self.horizon_days < 1:
            raise ScenarioError("population size, warm-up and horizon must be positive")

    @property
    def name(self) -> str:
        return "baseline" if self.arm == "baseline" else f"pilot_k{self.trainings_k}"

    def pdf_table(self) -> PdfTable:
        return PdfTable.default().with_overrides(self.pdf_overrides)


def run_label(config: ScenarioConfig, cluster_id: int, run_index: int) -> str:
    """Stream prefix of one run.  Paired arms share it; unpaired arms do not."""
    if config.paired:
        return f"c{cluster_id}/run{run_index}"
    return f"c{cluster_id}/{config.name}/run{run_index}"


def realize_scenario(config: ScenarioConfig, cluster: ClusterSpec, run_index: int,
                     pdf_table: Optional[PdfTable] = None) -> ClinicState:
    label = run_label(config, cluster.cluster_id, run_index)
    seed = config.master_seed
    table = pdf_table if pdf_table is not None else config.pdf_table()
    table.check_complete()
    patients = generate_population(cluster, config.population_size,
                                   derive_stream(seed, f"{label}/population"))
    facility = build_facility(cluster, FacilityConfig(
        n_clinicians=config.n_clinicians, slot_length=config.slot_length,
        hours_variant=config.hours_variant), patients, derive_stream(seed, f"{label}/facility"))
    if config.arm == "pilot":
        facility.clinicians = [
            apply_trainings(c, config.trainings_k, config.training,
                            derive_stream(seed, f"{label}/clinician{c.id}/training"))
            for c in facility.clinicians]
        for c in facility.clinicians:
            facility.books[c.id].clinician = c
    settings = PathwaySettings(horizon_days=config.horizon_days,
                               warmup_days=config.warmup_days,
                               acceptance_window_days=config.acceptance_window_days,
                               recall_retry_days=config.recall_retry_days,
                               orders_on_sick_visits=config.orders_on_sick_visits)
    state = ClinicState(patients=patients, facility=facility, pdf_table=table,
                        settings=settings, master_seed=seed, label=label)
    return warmup(state, config.warmup_days)
