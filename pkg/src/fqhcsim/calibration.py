"""Fit a baseline screening-order probability to a target training effect.

The national effect at a fixed dose grows with the baseline order probability
until rates saturate, so the fit is a bisection on that probability with all
other inputs held fixed.  Every evaluation reuses the same master seed, which
makes the objective a deterministic function of the probability.
"""
from __future__ import annotations

import dataclasses
import logging

from .analysis import effect_table
from .experiment import ExperimentConfig, run_cells
from .pathway import DEFAULT_PDFS
from .population import MEASURES

log = logging.getLogger(__name__)


def national_effect(cfg: ExperimentConfig, measure: str, k: int) -> float:
    runs, _ = run_cells(cfg)
    weights = {s.cluster_id: s.fqhc_count for s in cfg.resolved_specs()}
    return effect_table(runs, weights, [k], cfg.paired)["national"][(measure, k)].mean_pp


def calibrate_order_probability(cfg: ExperimentConfig, measure: str, target_pp: float,
                                k: int = 1, iterations: int = 8, lo: float = 0.0,
                                hi: float = None) -> tuple[float, float]:
    if measure not in MEASURES:
        raise ValueError(f"unknown measure {measure!r}")
    key = f"order.{measure}"
    hi = hi if hi is not None else min(1.0, 4 * DEFAULT_PDFS[key]["p"])
    base = dataclasses.replace(cfg, scenarios=["baseline", k])
    best = (None, None)
    for _ in range(iterations):
        p = (lo + hi) / 2.0
        overrides = dict(base.pdf_overrides)
        overrides[key] = {**overrides.get(key, {}), "p": p}
        effect = national_effect(dataclasses.replace(base, pdf_overrides=overrides), measure, k)
        log.info("%s p=%.4f -> %.3f pp", key, p, effect)
        best = (p, effect)
        if effect < target_pp:
            lo = p
        else:
            hi = p
    return best
