"""Clinical quality measure rates, arm effects and validation against the pilot.

The simulated effect of a scenario is the pilot-arm rate minus the
baseline-arm rate in percentage points.  It is compared with the pilot's
reported difference-in-differences estimates by 95% interval overlap.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy import stats

from .kernel import MINUTES_PER_DAY, EventRecord
from .pathway import COMPLETE_KINDS
from .population import MEASURES

Z95 = 1.96
ALPHA = 0.05
PILOT_YEARS = (1, 2, 3)


class EmptyDenominator(ValueError):
    pass


class InsufficientRuns(ValueError):
    pass


class MissingCluster(KeyError):
    pass


class SingularDesign(ValueError):
    pass


class MalformedInterval(ValueError):
    pass


class MissingEstimate(KeyError):
    pass


@dataclass(frozen=True)
class CqmResult:
    measure: str
    numerator: int
    denominator: int

    def __post_init__(self):
        if not 0 <= self.numerator <= self.denominator:
            raise ValueError(f"{self.measure}: need 0 <= numerator <= denominator")

    @property
    def rate(self) -> float:
        return self.numerator / self.denominator


_MEASURE_OF_KIND = {kind: m for m, kind in COMPLETE_KINDS.items()}


def compute_cqm(trace: Iterable[EventRecord], population, horizon_days: int = 365
                ) -> dict[str, CqmResult]:
    """Patient-level rates: diabetics with at least one completed test in-year."""
    diabetic = {f"patient:{p.id}" for p in population if p.has_diabetes}
    if not diabetic:
        raise EmptyDenominator("no diabetic patients in the population")
    end = horizon_days * MINUTES_PER_DAY
    done: dict[str, set] = {m: set() for m in MEASURES}
    for rec in trace:
        measure = _MEASURE_OF_KIND.get(rec.kind)
        if measure is not None and 0 <= rec.time < end and rec.subject in diabetic:
            done[measure].add(rec.subject)
    return {m: CqmResult(m, len(done[m]), len(diabetic)) for m in MEASURES}


@dataclass
class RunResult:
    cluster_id: int
    arm: str
    trainings_k: int
    run_index: int
    seed: int
    cqm: dict
    visits: int = 0
    balks: int = 0
    no_shows: int = 0

    def __post_init__(self):
        if set(self.cqm) != set(MEASURES):
            raise ValueError(f"run needs exactly the measures {MEASURES}")

    def rate(self, measure: str) -> float:
        return self.cqm[measure].rate

    @property
    def key(self) -> tuple:
        return (self.cluster_id, self.arm != "baseline", self.trainings_k, self.run_index)


@dataclass(frozen=True)
class EffectEstimate:
    measure: str
    mean_pp: float
    se_pp: float
    n: int = 0

    @property
    def ci95(self) -> tuple[float, float]:
        half = Z95 * self.se_pp
        return (self.mean_pp - half, self.mean_pp + half)

    def as_dict(self) -> dict:
        lo, hi = self.ci95
        return {"measure": self.measure, "mean_pp": self.mean_pp, "se_pp": self.se_pp,
                "lo": lo, "hi": hi, "n": self.n}


def _rates(runs: Sequence[RunResult], measure: str) -> np.ndarray:
    return np.array([r.rate(measure) for r in runs], dtype=float)


def arm_effect(baseline_runs: Sequence[RunResult], pilot_runs: Sequence[RunResult],
               measure: str, paired: bool = True) -> EffectEstimate:
    """Pilot minus baseline mean rate, in percentage points.

    Paired runs (shared seeds) use the variance of per-run differences;
    independent arms use the Welch standard error.
    """
    if len(baseline_runs) < 2 or len(pilot_runs) < 2:
        raise InsufficientRuns("need at least two runs per arm")
    if paired:
        base = {r.run_index: r.rate(measure) for r in baseline_runs}
        pilot = {r.run_index: r.rate(measure) for r in pilot_runs}
        if set(base) != set(pilot):
            raise InsufficientRuns("paired arms must have the same run indices")
        idx = sorted(base)
        d = 100.0 * (np.array([pilot[i] for i in idx]) - np.array([base[i] for i in idx]))
        return EffectEstimate(measure, float(d.mean()), float(d.std(ddof=1) / math.sqrt(len(d))),
                              len(d))
    b = 100.0 * _rates(baseline_runs, measure)
    p = 100.0 * _rates(pilot_runs, measure)
    se = math.sqrt(b.var(ddof=1) / len(b) + p.var(ddof=1) / len(p))
    return EffectEstimate(measure, float(p.mean() - b.mean()), se, min(len(b), len(p)))


def pooled_effect(baseline_runs: Sequence[RunResult],
                  pilot_runs_by_k: Mapping[int, Sequence[RunResult]], measure: str,
                  paired: bool = True) -> EffectEstimate:
    """Effect of the pilot averaged over training levels.

    Under pairing each run index contributes the mean of its pilot rates
    across training levels, so the comparison stays paired.
    """
    if paired:
        merged: dict[int, list] = {}
        for runs in pilot_runs_by_k.values():
            for r in runs:
                merged.setdefault(r.run_index, []).append(r.rate(measure))
        averaged = [_AveragedRun(i, float(np.mean(v))) for i, v in sorted(merged.items())]
        base = [_AveragedRun(r.run_index, r.rate(measure)) for r in baseline_runs]
        return arm_effect(base, averaged, measure, paired=True)
    pooled = [r for runs in pilot_runs_by_k.values() for r in runs]
    return arm_effect(baseline_runs, pooled, measure, paired=False)


@dataclass
class _AveragedRun:
    run_index: int
    value: float

    def rate(self, _measure: str) -> float:
        return self.value


def weighted_national_estimate(cluster_effects: Mapping[int, EffectEstimate],
                               weights: Mapping[int, float]) -> EffectEstimate:
    """FQHC-count weighted mean of cluster effects.

    The standard error treats clusters as independent:
    ``sqrt(sum w_i^2 se_i^2) / sum w_i``.
    """
    missing = [c for c in weights if c not in cluster_effects]
    if missing or not weights:
        raise MissingCluster(f"no effect for cluster(s) {missing}")
    ids = sorted(weights)
    w = np.array([float(weights[c]) for c in ids])
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative with a positive sum")
    means = np.array([cluster_effects[c].mean_pp for c in ids])
    ses = np.array([cluster_effects[c].se_pp for c in ids])
    total = w.sum()
    measures = {cluster_effects[c].measure for c in ids}
    return EffectEstimate(measures.pop() if len(measures) == 1 else "mixed",
                          float(w @ means / total),
                          float(math.sqrt(float((w ** 2) @ (ses ** 2))) / total),
                          sum(cluster_effects[c].n for c in ids))


@dataclass
class WlsFit:
    terms: list
    coef: np.ndarray
    se: np.ndarray
    t: np.ndarray
    p: np.ndarray
    df_resid: int
    rss: float
    residuals: np.ndarray


def wls(X: np.ndarray, y: np.ndarray, w: np.ndarray, terms: Optional[list] = None) -> WlsFit:
    """Weighted least squares through a QR factorisation of ``sqrt(W) X``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    n, k = X.shape
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    sw = np.sqrt(w)
    q, r = np.linalg.qr(X * sw[:, None])
    diag = np.abs(np.diag(r))
    if k > n or diag.min(initial=np.inf) <= 1e-10 * max(diag.max(initial=0.0), 1.0):
        raise SingularDesign("design matrix is rank deficient")
    coef = np.linalg.solve(r, q.T @ (y * sw))
    resid = y - X @ coef
    rss = float(w @ resid ** 2)
    df = n - k
    if df > 0:
        sigma2 = rss / df
        rinv = np.linalg.solve(r, np.eye(k))
        se = np.sqrt(np.maximum(sigma2 * np.sum(rinv ** 2, axis=1), 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(se > 0, coef / se, np.where(coef == 0, 0.0, np.inf))
        p = 2.0 * stats.t.sf(np.abs(t), df)
    else:
        se = t = p = np.full(k, np.nan)
    return WlsFit(terms or [f"x{i}" for i in range(k)], coef, se, t, p, df, rss, resid)


@dataclass
class AnovaTable:
    measure: str
    fit: WlsFit
    factor_tests: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        f = self.fit
        rows = [{"term": term, "coef": float(c), "se": float(s), "t": float(t),
                 "p": float(p), "significant": bool(p < ALPHA)}
                for term, c, s, t, p in zip(f.terms, f.coef, f.se, f.t, f.p)]
        return {"measure": self.measure, "df_resid": f.df_resid, "rss": f.rss,
                "coefficients": rows, "factors": self.factor_tests}


def anova_design(runs: Sequence[RunResult], weights: Mapping[int, float]
                 ) -> tuple[np.ndarray, np.ndarray, list, dict]:
    """Design matrix for rate ~ arm + trainings + cluster.

    ``trainings`` enters as a numeric dose and is dropped when only one pilot
    level is present (it would duplicate ``arm``).  Cluster dummies use the
    lowest cluster id as reference.
    """
    if not runs:
        raise SingularDesign("no runs")
    clusters = sorted(weights)
    present = {r.cluster_id for r in runs}
    empty = [c for c in clusters if c not in present]
    if empty:
        raise SingularDesign(f"cluster level(s) {empty} have no runs")
    stray = present - set(clusters)
    if stray:
        raise MissingCluster(f"no weight for cluster(s) {sorted(stray)}")
    arm = np.array([r.arm != "baseline" for r in runs], dtype=float)
    if arm.min() == arm.max():
        raise SingularDesign("both arms are needed")
    k = np.array([r.trainings_k for r in runs], dtype=float)
    columns = [np.ones(len(runs)), arm]
    terms = ["intercept", "arm[pilot]"]
    groups = {"arm": [1]}
    if len(set(k[arm == 1])) > 1:
        columns.append(k)
        terms.append("trainings")
        groups["trainings"] = [2]
    cluster_cols = []
    for c in clusters[1:]:
        cluster_cols.append(len(columns))
        columns.append(np.array([r.cluster_id == c for r in runs], dtype=float))
        terms.append(f"cluster[{c}]")
    if cluster_cols:
        groups["cluster"] = cluster_cols
    w = np.array([float(weights[r.cluster_id]) for r in runs])
    return np.column_stack(columns), w, terms, groups


def weighted_anova(runs: Sequence[RunResult], weights: Mapping[int, float],
                   measure: str) -> AnovaTable:
    """WLS of run-level rate on arm, trainings and cluster, weighted by FQHC count.

    Each factor also gets an extra-sum-of-squares F test against the model
    without its columns.
    """
    runs = sorted(runs, key=lambda r: r.key)
    X, w, terms, groups = anova_design(runs, weights)
    y = _rates(runs, measure)
    fit = wls(X, y, w, terms)
    tests = {}
    for name, cols in groups.items():
        keep = [j for j in range(X.shape[1]) if j not in cols]
        reduced = wls(X[:, keep], y, w)
        q = len(cols)
        if fit.df_resid > 0 and fit.rss > 0:
            F = ((reduced.rss - fit.rss) / q) / (fit.rss / fit.df_resid)
            p = float(stats.f.sf(F, q, fit.df_resid))
        else:
            F, p = (0.0, 1.0) if reduced.rss == fit.rss else (math.inf, 0.0)
        tests[name] = {"df": q, "F": float(F), "p": p, "significant": bool(p < ALPHA)}
    return AnovaTable(measure, fit, tests)


def ci_overlap(a: Sequence[float], b: Sequence[float]) -> bool:
    (alo, ahi), (blo, bhi) = a, b
    if alo > ahi or blo > bhi or any(map(math.isnan, (alo, ahi, blo, bhi))):
        raise MalformedInterval(f"bad interval(s) {a}, {b}")
    return max(alo, blo) <= min(ahi, bhi)


@dataclass(frozen=True)
class PilotBenchmark:
    """Pilot difference-in-differences (pp) and SE per measure and year."""
    values: dict

    def __post_init__(self):
        expected = {(m, y) for m in MEASURES for y in PILOT_YEARS}
        if set(self.values) != expected:
            raise ValueError("benchmark needs every measure for years 1-3")

    def estimate(self, measure: str, year: int) -> EffectEstimate:
        mean, se = self.values[(measure, year)]
        return EffectEstimate(measure, mean, se)

    def ci(self, measure: str, year: int) -> tuple[float, float]:
        return self.estimate(measure, year).ci95


PILOT_BENCHMARK = PilotBenchmark({
    ("HbA1c", 1): (1.67, 0.43), ("HbA1c", 2): (0.68, 0.102), ("HbA1c", 3): (0.70, 0.38),
    ("EyeExam", 1): (1.84, 0.50), ("EyeExam", 2): (1.17, 0.47), ("EyeExam", 3): (1.23, 0.46),
    ("Nephropathy", 1): (2.62, 0.55), ("Nephropathy", 2): (3.36, 0.51),
    ("Nephropathy", 3): (2.62, 0.49),
    ("LDL", 1): (0.48, 0.330), ("LDL", 2): (0.16, 0.728), ("LDL", 3): (1.00, 0.46),
})


@dataclass
class ValidationReport:
    rows: list
    national: dict = field(default_factory=dict)
    anova: dict = field(default_factory=dict)
    cluster_effects: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"rows": self.rows, "national": self.national, "anova": self.anova,
                "cluster_effects": self.cluster_effects}

    def overlaps(self, measure: str, year: int, k: int) -> bool:
        for row in self.rows:
            if (row["measure"], row["pilot_year"], row["trainings_k"]) == (measure, year, k):
                return row["overlap"]
        raise MissingEstimate((measure, year, k))


def validate_against_pilot(estimates: Mapping[tuple, EffectEstimate],
                           benchmark: PilotBenchmark = PILOT_BENCHMARK,
                           trainings: Sequence[int] = (1, 2, 3, 4, 5)) -> ValidationReport:
    """One row per (measure, pilot year, training level) with the overlap flag."""
    rows = []
    for measure in MEASURES:
        for year in PILOT_YEARS:
            pilot = benchmark.estimate(measure, year)
            plo, phi = pilot.ci95
            for k in trainings:
                est = estimates.get((measure, k))
                if est is None:
                    raise MissingEstimate((measure, k))
                lo, hi = est.ci95
                rows.append({"measure": measure, "pilot_year": year, "trainings_k": k,
                             "mean_pp": est.mean_pp, "se_pp": est.se_pp, "lo": lo, "hi": hi,
                             "pilot_mean_pp": pilot.mean_pp, "pilot_se_pp": pilot.se_pp,
                             "pilot_lo": plo, "pilot_hi": phi,
                             "overlap": ci_overlap((lo, hi), (plo, phi))})
    return ValidationReport(rows)


def effect_table(runs: Sequence[RunResult], weights: Mapping[int, float],
                 trainings: Sequence[int], paired: bool = True) -> dict:
    """Cluster and national effects for every measure and training level.

    Returns ``{"cluster": {(cluster, measure, k): est}, "national":
    {(measure, k): est}}``; ``k = "all"`` pools the training levels.
    """
    by_cell: dict[tuple, list] = {}
    for r in sorted(runs, key=lambda r: r.key):
        by_cell.setdefault((r.cluster_id, r.trainings_k if r.arm != "baseline" else 0), []
                           ).append(r)
    cluster_est, national = {}, {}
    for measure in MEASURES:
        for k in list(trainings) + ["all"]:
            per_cluster = {}
            for c in sorted(weights):
                base = by_cell.get((c, 0), [])
                if k == "all":
                    pilots = {j: by_cell.get((c, j), []) for j in trainings}
                    if any(not v for v in pilots.values()):
                        raise InsufficientRuns(f"cluster {c}: missing pilot runs")
                    est = pooled_effect(base, pilots, measure, paired)
                else:
                    est = arm_effect(base, by_cell.get((c, k), []), measure, paired)
                per_cluster[c] = est
                cluster_est[(c, measure, k)] = est
            national[(measure, k)] = weighted_national_estimate(per_cluster, weights)
    return {"cluster": cluster_est, "national": national}
