"""Experiment harness: run every (cluster, scenario, replicate) cell and write
an output bundle.

Bundle layout::

    manifest.json         resolved config, cluster specs, PDF table, file hashes
    runs.csv              one row per run per measure
    effects.csv           cluster and national effects per measure and dose
    validation.json       overlap grid, national estimates, ANOVA tables
    validation.csv        the overlap grid as a flat table
    anova.csv             ANOVA coefficients per measure
    plotdata/*.csv        effect-vs-dose series with pilot intervals
    figures/*.png         rendered comparison figures
    traces/*.tsv          optional sample traces
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from . import __version__
from .analysis import (MEASURES, PILOT_BENCHMARK, PILOT_YEARS, CqmResult, RunResult,
                       compute_cqm, effect_table, validate_against_pilot, weighted_anova)
from .intervention import ScenarioConfig, TrainingEffectParams, realize_scenario, run_label
from .kernel import stream_seed, write_trace
from .pathway import PdfTable, simulate
from .population import ClusterSpec, builtin_cluster_specs, load_cluster_csv

log = logging.getLogger(__name__)

QUICK_RUNS = 25
QUICK_POPULATION = 500


class ConfigError(ValueError):
    pass


class MissingRuns(FileNotFoundError):
    pass


@dataclass
class ExperimentConfig:
    master_seed: int = 20110101
    runs_per_cell: int = 200
    clusters: Union[str, list] = "all"
    scenarios: list = field(default_factory=lambda: ["baseline", 1, 2, 3, 4, 5])
    output_dir: str = "out"
    parallelism: int = 1
    paired: bool = True
    population_size: int = 2000
    warmup_days: int = 30
    horizon_days: int = 365
    hours_variant: str = "standard"
    n_clinicians: int = 5
    slot_length: int = 15
    acceptance_window_days: int = 30
    recall_retry_days: int = 30
    orders_on_sick_visits: bool = True
    pdf_overrides: dict = field(default_factory=dict)
    arm_pdf_overrides: dict = field(default_factory=dict)
    training_effect: dict = field(default_factory=dict)
    clusters_csv: Optional[str] = None
    cluster_specs: Optional[list] = None
    trace_samples: int = 0

    @property
    def trainings(self) -> list[int]:
        return [s for s in self.scenarios if s != "baseline"]

    def quick(self) -> "ExperimentConfig":
        return dataclasses.replace(self, runs_per_cell=QUICK_RUNS,
                                   population_size=QUICK_POPULATION)

    def resolved_specs(self) -> list[ClusterSpec]:
        if self.cluster_specs is not None:
            specs = [ClusterSpec(**s) for s in self.cluster_specs]
        elif self.clusters_csv:
            specs = load_cluster_csv(self.clusters_csv)
        else:
            specs = builtin_cluster_specs()
        if self.clusters == "all":
            return specs
        by_id = {s.cluster_id: s for s in specs}
        missing = [c for c in self.clusters if c not in by_id]
        if missing:
            raise ConfigError(f"clusters: unknown cluster id(s) {missing}")
        return [by_id[c] for c in sorted(self.clusters)]

    def scenario(self, k: int) -> ScenarioConfig:
        arm = "baseline" if k == 0 else "pilot"
        overrides = dict(self.pdf_overrides)
        overrides.update(self.arm_pdf_overrides.get(arm, {}) or {})
        return ScenarioConfig(
            arm=arm, trainings_k=k, hours_variant=self.hours_variant,
            pdf_overrides=overrides, population_size=self.population_size,
            warmup_days=self.warmup_days, horizon_days=self.horizon_days,
            master_seed=self.master_seed, paired=self.paired,
            n_clinicians=self.n_clinicians, slot_length=self.slot_length,
            acceptance_window_days=self.acceptance_window_days,
            recall_retry_days=self.recall_retry_days,
            orders_on_sick_visits=self.orders_on_sick_visits,
            training=TrainingEffectParams(**self.training_effect))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELD_TYPES = {
    "master_seed": int, "runs_per_cell": int, "parallelism": int, "population_size": int,
    "warmup_days": int, "horizon_days": int, "n_clinicians": int, "slot_length": int,
    "acceptance_window_days": int, "recall_retry_days": int, "trace_samples": int,
    "paired": bool, "orders_on_sick_visits": bool, "output_dir": str, "hours_variant": str,
    "pdf_overrides": dict, "arm_pdf_overrides": dict, "training_effect": dict,
}


def _key_lines(text: str) -> dict[str, int]:
    try:
        node = yaml.compose(text)
    except yaml.YAMLError:
        return {}
    if not isinstance(node, yaml.MappingNode):
        return {}
    return {k.value: k.start_mark.line + 1 for k, _ in node.value}


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse and validate an experiment config (YAML or JSON text).

    A bundle manifest is accepted too: its ``config`` section is used.
    """
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ConfigError(f"{where}: invalid YAML ({getattr(exc, 'problem', exc)})") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    lines = _key_lines(text)
    if "config" in data and "files" in data:
        data, lines = data["config"], {}

    def fail(key: str, msg: str):
        line = lines.get(key)
        raise ConfigError(f"{source}:{line}: {key}: {msg}" if line else f"{source}: {key}: {msg}")

    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key in data:
        if key not in known:
            fail(key, "unknown field")
    for key, typ in _FIELD_TYPES.items():
        if key in data and data[key] is not None:
            value = data[key]
            if typ is int and (isinstance(value, bool) or not isinstance(value, int)):
                fail(key, f"expected an integer, got {value!r}")
            if typ is not int and not isinstance(value, typ):
                fail(key, f"expected {typ.__name__}, got {value!r}")
    cfg = ExperimentConfig(**{k: v for k, v in data.items() if v is not None or k in
                              ("clusters_csv", "cluster_specs")})
    if cfg.runs_per_cell < 1:
        fail("runs_per_cell", "must be >= 1")
    if cfg.parallelism < 1:
        fail("parallelism", "must be >= 1")
    if cfg.clusters != "all":
        if not isinstance(cfg.clusters, list) or not cfg.clusters or not all(
                isinstance(c, int) and not isinstance(c, bool) for c in cfg.clusters):
            fail("clusters", "expected 'all' or a non-empty list of cluster ids")
    if not isinstance(cfg.scenarios, list) or not cfg.scenarios:
        fail("scenarios", "must be a non-empty list")
    for s in cfg.scenarios:
        if s != "baseline" and not (isinstance(s, int) and 1 <= s <= 5):
            fail("scenarios", f"entries are 'baseline' or trainings 1..5, got {s!r}")
    if len(set(map(str, cfg.scenarios))) != len(cfg.scenarios):
        fail("scenarios", "duplicate entries")
    for arm in cfg.arm_pdf_overrides:
        if arm not in ("baseline", "pilot"):
            fail("arm_pdf_overrides", f"unknown arm {arm!r}")
    try:
        TrainingEffectParams(**cfg.training_effect)
    except (TypeError, ValueError) as exc:
        fail("training_effect", str(exc))
    try:
        PdfTable.default().with_overrides(cfg.pdf_overrides)
        for overrides in cfg.arm_pdf_overrides.values():
            PdfTable.default().with_overrides(cfg.pdf_overrides).with_overrides(overrides)
    except (TypeError, ValueError) as exc:
        fail("pdf_overrides", str(exc))
    try:
        cfg.scenario(0)
    except ValueError as exc:
        fail("hours_variant" if "hours" in str(exc) else "population_size", str(exc))
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    cfg = parse_config(text, str(path))
    if cfg.clusters_csv and not os.path.isabs(cfg.clusters_csv):
        cfg.clusters_csv = str((path.parent / cfg.clusters_csv).resolve())
    return cfg


def run_one(cfg: ExperimentConfig, spec: ClusterSpec, k: int, run_index: int,
            keep_trace: bool = False):
    scenario = cfg.scenario(k)
    state = realize_scenario(scenario, spec, run_index)
    outcome = simulate(state)
    cqm = compute_cqm(outcome.trace, state.patients, scenario.horizon_days)
    label = run_label(scenario, spec.cluster_id, run_index)
    visits = sum(1 for r in outcome.trace if r.kind == "doctor_visit")
    no_shows = sum(1 for r in outcome.trace if r.kind == "no_show")
    result = RunResult(cluster_id=spec.cluster_id, arm=scenario.arm, trainings_k=k,
                       run_index=run_index, seed=stream_seed(cfg.master_seed, label) % 2 ** 63,
                       cqm=cqm, visits=visits, balks=len(outcome.balks), no_shows=no_shows)
    return result, (outcome.trace if keep_trace else None)


def _run_task(task):
    cfg, spec, k, j, keep = task
    return (spec.cluster_id, k, j), run_one(cfg, spec, k, j, keep)


def cells(cfg: ExperimentConfig) -> list[tuple]:
    specs = cfg.resolved_specs()
    ks = [0 if s == "baseline" else s for s in cfg.scenarios]
    return [(spec, k, j) for spec in specs for k in sorted(ks)
            for j in range(cfg.runs_per_cell)]


def run_cells(cfg: ExperimentConfig, progress: bool = False):
    todo = cells(cfg)
    trace_keys = {(spec.cluster_id, k, j) for spec, k, j in todo
                  if j < cfg.trace_samples}
    tasks = [(cfg, spec, k, j, (spec.cluster_id, k, j) in trace_keys) for spec, k, j in todo]
    results, traces = {}, {}
    started = time.perf_counter()
    if cfg.parallelism == 1:
        mapped = map(_run_task, tasks)
        pool = None
    else:
        pool = ProcessPoolExecutor(max_workers=cfg.parallelism)
        chunk = max(1, len(tasks) // (cfg.parallelism * 8))
        mapped = pool.map(_run_task, tasks, chunksize=chunk)
    try:
        for i, (key, (result, trace)) in enumerate(mapped, 1):
            results[key] = result
            if trace is not None:
                traces[key] = trace
            if progress and (i % 100 == 0 or i == len(tasks)):
                log.info("%d/%d runs (%.0fs)", i, len(tasks), time.perf_counter() - started)
    finally:
        if pool is not None:
            pool.shutdown()
    ordered = [results[k] for k in sorted(results)]
    return ordered, traces


RUN_COLUMNS = ("cluster_id", "arm", "trainings_k", "run_index", "seed", "measure",
               "numerator", "denominator", "rate", "visits", "balks", "no_shows")


def write_runs_csv(runs, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RUN_COLUMNS)
        for r in sorted(runs, key=lambda r: r.key):
            for m in MEASURES:
                c = r.cqm[m]
                writer.writerow((r.cluster_id, r.arm, r.trainings_k, r.run_index, r.seed, m,
                                 c.numerator, c.denominator, repr(c.rate), r.visits, r.balks,
                                 r.no_shows))


def read_runs_csv(path) -> list[RunResult]:
    grouped: dict[tuple, dict] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in RUN_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise MissingRuns(f"{path}: missing column(s) {missing}")
        for row in reader:
            key = (int(row["cluster_id"]), row["arm"], int(row["trainings_k"]),
                   int(row["run_index"]))
            entry = grouped.setdefault(key, {"seed": int(row["seed"]), "cqm": {},
                                             "visits": int(row["visits"]),
                                             "balks": int(row["balks"]),
                                             "no_shows": int(row["no_shows"])})
            entry["cqm"][row["measure"]] = CqmResult(row["measure"], int(row["numerator"]),
                                                     int(row["denominator"]))
    return [RunResult(cluster_id=c, arm=a, trainings_k=k, run_index=j, **v)
            for (c, a, k, j), v in grouped.items()]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _remove_bundle(out: Path) -> None:
    if out.exists():
        if not (out / "manifest.json").exists() and any(out.iterdir()):
            raise ConfigError(f"{out}: exists and is not an output bundle; refusing to "
                              "overwrite")
        shutil.rmtree(out)


def run_experiment(config: Union[str, Path, ExperimentConfig], output_dir=None,
                   figures: bool = True, progress: bool = False) -> Path:
    """Run every cell, then write runs.csv, the manifest and the reports.

    Output is assembled in a temporary sibling directory and moved into place
    only on success.
    """
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    out = Path(output_dir if output_dir is not None else cfg.output_dir).resolve()
    specs = cfg.resolved_specs()
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.partial-", dir=out.parent))
    try:
        started = time.perf_counter()
        runs, traces = run_cells(cfg, progress=progress)
        elapsed = time.perf_counter() - started
        write_runs_csv(runs, tmp / "runs.csv")
        if traces:
            (tmp / "traces").mkdir()
            for (c, k, j), trace in sorted(traces.items()):
                write_trace(trace, tmp / "traces" / f"c{c}_k{k}_run{j}.tsv")
        resolved = dataclasses.replace(cfg, cluster_specs=[dataclasses.asdict(s) for s in specs],
                                       clusters_csv=None, output_dir=str(out))
        manifest = {
            "tool": "fqhcsim",
            "version": __version__,
            "master_seed": cfg.master_seed,
            "config": resolved.to_dict(),
            "pdf_table": {arm: cfg.scenario(k).pdf_table().to_dict()
                          for arm, k in (("baseline", 0), ("pilot", 1))},
            "runs": len(runs),
            "runtime_seconds": round(elapsed, 1),
            "files": {},
        }
        _write_manifest(tmp, manifest)
        if reportable(cfg):
            emit_reports(tmp, figures=figures)
        else:
            log.warning("reports skipped: need a baseline, a pilot scenario and >= 2 runs")
        _remove_bundle(out)
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out


def reportable(cfg: ExperimentConfig) -> bool:
    return "baseline" in cfg.scenarios and bool(cfg.trainings) and cfg.runs_per_cell >= 2


def _write_manifest(bundle: Path, manifest: dict) -> None:
    with open(bundle / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(bundle) -> dict:
    path = Path(bundle) / "manifest.json"
    if not path.exists():
        raise MissingRuns(f"{bundle}: no manifest.json")
    return json.loads(path.read_text(encoding="utf-8"))


def _fmt(x: Any) -> Any:
    return repr(float(x)) if isinstance(x, float) else x


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(row[h]) for h in header])


PLOT_COLUMNS = ("measure", "k", "mean_pp", "lo", "hi", "pilot_year", "pilot_lo", "pilot_hi")


def emit_reports(bundle, figures: bool = True) -> list[Path]:
    """Effects, validation grid, ANOVA tables, plot data and figures for a bundle."""
    bundle = Path(bundle)
    manifest = load_manifest(bundle)
    runs_path = bundle / "runs.csv"
    if not runs_path.exists():
        raise MissingRuns(f"{bundle}: no runs.csv")
    cfg = parse_config(json.dumps(manifest["config"]), str(bundle / "manifest.json"))
    runs = read_runs_csv(runs_path)
    trainings = sorted(cfg.trainings)
    if not runs or not trainings or "baseline" not in cfg.scenarios:
        raise MissingRuns(f"{bundle}: need baseline and at least one pilot scenario")
    present = {(r.arm, r.trainings_k) for r in runs}
    wanted = {("baseline", 0)} | {("pilot", k) for k in trainings}
    if not wanted <= present:
        raise MissingRuns(f"{bundle}: runs.csv lacks scenario(s) {sorted(wanted - present)}")
    weights = {s.cluster_id: s.fqhc_count for s in cfg.resolved_specs()}

    table = effect_table(runs, weights, trainings, cfg.paired)
    report = validate_against_pilot(table["national"], PILOT_BENCHMARK, trainings)
    overall = validate_against_pilot({(m, "all"): table["national"][(m, "all")]
                                      for m in MEASURES}, PILOT_BENCHMARK, ["all"])
    report.national = {f"{m}|{k}": est.as_dict()
                       for (m, k), est in table["national"].items()}
    report.cluster_effects = [dict(cluster_id=c, trainings_k=k, **est.as_dict())
                              for (c, m, k), est in table["cluster"].items()]
    report.anova = {m: weighted_anova(runs, weights, m).as_dict() for m in MEASURES}
    payload = report.as_dict()
    payload["overall_rows"] = overall.rows
    payload["summary"] = {
        "overlap_count": sum(r["overlap"] for r in report.rows),
        "grid_rows": len(report.rows),
        "weights": {str(c): w for c, w in weights.items()},
    }

    written = []
    effects_rows = []
    for (c, m, k), est in table["cluster"].items():
        effects_rows.append(dict(scope=f"cluster{c}", trainings_k=k, **est.as_dict()))
    for (m, k), est in table["national"].items():
        effects_rows.append(dict(scope="national", trainings_k=k, **est.as_dict()))
    header = ("scope", "measure", "trainings_k", "mean_pp", "se_pp", "lo", "hi", "n")
    _write_csv(bundle / "effects.csv", header, effects_rows)
    written.append(bundle / "effects.csv")

    with open(bundle / "validation.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(bundle / "validation.json")

    grid_header = ("measure", "pilot_year", "trainings_k", "mean_pp", "se_pp", "lo", "hi",
                   "pilot_mean_pp", "pilot_se_pp", "pilot_lo", "pilot_hi", "overlap")
    _write_csv(bundle / "validation.csv", grid_header, report.rows)
    written.append(bundle / "validation.csv")

    anova_rows = [dict(measure=m, **row) for m in MEASURES
                  for row in report.anova[m]["coefficients"]]
    _write_csv(bundle / "anova.csv",
               ("measure", "term", "coef", "se", "t", "p", "significant"), anova_rows)
    written.append(bundle / "anova.csv")

    def plot_rows(rows):
        return [{"measure": r["measure"], "k": r["trainings_k"], "mean_pp": r["mean_pp"],
                 "lo": r["lo"], "hi": r["hi"], "pilot_year": r["pilot_year"],
                 "pilot_lo": r["pilot_lo"], "pilot_hi": r["pilot_hi"]} for r in rows]

    by_training = plot_rows(report.rows)
    overall_rows = plot_rows(overall.rows)
    _write_csv(bundle / "plotdata" / "effects_by_training.csv", PLOT_COLUMNS, by_training)
    _write_csv(bundle / "plotdata" / "effects_overall.csv", PLOT_COLUMNS, overall_rows)
    written += [bundle / "plotdata" / "effects_by_training.csv",
                bundle / "plotdata" / "effects_overall.csv"]

    if figures:
        from .plotting import plot_effects_by_training, plot_effects_overall
        fig_dir = bundle / "figures"
        fig_dir.mkdir(exist_ok=True)
        written.append(plot_effects_overall(overall_rows, fig_dir / "effects_overall.png"))
        written.append(plot_effects_by_training(by_training,
                                                fig_dir / "effects_by_training.png"))

    manifest["files"] = {
        str(p.relative_to(bundle)): _sha256(p)
        for p in sorted([bundle / "runs.csv"] + written) if p.suffix in (".csv", ".json")}
    _write_manifest(bundle, manifest)
    return written


def validation_summary(bundle) -> str:
    """Human-readable overlap grid of a bundle."""
    bundle = Path(bundle)
    path = bundle / "validation.json"
    if not path.exists():
        raise MissingRuns(f"{bundle}: no validation.json (run `report` first)")
    payload = json.loads(path.read_text(encoding="utf-8"))
    lines = [f"{'measure':<12} {'k':>3} {'sim mean':>9} {'sim 95% CI':>20}   "
             + "   ".join(f"Y{y} overlap" for y in PILOT_YEARS)]
    rows = payload["rows"]
    keys = sorted({(r["measure"], r["trainings_k"]) for r in rows},
                  key=lambda t: (MEASURES.index(t[0]), t[1]))
    for m, k in keys:
        sel = {r["pilot_year"]: r for r in rows if r["measure"] == m and r["trainings_k"] == k}
        r = sel[PILOT_YEARS[0]]
        flags = "   ".join(f"{'yes' if sel[y]['overlap'] else 'no':>10}" for y in PILOT_YEARS)
        lines.append(f"{m:<12} {k:>3} {r['mean_pp']:>9.3f} "
                     f"{'[' + format(r['lo'], '.3f') + ', ' + format(r['hi'], '.3f') + ']':>20}   "
                     f"{flags}")
    s = payload["summary"]
    lines.append(f"{s['overlap_count']}/{s['grid_rows']} measure-year-dose cells overlap the "
                 f"pilot interval")
    for m in MEASURES:
        factors = payload["anova"][m]["factors"]
        sig = ", ".join(f"{name} p={v['p']:.3g}" for name, v in factors.items())
        lines.append(f"ANOVA {m}: {sig}")
    return "\n".join(lines)
