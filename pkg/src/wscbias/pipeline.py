"""End-to-end scenario runs with persisted, resumable stage outputs.

Stages run in this order: generate, naive estimates, prepare, match,
estimate, null simulation, meta-analysis, report. Every stage reads what
it needs from the output directory, so any stage can be rerun alone once
its inputs exist. All randomness derives from the scenario seed.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import kernels
from .analysis import AnalysisOptions, analyze_intervention
from .biasest import (
    StudentTable,
    decompose_bias,
    fit_mlm_outcomes,
    mlm_design,
    naive_bias,
    read_estimates_csv,
    write_estimates_csv,
)
from .covariates import export_design, load_design, prepare_design
from .errors import ConfigError, WSCError
from .matching import read_matched_csv
from .meta import MetaInput, intervention_level_meta, meta_analysis, predict_bias_magnitude
from .nullsim import MODES, NullContext, NullReference, p_value, run_null_reference, summarize_reference
from .propensity import coefficients_frame
from .synthpop import OUTCOMES, ScenarioConfig, generate_population, load_snapshot, save_snapshot

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CONFIG_DIR = Path(__file__).parent / "configs"
SECTIONS = ("scenario", "analysis", "nullsim", "meta")


@dataclass(frozen=True)
class NullSettings:
    replicates: int = 500
    modes: tuple = ("naive", "match")


@dataclass(frozen=True)
class MetaSettings:
    ci_grid_step: float = 1e-3
    ci_grid_max: float = 1.0
    ci_draws: int = 2000


@dataclass(frozen=True)
class PipelineConfig:
    scenario: ScenarioConfig
    analysis: AnalysisOptions = AnalysisOptions()
    nullsim: NullSettings = NullSettings()
    meta: MetaSettings = MetaSettings()
    schema_version: int = SCHEMA_VERSION

    @property
    def seed(self) -> int:
        return self.scenario.rng_seed

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "scenario": self.scenario.to_dict(),
            "analysis": dataclasses.asdict(self.analysis),
            "nullsim": {**dataclasses.asdict(self.nullsim), "modes": list(self.nullsim.modes)},
            "meta": dataclasses.asdict(self.meta),
        }

    def dump(self, path):
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)


def _build(cls, section: str, data: dict):
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{section}.{key}", "unknown key")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(section, str(exc)) from None


def _coerce(section: str, key: str, value, default):
    if value is None or default is None:
        return value
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return value.lower() in ("true", "1", "yes")
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{section}.{key}", f"cannot interpret {value!r}") from None
    return value


def config_from_dict(data: dict) -> PipelineConfig:
    data = dict(data or {})
    version = data.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {version}")
    for key in data:
        if key not in SECTIONS:
            raise ConfigError(key, "unknown section")
    scenario = ScenarioConfig.from_dict(data.get("scenario") or {})
    parts = {}
    for name, cls in (("analysis", AnalysisOptions), ("nullsim", NullSettings), ("meta", MetaSettings)):
        raw = dict(data.get(name) or {})
        defaults = {f.name: f.default for f in dataclasses.fields(cls)}
        for k in list(raw):
            if k in defaults:
                raw[k] = _coerce(name, k, raw[k], defaults[k])
        parts[name] = _build(cls, name, raw)
    ns = parts["nullsim"]
    for m in ns.modes:
        if m not in MODES:
            raise ConfigError("nullsim.modes", f"unknown mode {m!r}")
    if ns.replicates < 0:
        raise ConfigError("nullsim.replicates", "must be non-negative")
    if parts["analysis"].caliper is not None and not parts["analysis"].caliper > 0:
        raise ConfigError("analysis.caliper", "must be positive")
    return PipelineConfig(scenario=scenario, **parts)


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``section.key=value`` (or bare scenario ``key=value``) strings."""
    data = json.loads(json.dumps(data or {}))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw) if raw.strip() else None
        section, _, name = key.rpartition(".")
        if not section:
            section = "scenario"
            for cand, cls in (("analysis", AnalysisOptions), ("nullsim", NullSettings),
                              ("meta", MetaSettings)):
                if name in {f.name for f in dataclasses.fields(cls)}:
                    section = cand
        if section not in SECTIONS:
            raise ConfigError(key, "unknown section")
        data.setdefault(section, {})
        if data[section] is None:
            data[section] = {}
        data[section][name] = value
    return data


def resolve_config_path(path) -> Path:
    p = Path(path)
    if p.exists():
        return p
    bundled = CONFIG_DIR / (p.name if p.suffix else f"{p.name}.yaml")
    if bundled.exists():
        return bundled
    raise ConfigError("config", f"no such file {path}")


def load_config(path=None, overrides=()) -> PipelineConfig:
    data = {}
    if path is not None:
        with open(resolve_config_path(path)) as fh:
            try:
                data = yaml.safe_load(fh) or {}
            except yaml.YAMLError as exc:
                raise ConfigError("config", f"invalid YAML: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config", "top level must be a mapping")
    return config_from_dict(apply_overrides(data, overrides))


def derived_seed(seed: int, *key: int) -> int:
    seq = np.random.SeedSequence(seed, spawn_key=key)
    return int(seq.generate_state(1, np.uint64)[0])


# --- files --------------------------------------------------------------------

FILES = {
    "config": "config.yaml",
    "schools": "schools.csv",
    "students": "students.csv",
    "snapshot": "snapshot.json",
    "design": "design.csv",
    "design_manifest": "design_manifest.json",
    "matching": "matching.json",
    "estimates": "estimates.csv",
    "recovery": "recovery.csv",
    "regressions": "regressions.json",
    "report": "report.json",
    "timings": "timings.json",
}


def per_intervention_file(kind: str, w: str) -> str:
    return f"{kind}/{kind}_{w}.csv"


def null_files(mode: str):
    return f"null_{mode}_draws.csv", f"null_{mode}.json"


def meta_files(kind: str):
    return f"meta_{kind}.json", f"meta_{kind}_cells.csv"


class Workspace:
    """The output directory of one run and the objects loaded from it."""

    def __init__(self, out_dir, config: PipelineConfig | None = None):
        self.root = Path(out_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self._config = config
        self._pop = None
        self._design = None
        self._table = None
        self.timings = {}

    def path(self, name: str) -> Path:
        return self.root / FILES.get(name, name)

    @property
    def config(self) -> PipelineConfig:
        if self._config is None:
            p = self.path("config")
            if not p.exists():
                raise ConfigError("config", f"no config given and none saved in {self.root}")
            self._config = load_config(p)
        return self._config

    @property
    def pop(self):
        if self._pop is None:
            self._pop = load_snapshot(self.root)
        return self._pop

    @property
    def design(self):
        if self._design is None:
            self._design = load_design(self.root)
        return self._design

    @property
    def table(self) -> StudentTable:
        if self._table is None:
            self._table = StudentTable(self.pop.students)
        return self._table

    def pool_ids(self) -> list:
        index = set(self.design.features.index)
        return sorted(s for s in self.pop.pool_ids() if s in index)

    def interventions(self) -> list:
        return list(self.pop.config.intervention_ids)

    def trial_sets(self, w):
        ct = sorted(self.pop.trial_controls(w))
        treated = sorted(set(self.pop.trial_schools(w)) - set(ct))
        return ct, treated

    def timed(self, stage, fn, *args, **kwargs):
        start = time.perf_counter()
        out = fn(*args, **kwargs)
        self.timings[stage] = round(time.perf_counter() - start, 3)
        return out


# --- stages -------------------------------------------------------------------

def stage_generate(ws: Workspace):
    ws.config.dump(ws.path("config"))
    ws._pop = generate_population(ws.config.scenario)
    save_snapshot(ws._pop, ws.root)
    ws._table = None


def stage_prepare(ws: Workspace):
    ws._design = prepare_design(ws.pop)
    export_design(ws._design, ws.root)


def stage_match(ws: Workspace) -> dict:
    """Propensity search and matching for every intervention; writes matching.json."""
    cfg = ws.config
    pool = ws.pool_ids()
    sds = ws.pop.outcome_sd()
    summary = {}
    for sub in ("balance", "matched", "propensity"):
        (ws.root / sub).mkdir(exist_ok=True)
    for i, w in enumerate(ws.interventions()):
        ct, treated = ws.trial_sets(w)
        seed = derived_seed(cfg.seed, 10, i)
        try:
            res = analyze_intervention(ws.design, ws.table, ct, pool, sds, treated,
                                       cfg.analysis, seed)
        except WSCError as exc:
            summary[w] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}",
                          "order_seed": seed}
            continue
        ch = res.choice
        ch.balance.to_csv(ws.root / per_intervention_file("balance", w))
        ch.matched.to_csv(ws.root / per_intervention_file("matched", w))
        coefficients_frame(ch.fit).to_csv(ws.root / per_intervention_file("propensity", w),
                                          index=False, float_format="%.17g")
        summary[w] = {
            "status": "ok",
            "spec": ch.fit.spec.kind,
            "spec_terms": len(ch.fit.spec.terms),
            "converged": bool(ch.fit.converged),
            "violation_count": ch.balance.violation_count,
            "n_covariates": ch.balance.n_covariates,
            "violation_counts_by_spec": {
                f.spec.kind: v for f, v in zip(res.fits, ch.violation_counts)
            },
            "spec_failures": ch.failures,
            "covariates": res.covariates,
            "dropped_indicators": res.dropped_indicators,
            "caliper_width": ch.matched.caliper_width,
            "order_seed": seed,
            "n_pairs": len(ch.matched.pairs),
            "n_unmatched": len(ch.matched.unmatched_ct),
            "n_trimmed": ch.matched.n_trimmed,
            "median_candidates": float(np.median(list(ch.matched.candidates.values()))),
        }
    with open(ws.path("matching"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def stage_estimate(ws: Workspace) -> list:
    """Naive estimates and multilevel estimates on the stored matched samples."""
    sds = ws.pop.outcome_sd()
    pool = ws.pool_ids()
    with open(ws.path("matching")) as fh:
        matching = json.load(fh)
    estimates = []
    for w in ws.interventions():
        ct, _ = ws.trial_sets(w)
        for k in OUTCOMES:
            estimates.append(naive_bias(ws.table, ct, pool, k, sds[k], w))
        info = matching.get(w, {})
        if info.get("status") != "ok":
            continue
        _, frame = read_matched_csv(ws.root / per_intervention_file("matched", w))
        pairs = frame[frame["matched"].astype(str) == "True"]
        feats = ws.design.features[info["covariates"]]
        design = mlm_design(ws.table, pairs["ct_school_id"], pairs["co_school_id"], feats)
        fits = fit_mlm_outcomes(ws.table, design, sds)
        for k in OUTCOMES:
            estimates.append(fits[k].to_estimate(w, k))
    write_estimates_csv(estimates, ws.path("estimates"))
    return estimates


def null_context(ws: Workspace) -> NullContext:
    return NullContext(table=ws.table, pool_ids=ws.pool_ids(), sds=ws.pop.outcome_sd(),
                       design=ws.design, options=ws.config.analysis)


def stage_nullsim(ws: Workspace, modes=None, replicates=None, threads=None) -> dict:
    cfg = ws.config
    modes = list(modes or cfg.nullsim.modes)
    R = cfg.nullsim.replicates if replicates is None else replicates
    ctx = null_context(ws)
    sizes = {w: len(ws.trial_sets(w)[0]) for w in ws.interventions()}
    out = {}
    for mode in modes:
        seed = derived_seed(cfg.seed, 20, MODES.index(mode))
        ref = run_null_reference(ctx, sizes, mode, R, seed, threads)
        csv_name, json_name = null_files(mode)
        ref.save(ws.root / csv_name, ws.root / json_name)
        out[mode] = ref
    return out


def _estimate_table(estimates) -> pd.DataFrame:
    rows = [{"intervention": e.intervention_id, "outcome": e.outcome, "kind": e.kind,
             "value": e.value, "se": e.se, "n_students": e.n_students} for e in estimates]
    return pd.DataFrame(rows)


def stage_meta(ws: Workspace) -> dict:
    """Meta-analysis and magnitude regressions for each kind with a null reference."""
    cfg = ws.config
    estimates = read_estimates_csv(ws.path("estimates"))
    table = _estimate_table(estimates)
    out = {}
    for kind in MODES:
        csv_name, json_name = null_files(kind)
        if not (ws.root / csv_name).exists():
            continue
        ref = NullReference.load(ws.root / csv_name, ws.root / json_name)
        var = ref.per_cell_variance
        sub = table[table["kind"] == kind]
        keys = list(zip(sub["intervention"], sub["outcome"]))
        cells = [(w, k, b, float(var.get((w, k), np.nan)))
                 for (w, k), b in zip(keys, sub["value"])]
        cells = [c for c in cells if np.isfinite(c[3]) and c[3] > 0]
        if len(cells) < 4:
            out[kind] = {"status": "skipped", "reason": "too few cells with a null variance"}
            continue
        mi = MetaInput(*map(np.array, zip(*cells)))
        res = meta_analysis(mi)
        json_name_m, csv_name_m = meta_files(kind)
        res.save(ws.root / json_name_m, ws.root / csv_name_m)
        iv = intervention_level_meta(mi, seed=derived_seed(cfg.seed, 30, MODES.index(kind)),
                                     grid_step=cfg.meta.ci_grid_step, grid_max=cfg.meta.ci_grid_max,
                                     draws=cfg.meta.ci_draws)
        obs_mu, obs_sd = summarize_reference(mi.beta_hat)
        valid = ref.draws[ref.valid]
        cell_cols = [ref.cells.index((w, k)) for w, k in zip(mi.intervention, mi.outcome)]
        null_mu = valid[:, cell_cols].mean(axis=1)
        null_sd = valid[:, cell_cols].std(axis=1, ddof=1)
        out[kind] = {
            "status": "ok",
            **res.scalars(),
            "intervention_level": {"tau2_hat": iv.tau2_hat, "ci_95": list(iv.ci_95), "Q": iv.Q,
                                   "K": iv.K},
            "observed_mu": obs_mu,
            "observed_sigma": obs_sd,
            "p_mu": p_value(obs_mu, null_mu) if null_mu.size else None,
            "p_sigma": p_value(obs_sd, null_sd) if null_sd.size else None,
            "null_replicates_used": int(valid.shape[0]),
            "null_replicates_failed": ref.n_failed,
        }
        with open(ws.root / json_name_m, "w") as fh:
            json.dump(out[kind], fh, indent=2, sort_keys=True)
    ws._meta = out
    return out


def stage_regressions(ws: Workspace) -> dict:
    estimates = read_estimates_csv(ws.path("estimates"))
    table = _estimate_table(estimates)
    with open(ws.path("matching")) as fh:
        matching = json.load(fh)
    sub = table[table["kind"] == "match"].copy()
    out = {}
    if len(sub) < 5:
        return {"status": "skipped", "reason": "too few matched estimates"}
    sub["abs_beta"] = sub["value"].abs()
    sub["violation_count"] = [matching[w]["violation_count"] for w in sub["intervention"]]
    for name in ("outcome_dummies", "sample_size", "violation_count"):
        try:
            out[name] = predict_bias_magnitude(sub, name).to_dict()
        except WSCError as exc:
            out[name] = {"status": "failed", "error": str(exc)}
    with open(ws.path("regressions"), "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
    return out


def recovery_table(ws: Workspace) -> pd.DataFrame:
    """Estimates next to the generator's ground truth for every cell."""
    pop = ws.pop
    estimates = read_estimates_csv(ws.path("estimates"))
    by_key = {(e.intervention_id, e.outcome, e.kind): e for e in estimates}
    rows = []
    for w in ws.interventions():
        for k in OUTCOMES:
            naive = by_key.get((w, k, "naive"))
            match = by_key.get((w, k, "match"))
            dx = du = None
            if naive is not None and match is not None:
                dx, du = decompose_bias(naive, match)
            truth = pop.true_bias[k]
            rows.append({
                "intervention": w,
                "outcome": k,
                "naive": naive.value if naive else None,
                "match": match.value if match else None,
                "match_se": match.se if match else None,
                "delta_x_hat": dx,
                "delta_u_hat": du,
                "true_bias": truth,
                "population_gap": truth + pop.confounded_gap[k],
                "population_x_gap": pop.x_gap[k],
            })
    frame = pd.DataFrame(rows)
    frame.to_csv(ws.path("recovery"), index=False, float_format="%.17g")
    return frame


def _clean(obj):
    """JSON-safe copy: NaN and inf become None, numpy scalars become Python."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def completed_stages(root: Path) -> list:
    marks = {
        "generate": [FILES["snapshot"]],
        "prepare": [FILES["design"]],
        "match": [FILES["matching"]],
        "estimate": [FILES["estimates"]],
        "nullsim": [null_files(m)[1] for m in MODES],
        "meta": [meta_files(m)[0] for m in MODES],
        "regressions": [FILES["regressions"]],
    }
    return [s for s in STAGES if any((root / f).exists() for f in marks[s])]


def build_report(ws: Workspace, error=None) -> dict:
    """Assemble report.json from whatever the output directory holds."""
    root = ws.root
    stages_done = completed_stages(root)
    rec = None
    if (root / FILES["estimates"]).exists() and (root / FILES["snapshot"]).exists():
        rec = recovery_table(ws)
    files = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in (FILES["report"], FILES["timings"]):
            files[str(p.relative_to(root))] = p.stat().st_size
    report = {
        "schema_version": SCHEMA_VERSION,
        "status": "failed" if error else "ok",
        "error": error,
        "stages": list(stages_done),
        "kernel_backend": kernels.BACKEND,
        "scenario": ws.config.to_dict(),
        "files": sorted(files),
        "timings_file": FILES["timings"],
    }
    if (root / FILES["matching"]).exists():
        with open(root / FILES["matching"]) as fh:
            matching = json.load(fh)
        report["balance"] = {
            w: {k: v.get(k) for k in ("status", "spec", "violation_count", "n_covariates",
                                      "violation_counts_by_spec", "n_pairs", "n_unmatched",
                                      "median_candidates", "error") if k in v}
            for w, v in matching.items()
        }
        report["balance_total"] = {
            "violations": int(sum(v.get("violation_count", 0) for v in matching.values())),
            "covariates": int(sum(v.get("n_covariates", 0) for v in matching.values())),
        }
    failures = {}
    if rec is not None:
        report["cells"] = rec.to_dict(orient="records")
        for r in report["cells"]:
            for kind in ("naive", "match"):
                if r[kind] is None or (isinstance(r[kind], float) and math.isnan(r[kind])):
                    failures[f"{r['intervention']}:{r['outcome']}:{kind}"] = "no estimate"
        summary = {}
        for kind in ("naive", "match"):
            vals = rec[kind].dropna().to_numpy(dtype=float)
            if vals.size >= 2:
                mu, sd = summarize_reference(vals)
                summary[kind] = {"mean": mu, "sd": sd, "n": int(vals.size)}
        dx = rec["delta_x_hat"].dropna()
        if len(dx):
            summary["delta_x_hat_mean"] = float(dx.mean())
        summary["true_bias_mean"] = float(rec["true_bias"].mean())
        summary["population_gap_mean"] = float(rec["population_gap"].mean())
        report["estimates_summary"] = summary
    for mode in MODES:
        _, json_name = null_files(mode)
        if (root / json_name).exists():
            with open(root / json_name) as fh:
                s = json.load(fh)
            s.pop("per_cell_variance", None)
            report.setdefault("null", {})[mode] = s
            for r, reason in s.get("failures", {}).items():
                failures[f"null_{mode}:replicate_{r}"] = reason
    for kind in MODES:
        json_name, _ = meta_files(kind)
        if (root / json_name).exists():
            with open(root / json_name) as fh:
                report.setdefault("meta", {})[kind] = json.load(fh)
    if (root / FILES["regressions"]).exists():
        with open(root / FILES["regressions"]) as fh:
            report["regressions"] = json.load(fh)
    report["failures"] = failures
    return _clean(report)


STAGES = ("generate", "prepare", "match", "estimate", "nullsim", "meta", "regressions")


def clear_outputs(root: Path):
    """Remove files a previous run left behind so the report only lists fresh ones."""
    names = [v for v in FILES.values()] + ["design_manifest.json"]
    for m in MODES:
        names += list(null_files(m)) + list(meta_files(m))
    for n in names:
        (root / n).unlink(missing_ok=True)
    for sub in ("balance", "matched", "propensity"):
        d = root / sub
        if d.is_dir():
            for f in d.glob(f"{sub}_*.csv"):
                f.unlink()


def run_pipeline(config: PipelineConfig, out_dir, threads=None) -> dict:
    """Run every stage; on failure keep partial outputs and record the error.

    Returns the report dict (also written to report.json). Wall-clock times
    go to timings.json so the report itself is reproducible byte for byte.
    """
    ws = Workspace(out_dir, config)
    clear_outputs(ws.root)
    error = None
    steps = [
        ("generate", lambda: stage_generate(ws)),
        ("prepare", lambda: stage_prepare(ws)),
        ("match", lambda: stage_match(ws)),
        ("estimate", lambda: stage_estimate(ws)),
    ]
    if config.nullsim.replicates > 0 and config.nullsim.modes:
        steps += [
            ("nullsim", lambda: stage_nullsim(ws, threads=threads)),
            ("meta", lambda: stage_meta(ws)),
        ]
    steps.append(("regressions", lambda: stage_regressions(ws)))
    for name, fn in steps:
        try:
            ws.timed(name, fn)
        except Exception as exc:  # recorded in the report, then re-raised by the CLI
            log.exception("stage %s failed", name)
            error = {"stage": name, "type": type(exc).__name__, "message": str(exc)}
            break
    start = time.perf_counter()
    report = build_report(ws, error)
    write_report(ws, report)
    ws.timings["report"] = round(time.perf_counter() - start, 3)
    with open(ws.path("timings"), "w") as fh:
        json.dump(ws.timings, fh, indent=2)
    return report


def write_report(ws: Workspace, report: dict):
    with open(ws.path("report"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
