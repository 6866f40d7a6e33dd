"""Synthetic school populations with a known selection mechanism.

Each school carries latent characteristics drawn from a three-factor model
(achievement, deprivation, size). Observed covariates are transforms of those
latents, a scalar hidden confounder ``U`` enters trial selection, and the
untreated outcome of every student in a selected school is shifted by a fixed
amount. That shift is the ground-truth selection bias net of the observables.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.optimize import brentq
from scipy.special import expit

from .errors import ArgumentError, ConfigError

OUTCOMES = ("math", "reading", "writing")

STUDENT_COVARIATES = (
    "achievement_grade2",
    "age",
    "gender",
    "fsm",
    "late",
    "early",
    "metro",
    "small_metro",
    "rural",
)
STUDENT_BINARY = ("gender", "fsm", "late", "early", "metro", "small_metro", "rural")

SCHOOL_COVARIATES = (
    "voluntary",
    "academy_sponsor",
    "academy_converter",
    "ofsted",
    "school_size",
    "income",
    "outside_budget",
    "ta_percent",
    "pupil_teacher_ratio",
    "crime",
    "housing",
    "idaci",
)
SCHOOL_BINARY = ("voluntary", "academy_sponsor", "academy_converter")
BUDGET_COVARIATES = ("income", "outside_budget")

HISTORY_YEARS = 6

# Loadings of each latent school trait on (achievement, deprivation, size).
# Every latent has unit variance; the remainder is idiosyncratic noise.
LATENT_LOADINGS = {
    "academic_level": (0.85, -0.30, 0.00),
    "academic_growth": (0.20, 0.00, 0.00),
    "grade_level_growth": (0.15, 0.00, 0.00),
    "grade2_mean": (0.75, -0.35, 0.00),
    "fsm_rate": (-0.35, 0.80, 0.00),
    "idaci": (-0.25, 0.85, 0.00),
    "crime": (0.00, 0.50, 0.20),
    "housing": (0.00, 0.40, 0.30),
    "school_size": (0.00, 0.00, 0.90),
    "income": (0.00, 0.55, -0.30),
    "outside_budget": (0.00, 0.30, 0.30),
    "ta_percent": (0.00, 0.30, 0.00),
    "pupil_teacher_ratio": (0.10, -0.30, 0.40),
    "ofsted": (-0.55, 0.20, 0.00),
    "governance": (-0.40, 0.30, 0.00),
    "rurality": (0.10, -0.30, -0.60),
}
LATENTS = tuple(LATENT_LOADINGS)

# Weights of the latents in the school-level part of every outcome, rescaled
# at generation time so the signal variance hits its share of the ICC.
OUTCOME_SIGNAL_WEIGHTS = {
    "academic_level": 0.70,
    "grade2_mean": 0.40,
    "fsm_rate": -0.20,
    "idaci": -0.15,
    "ofsted": -0.10,
    "academic_growth": 0.10,
}

SELECTION_NAMES = LATENTS + SCHOOL_BINARY

GRADE2_SCHOOL_LOADING = 0.55
GRADE2_WITHIN_SD = math.sqrt(1.0 - GRADE2_SCHOOL_LOADING**2)
FSM_WITHIN_EFFECT = -0.15
OUTCOME_SCHOOL_CORR = 0.7
OUTCOME_STUDENT_CORR = 0.5
RURALITY_CATEGORIES = ("urban", "metro", "small_metro", "rural")


@dataclass(frozen=True)
class ScenarioConfig:
    """Parameters of one synthetic scenario.

    ``n_trial_controls`` is the number of experimental control schools per
    intervention (each trial also has the same number of treated schools);
    ``trial_sizes`` overrides it per intervention.
    """

    n_schools: int = 2000
    students_per_school_mean: float = 30.0
    students_per_school_dispersion: float = 8.0
    n_trial_controls: int = 15
    n_interventions: int = 14
    trial_sizes: tuple[int, ...] | None = None
    outcome_icc: float = 0.25
    covariate_signal_share: float = 0.6
    within_signal_share: float = 0.5
    selection_coefficients: dict[str, float] = field(default_factory=dict)
    hidden_selection_weight: float = 1.0
    hidden_confounder_strength: float = 0.0
    n_outcomes: int = 3
    missingness_rate: float = 0.0
    short_history_rate: float = 0.02
    empty_history_rate: float = 0.0
    oversubscription: float = 1.25
    t_star: int = 2014
    rng_seed: int = 0

    def __post_init__(self):
        if self.trial_sizes is not None:
            object.__setattr__(self, "trial_sizes", tuple(int(v) for v in self.trial_sizes))
        object.__setattr__(
            self,
            "selection_coefficients",
            {str(k): float(v) for k, v in dict(self.selection_coefficients).items()},
        )
        self.validate()

    @property
    def intervention_sizes(self) -> tuple[int, ...]:
        if self.trial_sizes is not None:
            return self.trial_sizes
        return (self.n_trial_controls,) * self.n_interventions

    @property
    def intervention_ids(self) -> tuple[str, ...]:
        return tuple(f"w{i + 1:02d}" for i in range(len(self.intervention_sizes)))

    def validate(self):
        if self.n_schools < 2:
            raise ConfigError("n_schools", "must be at least 2")
        if self.students_per_school_mean < 1:
            raise ConfigError("students_per_school_mean", "must be at least 1")
        if self.students_per_school_dispersion <= 0:
            raise ConfigError("students_per_school_dispersion", "must be positive")
        if self.n_trial_controls < 1 or self.n_trial_controls >= self.n_schools:
            raise ConfigError("n_trial_controls", "must satisfy 1 <= n_trial_controls < n_schools")
        if self.n_interventions < 1:
            raise ConfigError("n_interventions", "must be at least 1")
        if self.trial_sizes is not None:
            if len(self.trial_sizes) == 0 or min(self.trial_sizes) < 1:
                raise ConfigError("trial_sizes", "needs positive sizes")
            if max(self.trial_sizes) >= self.n_schools:
                raise ConfigError("trial_sizes", "each size must be below n_schools")
        if 2 * sum(self.intervention_sizes) >= self.n_schools:
            raise ConfigError("n_trial_controls", "trials would use up the whole population")
        if not 0.0 <= self.outcome_icc < 1.0:
            raise ConfigError("outcome_icc", "must lie in [0, 1)")
        for name in ("covariate_signal_share", "within_signal_share"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(name, "must lie in [0, 1)")
        if not 0.0 <= self.missingness_rate <= 0.1:
            raise ConfigError("missingness_rate", "must lie in [0, 0.1]")
        for name in ("short_history_rate", "empty_history_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(name, "must lie in [0, 1]")
        if self.n_outcomes != 3:
            raise ConfigError("n_outcomes", "is fixed at 3 (math, reading, writing)")
        if self.oversubscription < 1.0:
            raise ConfigError("oversubscription", "must be at least 1")
        unknown = set(self.selection_coefficients) - set(SELECTION_NAMES)
        if unknown:
            raise ConfigError("selection_coefficients", f"unknown covariates {sorted(unknown)}")
        for name in ("hidden_selection_weight", "hidden_confounder_strength"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(name, "must be finite")
        if not 0 <= self.rng_seed < 2**64:
            raise ConfigError("rng_seed", "must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["trial_sizes"] = list(self.trial_sizes) if self.trial_sizes is not None else None
        out["selection_coefficients"] = dict(self.selection_coefficients)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown scenario field")
        kwargs = dict(data)
        for f in dataclasses.fields(cls):
            if f.name not in kwargs:
                continue
            value = kwargs[f.name]
            try:
                if f.type in ("int",) and value is not None:
                    if isinstance(value, bool) or float(value) != int(value):
                        raise ValueError
                    kwargs[f.name] = int(value)
                elif f.type in ("float",) and value is not None:
                    kwargs[f.name] = float(value)
            except (TypeError, ValueError):
                raise ConfigError(f.name, f"cannot interpret {value!r}") from None
        return cls(**kwargs)

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class PopulationSnapshot:
    """One generated cohort.

    ``schools`` has one row per school (index-free, ``school_id`` column),
    ``students`` one row per student. ``true_bias`` is the hidden shift of
    selected schools in effect-size units. ``confounded_gap`` is the
    student-level S=1 minus S=0 mean difference of everything else in the
    outcome (observable signal, school effects, noise), so that the raw gap
    equals ``true_bias + confounded_gap``. ``x_gap`` is the part of that gap
    carried by the covariate signal alone.
    """

    config: ScenarioConfig
    schools: pd.DataFrame
    students: pd.DataFrame
    true_bias: dict[str, float]
    confounded_gap: dict[str, float]
    x_gap: dict[str, float]

    @property
    def history_years(self) -> list[int]:
        t = self.config.t_star
        return list(range(t - HISTORY_YEARS, t))

    def selected_ids(self) -> list[str]:
        return self.schools.loc[self.schools["selected"].astype(bool), "school_id"].tolist()

    def pool_ids(self) -> list[str]:
        return self.schools.loc[~self.schools["selected"].astype(bool), "school_id"].tolist()

    def trial_controls(self, intervention: str) -> list[str]:
        s = self.schools
        mask = (s["intervention"] == intervention) & (s["trial_role"] == "control")
        return s.loc[mask, "school_id"].tolist()

    def trial_schools(self, intervention: str) -> list[str]:
        s = self.schools
        return s.loc[s["intervention"] == intervention, "school_id"].tolist()

    def outcome_sd(self) -> dict[str, float]:
        """Pooled population SD of each outcome (the effect-size unit)."""
        return {k: float(self.students[f"y_{k}"].std(ddof=1)) for k in OUTCOMES}

    def copy(self) -> "PopulationSnapshot":
        return PopulationSnapshot(
            config=self.config,
            schools=self.schools.copy(),
            students=self.students.copy(),
            true_bias=dict(self.true_bias),
            confounded_gap=dict(self.confounded_gap),
            x_gap=dict(self.x_gap),
        )


def _stream(seed: int, stage: int) -> np.random.Generator:
    # Counter-based generator keyed by (seed, stage): stages never share state.
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(stage,))))


def _latent_correlation() -> np.ndarray:
    lam = np.array([LATENT_LOADINGS[n] for n in LATENTS])
    return lam @ lam.T + np.diag(1.0 - np.sum(lam**2, axis=1))


def _equicorrelated(rng, n, k, rho, sd):
    corr = np.full((k, k), rho) + np.eye(k) * (1 - rho)
    chol = np.linalg.cholesky(corr)
    return sd * rng.standard_normal((n, k)) @ chol.T


def _cut(values, thresholds):
    return np.searchsorted(np.asarray(thresholds), values, side="right")


def generate_population(config: ScenarioConfig) -> PopulationSnapshot:
    """Draw a full population for ``config``; deterministic in ``rng_seed``."""
    config.validate()
    seed = config.rng_seed
    n = config.n_schools
    width = max(5, len(str(n)))
    school_ids = np.array([f"SCH{i + 1:0{width}d}" for i in range(n)])

    # --- school latents
    rng = _stream(seed, 0)
    lam = np.array([LATENT_LOADINGS[name] for name in LATENTS])
    factors = rng.standard_normal((n, lam.shape[1]))
    unique_sd = np.sqrt(1.0 - np.sum(lam**2, axis=1))
    z = factors @ lam.T + rng.standard_normal((n, len(LATENTS))) * unique_sd
    latent = dict(zip(LATENTS, z.T))
    hidden_u = rng.standard_normal(n)

    # --- observed school covariates
    rng = _stream(seed, 1)
    gov = latent["governance"]
    sponsor = (gov > 1.5).astype(float)
    converter = ((gov < -1.1) & (sponsor == 0)).astype(float)
    voluntary = ((sponsor == 0) & (converter == 0) & (rng.random(n) < 0.3)).astype(float)
    rurality = _cut(latent["rurality"], [-0.5, 0.4, 1.0])
    outside = np.exp(5.5 + 0.5 * latent["outside_budget"])
    outside[rng.random(n) < 0.03] = 0.0
    school_cov = {
        "voluntary": voluntary,
        "academy_sponsor": sponsor,
        "academy_converter": converter,
        "ofsted": 1.0 + _cut(latent["ofsted"], [-1.2, 0.5, 1.6]),
        "school_size": np.round(np.exp(5.35 + 0.4 * latent["school_size"])),
        "income": np.exp(8.4 + 0.12 * latent["income"]),
        "outside_budget": outside,
        "ta_percent": expit(-0.6 + 0.4 * latent["ta_percent"]),
        "pupil_teacher_ratio": 21.0 + 2.5 * latent["pupil_teacher_ratio"],
        "crime": latent["crime"].copy(),
        "housing": latent["housing"].copy(),
        "idaci": expit(-1.5 + 0.8 * latent["idaci"]),
    }

    # --- cohort sizes and students
    rng = _stream(seed, 2)
    k = config.students_per_school_dispersion
    m = config.students_per_school_mean
    n_students = 1 + rng.negative_binomial(k, k / (k + max(m - 1.0, 1e-9)), size=n)
    owner = np.repeat(np.arange(n), n_students)
    n_total = owner.size
    fsm_p = expit(-1.8 + 0.9 * latent["fsm_rate"])
    grade2_dev = rng.standard_normal(n_total) * GRADE2_WITHIN_SD
    student_cat = rurality[owner].copy()
    moved = rng.random(n_total) < 0.15
    student_cat[moved] = rng.integers(0, len(RURALITY_CATEGORIES), size=int(moved.sum()))
    students = {
        "achievement_grade2": GRADE2_SCHOOL_LOADING * latent["grade2_mean"][owner] + grade2_dev,
        "age": 120.0 + 12.0 * rng.random(n_total),
        "gender": (rng.random(n_total) < 0.49).astype(float),
        "fsm": (rng.random(n_total) < fsm_p[owner]).astype(float),
        "late": (rng.random(n_total) < 0.01).astype(float),
        "early": (rng.random(n_total) < 0.005).astype(float),
        "metro": (student_cat == 1).astype(float),
        "small_metro": (student_cat == 2).astype(float),
        "rural": (student_cat == 3).astype(float),
    }

    # --- untreated outcomes (before the hidden shift)
    rng = _stream(seed, 3)
    icc = config.outcome_icc
    corr = _latent_correlation()
    weights = np.array([OUTCOME_SIGNAL_WEIGHTS.get(name, 0.0) for name in LATENTS])
    v_school_signal = config.covariate_signal_share * icc
    raw_var = float(weights @ corr @ weights)
    school_signal = z @ weights * math.sqrt(v_school_signal / raw_var)
    school_effects = _equicorrelated(rng, n, 3, OUTCOME_SCHOOL_CORR, math.sqrt(icc - v_school_signal))
    v_within_signal = config.within_signal_share * (1.0 - icc)
    fsm_var = float(np.mean(fsm_p * (1 - fsm_p)))
    phi2 = max(v_within_signal - FSM_WITHIN_EFFECT**2 * fsm_var, 0.0) / GRADE2_WITHIN_SD**2
    within_signal = math.sqrt(phi2) * grade2_dev + FSM_WITHIN_EFFECT * (
        students["fsm"] - fsm_p[owner]
    )
    noise = _equicorrelated(
        rng, n_total, 3, OUTCOME_STUDENT_CORR, math.sqrt(1.0 - icc - v_within_signal)
    )
    x_signal = school_signal[owner] + within_signal
    y_base = x_signal[:, None] + school_effects[owner] + noise

    # --- selection into trials
    rng = _stream(seed, 4)
    index = config.hidden_selection_weight * hidden_u
    for name, coef in config.selection_coefficients.items():
        values = latent[name] if name in latent else school_cov[name]
        index = index + coef * values
    sizes = config.intervention_sizes
    n_needed = 2 * sum(sizes)
    target = min(config.oversubscription * n_needed, 0.98 * n)
    intercept = brentq(lambda a: expit(a + index).sum() - target, -60.0, 60.0)
    prob = expit(intercept + index)
    selected = rng.random(n) < prob
    short = n_needed - int(selected.sum())
    if short > 0:
        # top up by probability-weighted draws so every trial seat is filled
        rest = np.flatnonzero(~selected)
        w = prob[rest] + 1e-300
        selected[rng.choice(rest, size=short, replace=False, p=w / w.sum())] = True
    chosen = rng.permutation(np.flatnonzero(selected))[:n_needed]
    intervention = np.full(n, "", dtype=object)
    role = np.full(n, "", dtype=object)
    start = 0
    for wid, size in zip(config.intervention_ids, sizes):
        block = chosen[start : start + 2 * size]
        start += 2 * size
        intervention[block] = wid
        role[block[:size]] = "control"
        role[block[size:]] = "treated"
    treated = role == "treated"

    # --- pre-period achievement histories
    rng = _stream(seed, 5)
    years = np.arange(-HISTORY_YEARS + 1, 1)  # relative to t* - 1
    level = 0.6 * latent["academic_level"]
    growth = 0.06 * latent["academic_growth"]
    curve = rng.normal(0.0, 0.002, n)
    se = 0.7 / np.sqrt(n_students)
    points = (
        level[:, None]
        + growth[:, None] * years
        + curve[:, None] * years**2
        + rng.standard_normal((n, years.size)) * se[:, None]
    )
    gl_growth = 0.05 * latent["grade_level_growth"]
    share = expit(0.8 + 0.9 * level[:, None] + gl_growth[:, None] * years)
    share = np.clip(share + rng.standard_normal((n, years.size)) * 0.5 * se[:, None], 0.0, 1.0)
    n_years = np.full(n, HISTORY_YEARS)
    draw = rng.random(n)
    short = draw < config.short_history_rate
    n_years[short] = rng.integers(1, 3, size=int(short.sum()))
    n_years[draw > 1.0 - config.empty_history_rate] = 0
    n_years[selected & (n_years == 0)] = 1
    missing_years = years[None, :] < (1 - n_years)[:, None]
    points[missing_years] = np.nan
    share[missing_years] = np.nan

    # --- MCAR missingness
    rng = _stream(seed, 6)
    if config.missingness_rate > 0:
        for name in SCHOOL_COVARIATES:
            school_cov[name][rng.random(n) < config.missingness_rate] = np.nan
        for name in ("achievement_grade2", "age", "fsm"):
            students[name][rng.random(n_total) < config.missingness_rate] = np.nan

    # --- assemble
    shift = config.hidden_confounder_strength
    s_student = selected[owner]
    y = y_base + shift * s_student[:, None]
    true_bias = {k: float(shift) for k in OUTCOMES}
    confounded_gap, x_gap = {}, {}
    for j, k in enumerate(OUTCOMES):
        confounded_gap[k] = _group_gap(y_base[:, j], s_student)
        x_gap[k] = _group_gap(x_signal, s_student)

    schools = pd.DataFrame({"school_id": school_ids})
    schools["hidden_u"] = hidden_u
    schools["selected"] = selected.astype(int)
    schools["treated"] = treated.astype(int)
    schools["intervention"] = intervention
    schools["trial_role"] = role
    schools["n_students"] = n_students
    for name in SCHOOL_COVARIATES:
        schools[name] = school_cov[name]
    t_star = config.t_star
    for i, rel in enumerate(years):
        schools[f"points_{t_star - 1 + rel}"] = points[:, i]
    for i, rel in enumerate(years):
        schools[f"grade_level_{t_star - 1 + rel}"] = share[:, i]

    student_width = max(7, len(str(n_total)))
    stud = pd.DataFrame(
        {
            "student_id": [f"STU{i + 1:0{student_width}d}" for i in range(n_total)],
            "school_id": school_ids[owner],
        }
    )
    for name in STUDENT_COVARIATES:
        stud[name] = students[name]
    for j, k in enumerate(OUTCOMES):
        stud[f"y_{k}"] = y[:, j]

    return PopulationSnapshot(
        config=config,
        schools=schools,
        students=stud,
        true_bias=true_bias,
        confounded_gap=confounded_gap,
        x_gap=x_gap,
    )


def _group_gap(values, mask):
    return float(values[mask].mean() - values[~mask].mean())


def inject_hidden_confounder(
    pop: PopulationSnapshot, shift: float, outcome_subset
) -> PopulationSnapshot:
    """Return a copy with selected schools' outcomes shifted by ``shift``."""
    subset = set(outcome_subset)
    if not subset:
        raise ArgumentError("outcome_subset must name at least one outcome")
    unknown = subset - set(OUTCOMES)
    if unknown:
        raise ArgumentError(f"unknown outcomes {sorted(unknown)}")
    out = pop.copy()
    selected = set(out.selected_ids())
    mask = out.students["school_id"].isin(selected).to_numpy()
    for k in OUTCOMES:
        if k in subset:
            out.students.loc[mask, f"y_{k}"] += shift
            out.true_bias[k] = pop.true_bias[k] + shift
    return out


def draw_trial_controls(
    pop: PopulationSnapshot, n_w: int, seed: int, mode: str = "placebo"
) -> list[str]:
    """Simple random sample of ``n_w`` school ids without replacement.

    ``mode="placebo"`` samples from the comparison pool (S=0),
    ``mode="selected"`` from the selected schools (S=1).
    """
    if mode == "placebo":
        frame = pop.pool_ids()
    elif mode == "selected":
        frame = pop.selected_ids()
    else:
        raise ArgumentError(f"unknown sampling mode {mode!r}")
    if n_w < 0 or n_w > len(frame):
        raise ArgumentError(f"cannot draw {n_w} schools from a set of {len(frame)}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    picked = rng.choice(len(frame), size=n_w, replace=False)
    return sorted(frame[i] for i in picked)


# --- persistence ----------------------------------------------------------

FLOAT_FORMAT = "%.17g"


def save_snapshot(pop: PopulationSnapshot, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "schools": out / "schools.csv",
        "students": out / "students.csv",
        "sidecar": out / "snapshot.json",
    }
    pop.schools.to_csv(paths["schools"], index=False, float_format=FLOAT_FORMAT)
    pop.students.to_csv(paths["students"], index=False, float_format=FLOAT_FORMAT)
    sidecar = {
        "format": "wscbias-snapshot/1",
        "config": pop.config.to_dict(),
        "true_bias": pop.true_bias,
        "confounded_gap": pop.confounded_gap,
        "x_gap": pop.x_gap,
    }
    paths["sidecar"].write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return paths


def load_snapshot(in_dir) -> PopulationSnapshot:
    src = Path(in_dir)
    sidecar = json.loads((src / "snapshot.json").read_text())
    schools = pd.read_csv(
        src / "schools.csv",
        dtype={"school_id": str, "intervention": str, "trial_role": str},
        keep_default_na=False,
        na_values=[""],
        float_precision="round_trip",
    )
    for col in ("intervention", "trial_role"):
        schools[col] = schools[col].fillna("").astype(object)
    students = pd.read_csv(src / "students.csv", dtype={"student_id": str, "school_id": str},
                           float_precision="round_trip")
    return PopulationSnapshot(
        config=ScenarioConfig.from_dict(sidecar["config"]),
        schools=schools,
        students=students,
        true_bias={k: float(v) for k, v in sidecar["true_bias"].items()},
        confounded_gap={k: float(v) for k, v in sidecar["confounded_gap"].items()},
        x_gap={k: float(v) for k, v in sidecar["x_gap"].items()},
    )
