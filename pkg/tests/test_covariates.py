import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from wscbias.covariates import (
    aggregate_to_school,
    export_design,
    fit_growth_covariates,
    load_design,
    prepare_design,
)
from wscbias.errors import ArgumentError
from wscbias.synthpop import ScenarioConfig, generate_population


def test_school_mean_of_binary_covariate():
    students = pd.DataFrame({"student_id": ["a", "b", "c", "d"], "school_id": ["S1"] * 4,
                             "gender": [1, 0, 1, 0]})
    means, warnings = aggregate_to_school(students, covariates=["gender"])
    assert means.loc["S1", "gender"] == 0.5
    assert warnings == []


def test_single_student_school_keeps_values():
    students = pd.DataFrame({"student_id": ["a"], "school_id": ["S9"], "age": [10.25],
                             "fsm": [1.0]})
    means, _ = aggregate_to_school(students, covariates=["age", "fsm"])
    assert means.loc["S9"].tolist() == [10.25, 1.0]


def test_school_means_match_hand_recomputation():
    rows = [("S1", 1, 0.2, 1), ("S1", 0, -0.4, 0), ("S2", 1, 1.5, 1), ("S3", 0, 0.0, 0),
            ("S3", 0, 0.3, 1), ("S3", 1, np.nan, 1)]
    students = pd.DataFrame(rows, columns=["school_id", "gender", "achievement_grade2", "fsm"])
    students["student_id"] = [f"p{i}" for i in range(len(rows))]
    means, _ = aggregate_to_school(students, covariates=["gender", "achievement_grade2", "fsm"])
    # spreadsheet-style: sum of observed / count of observed
    assert means.loc["S1", "achievement_grade2"] == pytest.approx((0.2 - 0.4) / 2)
    assert means.loc["S2", "gender"] == 1.0
    assert means.loc["S3", "achievement_grade2"] == pytest.approx(0.15)
    assert means.loc["S3", "fsm"] == pytest.approx(2 / 3)


def test_requested_school_without_students_is_reported():
    students = pd.DataFrame({"student_id": ["a"], "school_id": ["S1"], "gender": [1]})
    means, warnings = aggregate_to_school(students, ["S1", "S2"], ["gender"])
    assert list(means.index) == ["S1"]
    assert len(warnings) == 1 and "S2" in warnings[0]


def test_aggregation_rejects_empty_input():
    with pytest.raises(ArgumentError):
        aggregate_to_school(pd.DataFrame(columns=["school_id", "gender"]))


@settings(max_examples=25, deadline=None)
@given(st.permutations(list(range(8))))
def test_aggregation_ignores_row_order(perm):
    base = pd.DataFrame({"student_id": [f"s{i}" for i in range(8)],
                         "school_id": ["A", "A", "B", "B", "B", "C", "C", "C"],
                         "age": [0.1, 0.7, 0.3, 0.35, 0.9, 0.11, 0.2, 0.4]})
    a, _ = aggregate_to_school(base, covariates=["age"])
    b, _ = aggregate_to_school(base.iloc[list(perm)], covariates=["age"])
    pd.testing.assert_frame_equal(a, b)


def test_linear_history_gives_its_slope():
    h = pd.DataFrame({2010: [0.10], 2011: [0.12], 2012: [0.14], 2013: [0.16]}, index=["A"])
    fit = fit_growth_covariates(h, 2014)
    assert fit.table.loc["A", "growth"] == pytest.approx(0.02, abs=1e-12)
    assert fit.table.loc["A", "level"] == pytest.approx(0.16, abs=1e-12)
    assert fit.raw_coefficients.loc["A", "b2"] == pytest.approx(0.0, abs=1e-12)


def test_two_year_history_uses_constant_change():
    h = pd.DataFrame({2012: [0.10], 2013: [0.16]}, index=["A"])
    row = fit_growth_covariates(h, 2014).table.loc["A"]
    assert row["growth"] == pytest.approx(0.06)
    assert row["level"] == 0.16
    assert row["method"] == "two_year"


def test_one_year_history_takes_pooled_growth():
    h = pd.DataFrame({2010: [0.0, np.nan], 2011: [0.05, np.nan], 2012: [0.1, np.nan],
                      2013: [0.15, 0.4]}, index=["A", "B"])
    t = fit_growth_covariates(h, 2014).table
    assert t.loc["B", "method"] == "one_year"
    assert t.loc["B", "level"] == 0.4
    assert t.loc["B", "growth"] == pytest.approx(t.loc["A", "growth"])


def test_school_without_history_is_dropped():
    h = pd.DataFrame({2012: [np.nan, 0.1], 2013: [np.nan, 0.2]}, index=["A", "B"])
    fit = fit_growth_covariates(h, 2014)
    assert "A" in fit.dropped and "A" not in fit.table.index


def test_history_after_t_star_rejected():
    with pytest.raises(ArgumentError):
        fit_growth_covariates(pd.DataFrame({2014: [0.1]}, index=["A"]), 2014)


def _gls_oracle(h, t_star, gamma_unused, tau, sigma2):
    """Marginal-likelihood GLS for the mean curve and BLUPs for each school."""
    rel = np.array(h.columns, dtype=float) - (t_star - 1)
    blocks = []
    for sid, row in h.iterrows():
        ok = row.notna().to_numpy() & (rel > -4)
        u = rel[ok]
        X = np.column_stack([np.ones_like(u), u, u * u])
        V = X @ tau @ X.T + sigma2 * np.eye(len(u))
        blocks.append((sid, X, row.to_numpy()[ok], np.linalg.inv(V)))
    A = sum(X.T @ Vi @ X for _, X, _, Vi in blocks)
    b = sum(X.T @ Vi @ y for _, X, y, Vi in blocks)
    gamma = np.linalg.solve(A, b)
    out = {sid: gamma + tau @ X.T @ Vi @ (y - X @ gamma) for sid, X, y, Vi in blocks}
    return gamma, out


def test_growth_fit_matches_dense_gls_on_toy_panel():
    rng = np.random.default_rng(5)
    years = [2008, 2009, 2010, 2011, 2012, 2013]
    data = {}
    for i in range(5):
        level = rng.normal(0, 0.3)
        slope = rng.normal(0.02, 0.02)
        data[f"S{i}"] = [level + slope * (y - 2013) + rng.normal(0, 0.03) for y in years]
    h = pd.DataFrame(data, index=years).T
    h.iloc[4, 2] = np.nan  # one school with three usable window years
    fit = fit_growth_covariates(h, 2014)
    gamma, blups = _gls_oracle(h, 2014, fit.gamma, fit.tau, fit.sigma2)
    np.testing.assert_allclose(fit.gamma, gamma, atol=1e-10)
    for sid, b in blups.items():
        assert fit.table.loc[sid, "level"] == pytest.approx(b[0], abs=1e-10)
        assert fit.table.loc[sid, "growth"] == pytest.approx(b[1] - 3 * b[2], abs=1e-10)


def test_design_is_standardized(small_design):
    f = small_design.features
    for c in small_design.continuous:
        assert f[c].mean() == pytest.approx(0, abs=1e-12)
        assert f[c].std(ddof=0) == pytest.approx(1, abs=1e-12)
    for c in small_design.binary:
        assert set(f[c].unique()) <= {0.0, 1.0}
    assert list(f.index) == sorted(f.index)
    assert f.notna().all().all()


def test_constant_column_excluded_with_warning(small_pop):
    pop = small_pop.copy()
    pop.schools["crime"] = 1.5
    d = prepare_design(pop)
    assert "crime" not in d.names
    assert any("crime" in w for w in d.warnings)


def test_zero_budget_maps_to_zero(small_pop):
    pop = small_pop.copy()
    sid = pop.schools["school_id"].iloc[3]
    pop.schools.loc[pop.schools["school_id"] == sid, "income"] = 0.0
    d = prepare_design(pop)
    assert d.raw.loc[sid, "income"] == 0.0
    assert d.info("income").transform == "log1p+standardize"


def test_missing_values_imputed_with_observed_column_mean():
    pop = generate_population(ScenarioConfig(n_schools=500, n_trial_controls=5, n_interventions=2,
                                             missingness_rate=0.02, rng_seed=21))
    d = prepare_design(pop)
    schools = pop.schools.set_index("school_id").loc[d.raw.index]
    for name in ("crime", "ta_percent", "pupil_teacher_ratio"):
        miss = schools[name].isna()
        assert miss.any()
        expected = schools[name].mean()  # mean over observed entries
        np.testing.assert_allclose(d.raw.loc[miss, name], expected, rtol=0, atol=1e-12)
        assert d.missing.loc[miss, name].all()


def test_pool_school_without_history_dropped(small_pop):
    pop = small_pop.copy()
    sid = pop.pool_ids()[0]
    cols = [c for c in pop.schools.columns if c.startswith("points_")]
    pop.schools.loc[pop.schools["school_id"] == sid, cols] = np.nan
    d = prepare_design(pop)
    assert sid not in d.features.index
    assert sid in d.dropped


def test_design_round_trip(tmp_path, small_design):
    export_design(small_design, tmp_path)
    back = load_design(tmp_path)
    pd.testing.assert_frame_equal(back.features, small_design.features)
    assert [c.to_dict() for c in back.columns] == [c.to_dict() for c in small_design.columns]
    assert back.indicators == small_design.indicators
