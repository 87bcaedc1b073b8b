import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from histmatch.diagnostics import (
    Predictions,
    classification_test,
    comparison_test,
    loo_predictions,
    predictions,
    standardized_errors,
    validation_diagnostics,
)
from histmatch.emulator import Target, TrainedEmulator
from histmatch.errors import NumericDegeneracyError, SchemaError
from histmatch.sims import SIRS_OUTPUTS, SIRS_SPACE, SIRS_TARGETS
from histmatch.space import ParameterSpace, RunTable
from histmatch.training import emulator_from_data

UNIT2 = ParameterSpace(("x1", "x2"), ((-1.0, 1.0), (-1.0, 1.0)))


def _fn(x):
    return np.sin(2 * x[:, 0]) + x[:, 1] ** 2


@pytest.fixture(scope="module")
def toy():
    r = np.random.default_rng(3)
    x = r.uniform(-1, 1, (20, 2))
    runs = RunTable(UNIT2.names, x, ("y",), _fn(x)[:, None])
    em = emulator_from_data(runs, ["y"], UNIT2)["y"]
    xv = r.uniform(-1, 1, (30, 2))
    return em, RunTable(UNIT2.names, xv, ("y",), _fn(xv)[:, None])


def _perfect(n, f):
    z = np.zeros(n)
    return Predictions(np.zeros((n, 2)), f, f.copy(), z, z.copy(), z.copy(), np.zeros(n, dtype=bool))


# -- comparison ----------------------------------------------------------

def test_training_point_passes(toy):
    em, _ = toy
    x = em.train_inputs[:5]
    table = RunTable(UNIT2.names, x, ("y",), em.train_outputs[:5, None])
    assert not comparison_test(em, table).any()
    u, fail, _ = standardized_errors(em, table)
    assert not fail.any()
    np.testing.assert_allclose(u, 0.0, atol=1e-3)


def test_shifted_emulator_fails_everywhere(toy):
    em, valid = toy
    p = predictions(em, valid)
    shifted = dataclasses.replace(p, mean=p.observed + 10 * p.sd)
    assert comparison_test(em, shifted).all()


def test_target_exempts_far_points(toy):
    em, valid = toy
    p = predictions(em, valid)
    shifted = dataclasses.replace(p, mean=p.observed + 10 * p.sd)
    far = Target.value(100.0, 0.1)
    assert not comparison_test(em, shifted, target=far).any()
    assert comparison_test(em, shifted).all()


def test_low_recovered_point_flagged_only_without_targets(sirs_ems):
    # simulator gives about 10 recovered while the target sits near 200
    em = sirs_ems["nR"]
    x = np.array([[0.5, 0.01, 0.02]])
    p = Predictions(x, np.array([10.0]), np.array([60.0]), np.array([100.0]), np.zeros(1), np.zeros(1),
                    np.zeros(1, dtype=bool))
    assert comparison_test(em, p).tolist() == [True]
    assert comparison_test(em, p, target=SIRS_TARGETS["nR"]).tolist() == [False]


# -- classification ----------------------------------------------------------

@given(st.lists(st.floats(-100, 100), min_size=1, max_size=20), st.floats(0.5, 5.0), st.floats(0.0, 4.0))
def test_perfect_emulator_has_no_type1(values, cutoff, disc):
    f = np.array(values)
    p = _perfect(len(f), f)
    assert not classification_test(_DummyEm(disc), p, Target.value(0.0, 1.0), cutoff).any()


class _DummyEm:
    """Stand-in with only what the implausibility helpers read."""

    def __init__(self, disc):
        self.prior = type("P", (), {"discrepancy_var": disc})()


def test_implausibility_identity_for_exact_mean():
    f = np.array([1.0, 4.0, -2.0])
    var_d, var_e, var_s = np.array([0.5, 2.0, 1.0]), 1.5, 0.25
    p = Predictions(np.zeros((3, 2)), f, f.copy(), var_d, np.zeros(3), np.zeros(3), np.zeros(3, dtype=bool))
    from histmatch.diagnostics import _em_implausibility, _sim_implausibility
    em = _DummyEm(var_s)
    t = Target.value(0.5, np.sqrt(var_e))
    lhs = _em_implausibility(p, em, t)
    rhs = _sim_implausibility(p, em, t) * np.sqrt((var_e + var_s) / (var_d + var_e + var_s))
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12)


def test_biased_emulator_at_matching_point_is_type1():
    z = 5.0
    p = Predictions(np.zeros((2, 2)), np.array([z, z]), np.array([z + 50.0, z + 0.1]), np.array([0.01, 0.01]),
                    np.zeros(2), np.zeros(2), np.zeros(2, dtype=bool))
    flags = classification_test(_DummyEm(0.0), p, Target.value(z, 1.0))
    assert flags.tolist() == [True, False]


# -- standardised errors -----------------------------------------------------

def test_u_definition_and_boundary():
    obs = np.array([3.0, 3.0 + 1e-9, 0.0])
    p = Predictions(np.zeros((3, 2)), obs, np.zeros(3), np.ones(3), np.zeros(3), np.zeros(3),
                    np.zeros(3, dtype=bool))
    u, fail, under = standardized_errors(_DummyEm(0.0), p)
    assert u[0] == pytest.approx(3.0)
    assert fail.tolist() == [False, True, False]
    assert not under


def test_underconfidence_flag():
    p = Predictions(np.zeros((3, 2)), np.array([0.1, -0.2, 0.3]), np.zeros(3), np.ones(3), np.zeros(3),
                    np.zeros(3), np.zeros(3, dtype=bool))
    _, _, under = standardized_errors(_DummyEm(0.0), p)
    assert under


def test_zero_sd_off_training_is_degenerate():
    p = Predictions(np.zeros((1, 2)), np.array([1.0]), np.array([0.0]), np.zeros(1), np.zeros(1), np.zeros(1),
                    np.zeros(1, dtype=bool))
    em = _DummyEm(0.0)
    em.output_name = "y"
    with pytest.raises(NumericDegeneracyError):
        standardized_errors(em, p)


# -- leave-one-out -----------------------------------------------------------

def test_loo_matches_independent_refit(toy):
    em, _ = toy
    p = loo_predictions(em)
    r = np.random.default_rng(0)
    for i in r.choice(em.n_train, 5, replace=False):
        keep = np.arange(em.n_train) != i
        sub = TrainedEmulator(em.prior, em.train_inputs[keep], em.train_outputs[keep])
        xi = em.train_inputs[i:i + 1]
        assert p.mean[i] == pytest.approx(sub.get_exp(xi)[0], rel=1e-8, abs=1e-10)
        assert p.var[i] == pytest.approx(sub.get_cov(xi)[0], rel=1e-6, abs=1e-10)


def test_closed_form_loo_matches_refit(toy):
    em, _ = toy
    a = loo_predictions(em, refit_limit=1000)
    b = loo_predictions(em, refit_limit=0)
    np.testing.assert_allclose(b.mean, a.mean, rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(b.var, a.var, rtol=1e-4, atol=1e-8 * em.prior.sigma_sq)


def test_loo_mode_smoke():
    r = np.random.default_rng(5)
    x = r.uniform(-1, 1, (10, 2))
    runs = RunTable(UNIT2.names, x, ("y",), _fn(x)[:, None])
    ems = emulator_from_data(runs, ["y"], UNIT2)
    report = validation_diagnostics(ems)
    assert report.mode == "loo"
    assert len(report.per_emulator[0].standardized) == 10


# -- report ------------------------------------------------------------------

def test_failing_union_is_exact(sirs_ems, sirs_wave0):
    _, valid = sirs_wave0
    report = validation_diagnostics(sirs_ems, None, valid)
    expect = set()
    for d in report.per_emulator:
        for mask in (d.comparison, d.standardized_fail):
            expect.update(np.flatnonzero(mask).tolist())
    assert set(report.failing_rows.tolist()) == expect
    assert len(report.failures.inputs) == len(expect)
    for row in report.failures.inputs:
        assert any(np.array_equal(row, v) for v in valid.matrix(SIRS_SPACE))


def test_classification_needs_targets(sirs_ems, sirs_wave0):
    _, valid = sirs_wave0
    report = validation_diagnostics(sirs_ems, None, valid)
    assert all(d.classification is None for d in report.per_emulator)
    report = validation_diagnostics(sirs_ems, SIRS_TARGETS, valid)
    assert all(d.classification is not None for d in report.per_emulator)


def test_missing_validation_column(sirs_ems, sirs_wave0):
    _, valid = sirs_wave0
    cut = RunTable(valid.input_names, valid.inputs, ("nS",), valid.outputs[:, :1])
    with pytest.raises(SchemaError):
        validation_diagnostics(sirs_ems, None, cut)


def test_plot_table_names(sirs_ems, sirs_wave0):
    _, valid = sirs_wave0
    tables = validation_diagnostics(sirs_ems, SIRS_TARGETS, valid).plot_tables()
    expect = {f"{o}_{t}.csv" for o in SIRS_OUTPUTS for t in ("comparison", "classification", "standardized")}
    assert set(tables) == expect
    header = tables["nI_comparison.csv"].splitlines()[0].split(",")
    assert header[:3] == list(SIRS_SPACE.names)
    assert len(tables["nI_comparison.csv"].splitlines()) == 61


def test_report_dict_is_json_ready(sirs_ems, sirs_wave0):
    import json

    _, valid = sirs_wave0
    d = validation_diagnostics(sirs_ems, SIRS_TARGETS, valid).to_dict()
    json.dumps(d)
    assert d["n_points"] == 60


def test_stochastic_report_uses_replicate_groups():
    from histmatch.sims import GillespieSimulator
    from histmatch.space import latin_hypercube
    from histmatch.training import train_variance_emulators

    sim = GillespieSimulator(reps=8)
    runs = sim(latin_hypercube(30, SIRS_SPACE, seed=1), seed=1)
    ems = train_variance_emulators(runs, list(SIRS_OUTPUTS), SIRS_SPACE)
    valid = sim(latin_hypercube(10, SIRS_SPACE, seed=2), seed=2)
    report = validation_diagnostics(ems, SIRS_TARGETS, valid)
    kinds = {(d.output, d.kind) for d in report.per_emulator}
    assert kinds == {(o, k) for o in SIRS_OUTPUTS for k in ("expectation", "variance")}
    assert len(report.validation_inputs) == 10
    assert "variance_nI_comparison.csv" in report.plot_tables()
