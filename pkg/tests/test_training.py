import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from histmatch.correlation import Correlator, kernel_matrix
from histmatch.emulator import CONSTANT, Term, TrainedEmulator, design_matrix
from histmatch.errors import InsufficientDataError, SchemaError
from histmatch.sims import SIRS_OUTPUTS, SIRS_SPACE, sirs_deterministic_batch
from histmatch.space import ParameterSpace, RunTable, latin_hypercube
from histmatch.training import (
    EmulatorSet,
    TrainingError,
    TrainingOptions,
    candidate_terms,
    derive_actives,
    emulator_from_data,
    estimate_hyperparameters,
    fit_regression,
    train_variance_emulators,
)

LINE = ParameterSpace(("x",), ((0.0, 4.0),))
UNIT2 = ParameterSpace(("x1", "x2"), ((-1.0, 1.0), (-1.0, 1.0)))


def _table(space, x, **outputs):
    names = tuple(outputs)
    return RunTable(space.names, x, names, np.column_stack([outputs[k] for k in names]))


# -- options ---------------------------------------------------------------

@pytest.mark.parametrize("bad", [
    {"beta_mode": "flat"},
    {"variance_explained_threshold": 1.0},
    {"theta_bounds": (1.0, 0.5)},
    {"nugget_bounds": (0.0, 0.5)},
    {"nugget_bounds": (0.1, 1.5)},
    {"likelihood": "bayes"},
    {"kernel_kind": "spline"},
])
def test_options_reject_invalid(bad):
    with pytest.raises(ValueError):
        TrainingOptions(**bad)


def test_default_theta_bounds_follow_cubic_roots():
    roots = np.cos((2 * np.arange(3) + 1) * np.pi / 6)
    gaps = np.abs(roots[:, None] - roots[None, :])
    lo, hi = TrainingOptions().theta_bounds
    assert hi == pytest.approx(gaps.max())
    assert lo == pytest.approx(hi / 3)


# -- regression ----------------------------------------------------------

def test_candidate_terms_count():
    assert len(candidate_terms(3)) == 1 + 3 + 3 + 3
    assert len(candidate_terms(1)) == 3


def test_linear_data_recovers_exact_fit():
    x = np.linspace(0.0, 4.0, 12)[:, None]
    u = LINE.scale(x)[:, 0]
    fit = fit_regression(_table(LINE, x, y=2 * u), "y", LINE)
    assert set(fit.basis) == {CONSTANT, Term("linear", 0)}
    coef = dict(zip(fit.basis, fit.coefficients))
    # closed-form least squares on [1, u]
    g = np.column_stack([np.ones_like(u), u])
    expect = np.linalg.solve(g.T @ g, g.T @ (2 * u))
    assert coef[Term("linear", 0)] == pytest.approx(expect[1], abs=1e-8)
    assert coef[Term("linear", 0)] == pytest.approx(2.0, abs=1e-8)
    assert np.std(fit.residuals) < 1e-10
    assert fit.direction == "delete"  # 12 runs, 3 candidates


def test_constant_output_keeps_only_intercept(rng):
    x = rng.uniform(-1, 1, (20, 2))
    fit = fit_regression(_table(UNIT2, x, y=np.full(20, 3.5)), "y", UNIT2)
    assert fit.basis == (CONSTANT,)
    assert fit.coefficients[0] == pytest.approx(3.5)
    assert not fit.actives.any()


def test_too_few_runs():
    x = np.array([[0.0, 0.0], [0.5, 0.5], [-0.5, 0.2]])
    with pytest.raises(InsufficientDataError):
        fit_regression(_table(UNIT2, x, y=np.arange(3.0)), "y", UNIT2)


def test_full_quadratic_reproduced_with_zero_threshold(rng):
    space = ParameterSpace(("a", "b", "c"), ((0, 1), (-2, 2), (5, 10)))
    x = space.unscale(rng.uniform(-1, 1, (80, 3)))
    u = space.scale(x)
    cands = candidate_terms(3)
    g = design_matrix(cands, u)
    beta = rng.uniform(1.0, 3.0, len(cands)) * rng.choice([-1, 1], len(cands))
    y = g @ beta + 0.01 * rng.standard_normal(80)
    fit = fit_regression(_table(space, x, y=y), "y", space,
                         TrainingOptions(variance_explained_threshold=0.0))
    assert fit.direction == "delete"
    assert list(fit.basis) == cands
    expect, *_ = np.linalg.lstsq(g, y, rcond=None)
    np.testing.assert_allclose(fit.coefficients, expect, rtol=1e-8, atol=1e-10)


def test_pruning_drops_tiny_terms(rng):
    x = rng.uniform(-1, 1, (40, 2))
    y = 5 * x[:, 0] + 1e-3 * x[:, 1] + 1e-4 * rng.standard_normal(40)
    fit = fit_regression(_table(UNIT2, x, y=y), "y", UNIT2)
    assert Term("linear", 0) in fit.basis
    assert all(1 not in t.variables for t in fit.basis)


def test_sirs_nI_basis(sirs_wave0):
    train, _ = sirs_wave0
    fit = fit_regression(train, "nI", SIRS_SPACE)
    need = {Term("linear", 0), Term("linear", 1), Term("quadratic", 1), Term("interaction", 0, 1)}
    assert need <= set(fit.basis)
    assert all(2 not in t.variables for t in fit.basis)


# -- actives -----------------------------------------------------------------

def test_derive_actives_examples():
    assert not derive_actives([CONSTANT], 3).any()
    mask = derive_actives([CONSTANT, Term("interaction", 0, 2)], 3)
    assert mask.tolist() == [True, False, True]


@given(st.lists(st.sampled_from(candidate_terms(4)), max_size=8))
def test_actives_match_basis_variables(basis):
    mask = derive_actives(basis, 4)
    used = set()
    for t in basis:
        used.update(t.variables)
    assert set(np.flatnonzero(mask)) == used


# -- hyperparameters ---------------------------------------------------------

def test_white_noise_pushes_nugget_up():
    hits = 0
    for seed in range(10):
        r = np.random.default_rng(seed)
        u = r.uniform(-1, 1, (40, 2))
        hp = estimate_hyperparameters(r.standard_normal(40), u, np.ones(2, dtype=bool))
        hits += hp.delta >= 0.4
    assert hits >= 9


def test_theta_recovered_from_gp_draws():
    corr = Correlator("exp_sq", 0.7)
    inside = 0
    for seed in range(100):
        r = np.random.default_rng(1000 + seed)
        u = r.uniform(-1, 1, (60, 2))
        k = kernel_matrix(corr, u, u, np.ones(2, dtype=bool))
        chol = np.linalg.cholesky(k + 1e-8 * np.eye(60))
        z = chol @ r.standard_normal(60)
        hp = estimate_hyperparameters(z, u, np.ones(2, dtype=bool))
        inside += 0.4 <= hp.theta <= 1.1
    assert inside >= 95


def test_hyperparameters_respect_bounds(rng):
    opts = TrainingOptions(theta_bounds=(0.8, 0.9), nugget_bounds=(0.01, 0.02))
    u = rng.uniform(-1, 1, (25, 2))
    hp = estimate_hyperparameters(rng.standard_normal(25), u, np.ones(2, dtype=bool), opts)
    assert 0.8 <= hp.theta <= 0.9
    assert 0.01 <= hp.delta <= 0.02
    assert hp.sigma_sq > 0
    assert "nugget_at_bound" in hp.flags


def test_hyperparameters_are_deterministic(rng):
    u = rng.uniform(-1, 1, (30, 2))
    r = np.sin(3 * u[:, 0]) + 0.1 * rng.standard_normal(30)
    a = estimate_hyperparameters(r, u, np.ones(2, dtype=bool))
    b = estimate_hyperparameters(r, u, np.ones(2, dtype=bool))
    assert (a.theta, a.delta, a.sigma_sq) == (b.theta, b.delta, b.sigma_sq)


# -- emulator_from_data ------------------------------------------------------

def test_sirs_emulators(sirs_ems):
    assert isinstance(sirs_ems, EmulatorSet)
    assert list(sirs_ems) == list(SIRS_OUTPUTS)
    ni = sirs_ems["nI"]
    assert ni.prior.actives.tolist() == [True, True, False]
    assert 0.5 <= ni.prior.correlator.theta <= 1.4
    assert 0.01 <= ni.prior.correlator.nugget <= 0.2


def test_known_beta_has_zero_variance(sirs_ems):
    for em in sirs_ems.values():
        assert np.all(em.prior.beta_var == 0)


def test_noninformative_beta_uses_fit_covariance(sirs_wave0):
    train, _ = sirs_wave0
    ems = emulator_from_data(train, ["nS"], SIRS_SPACE, TrainingOptions(beta_mode="noninformative"))
    bv = np.atleast_2d(ems["nS"].prior.beta_var)
    assert np.all(np.diag(bv) > 0)


def test_actives_agree_with_basis(sirs_ems):
    for em in sirs_ems.values():
        assert em.prior.actives.tolist() == derive_actives(em.prior.basis, 3).tolist()


def test_single_output_is_still_a_mapping(sirs_wave0):
    train, _ = sirs_wave0
    ems = emulator_from_data(train, "nR", SIRS_SPACE)
    assert isinstance(ems, EmulatorSet) and len(ems) == 1 and "nR" in ems


def test_training_points_reproduced(sirs_ems, sirs_wave0):
    train, _ = sirs_wave0
    x = train.matrix(SIRS_SPACE)
    for name, em in sirs_ems.items():
        np.testing.assert_allclose(em.get_exp(x), train.output(name), rtol=1e-6, atol=1e-6)


def test_missing_output_is_schema_error(sirs_wave0):
    train, _ = sirs_wave0
    with pytest.raises(SchemaError):
        emulator_from_data(train, ["nX"], SIRS_SPACE)


def test_training_error_names_output():
    x = np.array([[0.0, 0.0], [0.5, 0.5], [-0.5, 0.2]])
    with pytest.raises(TrainingError, match="'y'"):
        emulator_from_data(_table(UNIT2, x, y=np.arange(3.0)), ["y"], UNIT2)


def test_progress_messages(sirs_wave0, caplog):
    train, _ = sirs_wave0
    with caplog.at_level("INFO", logger="histmatch"):
        emulator_from_data(train, ["nS"], SIRS_SPACE)
    text = caplog.text
    for msg in ("Fitting regression surfaces", "Building correlation structures",
                "Creating emulators", "Performing Bayes linear adjustment"):
        assert msg in text


def test_emulator_set_round_trip(sirs_ems):
    back = EmulatorSet.from_dict(sirs_ems.to_dict())
    x = latin_hypercube(20, SIRS_SPACE, seed=3).inputs
    for name in SIRS_OUTPUTS:
        np.testing.assert_array_equal(back[name].get_exp(x), sirs_ems[name].get_exp(x))
        np.testing.assert_array_equal(back[name].get_cov(x), sirs_ems[name].get_cov(x))


# -- variance emulation ------------------------------------------------------

def _replicated(x, reps, fn, seed):
    r = np.random.default_rng(seed)
    xx = np.repeat(x, reps, axis=0)
    return xx, fn(xx, r)


def test_heteroskedastic_variance_tracked():
    r = np.random.default_rng(7)
    x = r.uniform(-1, 1, (40, 2))
    xx, y = _replicated(x, 10, lambda a, g: a[:, 1] + (1 + a[:, 0]) * g.standard_normal(len(a)), 8)
    ems = train_variance_emulators(_table(UNIT2, xx, y=y), ["y"], UNIT2)
    grid = np.column_stack([np.linspace(-1, 1, 21).repeat(5), np.tile(np.linspace(-1, 1, 5), 21)])
    rho = stats.spearmanr(ems.variance["y"].get_exp(grid), (1 + grid[:, 0]) ** 2).correlation
    assert rho > 0.8


def test_identical_replicates_reduce_to_deterministic():
    r = np.random.default_rng(2)
    x = r.uniform(-1, 1, (25, 2))
    xx, y = _replicated(x, 3, lambda a, g: np.sin(2 * a[:, 0]) + a[:, 1], 0)
    ems = train_variance_emulators(_table(UNIT2, xx, y=y), ["y"], UNIT2)
    assert np.all(ems.variance["y"].train_outputs == 0)
    np.testing.assert_allclose(ems["y"].get_exp(x), np.sin(2 * x[:, 0]) + x[:, 1], atol=1e-6)


def test_all_singletons_rejected(rng):
    x = rng.uniform(-1, 1, (30, 2))
    with pytest.raises(InsufficientDataError, match="deterministic"):
        train_variance_emulators(_table(UNIT2, x, y=x[:, 0]), ["y"], UNIT2)


def test_too_few_replicated_inputs(rng):
    x = rng.uniform(-1, 1, (12, 2))
    xx, y = _replicated(x, 3, lambda a, g: g.standard_normal(len(a)), 0)
    with pytest.raises(InsufficientDataError):
        train_variance_emulators(_table(UNIT2, xx, y=y), ["y"], UNIT2)


def test_singletons_join_mean_stage():
    r = np.random.default_rng(4)
    x = r.uniform(-1, 1, (25, 2))
    xx, y = _replicated(x, 4, lambda a, g: a[:, 0] + 0.3 * g.standard_normal(len(a)), 5)
    extra = r.uniform(-1, 1, (5, 2))
    runs = _table(UNIT2, np.vstack([xx, extra]), y=np.concatenate([y, extra[:, 0]]))
    ems = train_variance_emulators(runs, ["y"], UNIT2)
    assert ems.variance["y"].n_train == 25
    assert ems["y"].n_train == 30


def test_stochastic_sirs_training_variance_positive():
    from histmatch.sims import GillespieSimulator

    design = latin_hypercube(30, SIRS_SPACE, seed=11)
    runs = GillespieSimulator(reps=10)(design, seed=11)
    ems = train_variance_emulators(runs, list(SIRS_OUTPUTS), SIRS_SPACE)
    assert ems.is_variance and set(ems.variance) == set(SIRS_OUTPUTS)
    for name in SIRS_OUTPUTS:
        em = ems[name]
        assert np.all(em.get_cov(em.train_inputs) > 0)


@given(st.floats(1.0, 50.0))
def test_more_replicates_never_widen_mean_variance(factor):
    # noise v/N shrinks as N grows; the adjusted variance at training inputs follows
    r = np.random.default_rng(0)
    x = r.uniform(-1, 1, (15, 2))
    y = np.sin(2 * x[:, 0])
    ems = emulator_from_data(_table(UNIT2, x, y=y), ["y"], UNIT2)
    prior = ems["y"].prior
    noise = 0.05 * (1 + x[:, 1] ** 2)
    few = TrainedEmulator(prior, x, y, noise)
    many = TrainedEmulator(prior, x, y, noise / factor)
    assert np.all(many.get_cov(x) <= few.get_cov(x) * (1 + 1e-9) + 1e-12)


def test_ode_batch_matches_training_table(sirs_wave0):
    train, _ = sirs_wave0
    out = sirs_deterministic_batch(train.matrix(SIRS_SPACE))
    np.testing.assert_allclose(out, train.outputs, rtol=1e-10)
