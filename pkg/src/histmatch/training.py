"""Build trained emulators from run data.

Per output: scale inputs, choose a quadratic regression surface by stepwise
AICc and prune weak terms, read off the active inputs, estimate the
correlation length and nugget by bounded maximum likelihood on the
residuals, then adjust. Stochastic simulators go through
:func:`train_variance_emulators`, which emulates replicate sample variances
first and uses them as noise levels for the mean emulators.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Iterator, Sequence

import numpy as np
from scipy import linalg, optimize

from .correlation import Correlator, kernel_matrix
from .emulator import CONSTANT, JITTER, EmulatorPrior, Term, TrainedEmulator, design_matrix
from .errors import HistMatchError, InsufficientDataError, SchemaError
from .space import ParameterSpace, RunTable

__all__ = [
    "TrainingOptions",
    "RegressionFit",
    "HyperFit",
    "EmulatorSet",
    "TrainingError",
    "candidate_terms",
    "fit_regression",
    "derive_actives",
    "estimate_hyperparameters",
    "emulator_from_data",
    "aggregate_replicates",
    "train_variance_emulators",
]

log = logging.getLogger("histmatch")

SQRT3 = math.sqrt(3.0)


class TrainingError(HistMatchError):
    """Training failed for a named output."""

    def __init__(self, output: str, cause: Exception):
        super().__init__(f"training failed for output {output!r}: {cause}")
        self.output = output
        self.cause = cause


@dataclass(frozen=True)
class TrainingOptions:
    """Knobs for :func:`emulator_from_data`.

    The theta bounds come from the roots of the cubic Chebyshev polynomial on
    [-1, 1] (0 and +-sqrt(3)/2): the largest gap between roots is sqrt(3), the
    mean distance of the cube's corners from them is about sqrt(3)/3.

    ``nugget_prior_scale`` is ``k`` in the nugget log-prior ``-k / delta``,
    which keeps deterministic data from driving delta to its lower bound while
    staying nearly flat for delta >> k. Set it to 0 for plain bounded maximum
    likelihood.
    """

    beta_mode: str = "known"
    variance_explained_threshold: float = 0.01
    theta_bounds: tuple[float, float] = (SQRT3 / 3, SQRT3)
    nugget_bounds: tuple[float, float] = (1e-4, 0.5)
    nugget_prior_scale: float = 0.1
    likelihood: str = "ml"
    kernel_kind: str = "exp_sq"
    stepwise_criterion: str = "aicc"
    n_theta: int = 12
    n_delta: int = 10
    kurtosis_multiplier: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.beta_mode not in ("known", "noninformative"):
            raise ValueError(f"beta_mode must be 'known' or 'noninformative', got {self.beta_mode!r}")
        if not 0 <= self.variance_explained_threshold < 1:
            raise ValueError("variance_explained_threshold must lie in [0, 1)")
        lo, hi = self.theta_bounds
        if not 0 < lo <= hi:
            raise ValueError("theta_bounds must satisfy 0 < lower <= upper")
        lo, hi = self.nugget_bounds
        if not 0 < lo <= hi <= 1:
            raise ValueError("nugget_bounds must satisfy 0 < lower <= upper <= 1")
        if self.likelihood not in ("ml", "reml"):
            raise ValueError("likelihood must be 'ml' or 'reml'")
        if self.stepwise_criterion != "aicc":
            raise ValueError("only the 'aicc' stepwise criterion is available")
        if self.nugget_prior_scale < 0:
            raise ValueError("nugget_prior_scale must be non-negative")
        if self.kurtosis_multiplier <= 0:
            raise ValueError("kurtosis_multiplier must be positive")
        Correlator(self.kernel_kind)  # validates the kind

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "TrainingOptions":
        d = dict(d or {})
        for key in ("theta_bounds", "nugget_bounds"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# -- regression ----------------------------------------------------------

def candidate_terms(d: int) -> list[Term]:
    """Constant, linear, pure quadratic and pairwise interaction terms."""
    terms = [CONSTANT]
    terms += [Term("linear", i) for i in range(d)]
    terms += [Term("quadratic", i) for i in range(d)]
    terms += [Term("interaction", i, j) for i, j in combinations(range(d), 2)]
    return terms


@dataclass
class RegressionFit:
    basis: tuple[Term, ...]
    coefficients: np.ndarray
    coef_cov: np.ndarray
    residuals: np.ndarray
    rss: float
    tss: float
    direction: str
    dim: int

    @property
    def actives(self) -> np.ndarray:
        return derive_actives(self.basis, self.dim)


def _lsq(g: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    coef, *_ = np.linalg.lstsq(g, y, rcond=None)
    r = y - g @ coef
    return coef, float(r @ r)


def _aicc(rss: float, n: int, p: int, floor: float) -> float:
    k = p + 1  # coefficients plus the residual variance
    if n - k - 1 <= 0:
        return math.inf
    return n * math.log(max(rss, floor) / n) + 2 * k + 2 * k * (k + 1) / (n - k - 1)


def fit_regression(runs: RunTable, output: str, space: ParameterSpace,
                   opts: TrainingOptions | None = None) -> RegressionFit:
    """Stepwise quadratic least squares over scaled inputs.

    Stepwise addition from the constant when there are fewer runs than
    candidate terms, stepwise deletion from the full model otherwise. Terms
    whose removal costs less than ``variance_explained_threshold`` of the
    total sum of squares are then dropped one at a time.
    """
    opts = opts or TrainingOptions()
    u = space.scale(runs.matrix(space), allow_extrapolation=True)
    y = runs.output(output)
    n, d = u.shape
    if n < d + 2:
        raise InsufficientDataError(f"{n} runs cannot support a linear fit in {d} parameters (need {d + 2})")
    cands = candidate_terms(d)
    cols = {t: t(u) for t in cands}
    tss = float(np.sum((y - y.mean()) ** 2))
    floor = max(tss, float(np.sum(y * y)), 1e-300) * 1e-14

    def rss_of(terms):
        return _lsq(np.column_stack([cols[t] for t in terms]), y)[1]

    direction = "add" if n < len(cands) else "delete"
    if tss == 0.0:
        basis = [CONSTANT]
    elif direction == "add":
        basis = [CONSTANT]
        score = _aicc(rss_of(basis), n, 1, floor)
        while True:
            trials = [(_aicc(rss_of(basis + [t]), n, len(basis) + 1, floor), t)
                      for t in cands if t not in basis]
            if not trials:
                break
            best, term = min(trials, key=lambda s: s[0])
            if not best < score:
                break
            basis.append(term)
            score = best
    else:
        basis = list(cands)
        score = _aicc(rss_of(basis), n, len(basis), floor)
        while len(basis) > 1:
            trials = [(_aicc(rss_of([b for b in basis if b != t]), n, len(basis) - 1, floor), t)
                      for t in basis if t != CONSTANT]
            best, term = min(trials, key=lambda s: s[0])
            if not best < score:
                break
            basis.remove(term)
            score = best

    # prune terms explaining little of the total variation
    thresh = opts.variance_explained_threshold * tss
    while len(basis) > 1 and tss > 0:
        full = rss_of(basis)
        gains = [(rss_of([b for b in basis if b != t]) - full, t) for t in basis if t != CONSTANT]
        gain, term = min(gains, key=lambda s: s[0])
        if gain >= thresh:
            break
        basis.remove(term)

    basis = tuple(sorted(basis, key=lambda t: cands.index(t)))
    g = np.column_stack([cols[t] for t in basis])
    coef, rss = _lsq(g, y)
    resid = y - g @ coef
    dof = n - len(basis)
    s2 = rss / dof if dof > 0 else 0.0
    coef_cov = s2 * np.linalg.pinv(g.T @ g)
    return RegressionFit(basis, coef, 0.5 * (coef_cov + coef_cov.T), resid, rss, tss, direction, d)


def derive_actives(basis: Sequence[Term], d: int) -> np.ndarray:
    mask = np.zeros(d, dtype=bool)
    for t in basis:
        mask[list(t.variables)] = True
    return mask


# -- hyperparameters -----------------------------------------------------

@dataclass
class HyperFit:
    theta: float
    delta: float
    sigma_sq: float
    neg_log_lik: float
    flags: dict = field(default_factory=dict)


def _corr(kind, theta, delta, u, actives):
    return kernel_matrix(Correlator(kind, theta, delta), u, u, actives)


def _profiled_nll(r, u, actives, kind, theta, delta, g=None):
    """Negative log likelihood with sigma_sq profiled out.

    With a regression design ``g`` this is the restricted likelihood, which
    accounts for the degrees of freedom spent on the regression surface.
    """
    n = r.size
    R = _corr(kind, theta, delta, u, actives)
    R[np.diag_indices(n)] += JITTER
    try:
        c = linalg.cho_factor(R, lower=True, check_finite=False)
    except linalg.LinAlgError:
        return math.inf, math.nan
    ri = linalg.cho_solve(c, r)
    logdet = 2.0 * float(np.sum(np.log(np.diag(c[0]))))
    m = n
    if g is not None and g.shape[1]:
        gi = linalg.cho_solve(c, g)
        a = g.T @ gi
        try:
            ca = linalg.cho_factor(a, lower=True, check_finite=False)
        except linalg.LinAlgError:
            return math.inf, math.nan
        ri = ri - gi @ linalg.cho_solve(ca, g.T @ ri)
        logdet += 2.0 * float(np.sum(np.log(np.diag(ca[0]))))
        m = n - g.shape[1]
    s2 = float(r @ ri) / m
    if s2 <= 0:
        return -math.inf, 0.0
    return 0.5 * m * math.log(s2) + 0.5 * logdet, s2


def _noisy_nll(r, u, actives, kind, theta, delta, s2, noise):
    n = r.size
    K = s2 * _corr(kind, theta, delta, u, actives)
    K[np.diag_indices(n)] += noise + JITTER * s2
    try:
        c = linalg.cho_factor(K, lower=True, check_finite=False)
    except linalg.LinAlgError:
        return math.inf
    return 0.5 * float(r @ linalg.cho_solve(c, r)) + float(np.sum(np.log(np.diag(c[0]))))


def _bound_flags(theta, delta, opts, has_actives):
    flags = {}
    for name, val, (lo, hi) in (("theta", theta, opts.theta_bounds), ("nugget", delta, opts.nugget_bounds)):
        if name == "theta" and not has_actives:
            continue
        if hi > lo and val <= lo * (1 + 1e-3):
            flags[f"{name}_at_bound"] = "lower"
        elif hi > lo and val >= hi * (1 - 1e-3):
            flags[f"{name}_at_bound"] = "upper"
    return flags


def estimate_hyperparameters(residuals, inputs, actives, opts: TrainingOptions | None = None,
                             noise=None, basis_matrix=None) -> HyperFit:
    """Bounded maximum likelihood for ``(theta, delta, sigma_sq)``.

    ``residuals`` are modelled as zero-mean with covariance
    ``sigma_sq * [(1 - delta) c + delta I]`` on the scaled ``inputs``. The
    uniform prior on the bounded box makes this the MAP estimate. sigma_sq is
    profiled out in closed form; with a per-point ``noise`` variance vector it
    is optimised numerically alongside the others. A log-spaced grid picks the
    start for a bounded quasi-Newton refinement.

    Passing the regression ``basis_matrix`` switches the noise-free case to
    the restricted likelihood, so sigma_sq is not shrunk by the degrees of
    freedom the regression fit already used.
    """
    opts = opts or TrainingOptions()
    r = np.asarray(residuals, dtype=float).ravel()
    u = np.atleast_2d(np.asarray(inputs, dtype=float))
    actives = np.asarray(actives, dtype=bool)
    n = r.size
    if n < 4:
        raise InsufficientDataError(f"hyperparameter estimation needs at least 4 points, got {n}")
    kind = opts.kernel_kind
    g = None if basis_matrix is None else np.atleast_2d(np.asarray(basis_matrix, dtype=float))
    (t_lo, t_hi), (d_lo, d_hi) = opts.theta_bounds, opts.nugget_bounds
    has_actives = bool(actives.any())
    scale = float(r @ r) / n
    if scale == 0.0 and (noise is None or not np.any(noise)):
        # nothing left to explain; keep a tiny positive variance
        theta = math.sqrt(t_lo * t_hi)
        return HyperFit(theta, d_lo, 1e-12, -math.inf, {"zero_residuals": True})

    thetas = np.geomspace(t_lo, t_hi, opts.n_theta if has_actives else 1)
    deltas = np.geomspace(d_lo, d_hi, opts.n_delta)
    kappa = opts.nugget_prior_scale
    best = (math.inf, thetas[0], deltas[0])
    for th in thetas:
        for de in deltas:
            nll, _ = _profiled_nll(r, u, actives, kind, th, de, g)
            if nll + kappa / de < best[0]:
                best = (nll + kappa / de, th, de)
    _, th0, de0 = best
    _, s20 = _profiled_nll(r, u, actives, kind, th0, de0, g)

    lb = [math.log(t_lo), math.log(d_lo)]
    ub = [math.log(t_hi), math.log(d_hi)]
    if noise is None or not np.any(noise):
        def f(z):
            v, _ = _profiled_nll(r, u, actives, kind, math.exp(z[0]), math.exp(z[1]), g)
            return v + kappa * math.exp(-z[1]) if math.isfinite(v) else 1e300
        x0 = [math.log(th0), math.log(de0)]
        res = optimize.minimize(f, x0, method="L-BFGS-B", bounds=list(zip(lb, ub)))
        z = res.x if res.fun <= f(x0) else np.array(x0)
        theta, delta = math.exp(z[0]), math.exp(z[1])
        nll, s2 = _profiled_nll(r, u, actives, kind, theta, delta, g)
        nll += kappa / delta
    else:
        noise = np.broadcast_to(np.asarray(noise, dtype=float), r.shape)
        s2_lo = 1e-12 * max(scale, float(np.mean(noise)), 1e-300)
        s20 = max(s20, s2_lo)
        lb.append(math.log(s2_lo))
        ub.append(math.log(max(s20, scale, s2_lo) * 1e4))

        def f(z):
            v = _noisy_nll(r, u, actives, kind, math.exp(z[0]), math.exp(z[1]), math.exp(z[2]), noise)
            return v + kappa * math.exp(-z[1]) if math.isfinite(v) else 1e300
        x0 = [math.log(th0), math.log(de0), min(max(math.log(s20), lb[2]), ub[2])]
        res = optimize.minimize(f, x0, method="L-BFGS-B", bounds=list(zip(lb, ub)))
        z = res.x if res.fun <= f(x0) else np.array(x0)
        theta, delta, s2 = (math.exp(v) for v in z)
        nll = f(z)
    theta = min(max(theta, t_lo), t_hi)
    delta = min(max(delta, d_lo), d_hi)
    if not has_actives:
        theta = float(thetas[0])
    return HyperFit(theta, delta, max(s2, 1e-300), nll, _bound_flags(theta, delta, opts, has_actives))


# -- emulator sets ---------------------------------------------------------

class EmulatorSet(Mapping):
    """Named trained emulators.

    Indexing returns the expectation emulators. For stochastic training the
    matching variance emulators sit in :attr:`variance`.
    """

    def __init__(self, expectation: Mapping[str, TrainedEmulator],
                 variance: Mapping[str, TrainedEmulator] | None = None):
        self.expectation = dict(expectation)
        self.variance = None if variance is None else dict(variance)
        if self.variance is not None and set(self.variance) != set(self.expectation):
            raise SchemaError("variance and expectation emulators must cover the same outputs")

    def __getitem__(self, key) -> TrainedEmulator:
        return self.expectation[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self.expectation)

    def __len__(self) -> int:
        return len(self.expectation)

    @property
    def is_variance(self) -> bool:
        return self.variance is not None

    def subset(self, names: Sequence[str]) -> "EmulatorSet":
        missing = [n for n in names if n not in self.expectation]
        if missing:
            raise SchemaError(f"no emulators for {missing}")
        var = None if self.variance is None else {n: self.variance[n] for n in names}
        return EmulatorSet({n: self.expectation[n] for n in names}, var)

    def to_dict(self) -> dict:
        from .emulator import FORMAT_VERSION
        out = {
            "format": "histmatch-emulators",
            "version": FORMAT_VERSION,
            "expectation": {k: em.to_dict() for k, em in self.expectation.items()},
        }
        if self.variance is not None:
            out["variance"] = {k: em.to_dict() for k, em in self.variance.items()}
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "EmulatorSet":
        from .emulator import FORMAT_VERSION
        if d.get("format") != "histmatch-emulators":
            raise SchemaError("not a histmatch emulator document")
        if d.get("version") != FORMAT_VERSION:
            raise SchemaError(f"unsupported emulator format version {d.get('version')!r}")
        var = None
        if "variance" in d:
            var = {k: TrainedEmulator.from_dict(v) for k, v in d["variance"].items()}
        exp = {k: TrainedEmulator.from_dict(v, None if var is None else var.get(k))
               for k, v in d["expectation"].items()}
        return cls(exp, var)

    def summary(self) -> str:
        parts = [em.summary() for em in self.expectation.values()]
        if self.variance is not None:
            parts += ["[variance] " + em.summary() for em in self.variance.values()]
        return "\n\n".join(parts)


def _build_one(runs, name, space, opts, discrepancy, noise=None, flags=None):
    fit = fit_regression(runs, name, space, opts)
    actives = derive_actives(fit.basis, space.dim)
    u = space.scale(runs.matrix(space), allow_extrapolation=True)
    g = design_matrix(fit.basis, u) if opts.likelihood == "reml" else None
    hp = estimate_hyperparameters(fit.residuals, u, actives, opts, noise=noise, basis_matrix=g)
    p = len(fit.basis)
    beta_var = np.zeros((p, p)) if opts.beta_mode == "known" else fit.coef_cov
    prior = EmulatorPrior(
        output_name=name, space=space, basis=fit.basis, beta_mean=fit.coefficients,
        beta_var=beta_var, sigma_sq=hp.sigma_sq,
        correlator=Correlator(opts.kernel_kind, hp.theta, hp.delta),
        actives=actives, discrepancy=discrepancy,
    )
    all_flags = dict(hp.flags)
    all_flags["stepwise"] = fit.direction
    all_flags.update(flags or {})
    return prior, all_flags


def _discrepancy(discrepancies, name):
    if not discrepancies or name not in discrepancies:
        return (0.0, 0.0)
    v = discrepancies[name]
    if isinstance(v, Mapping):
        return (float(v.get("internal", 0.0)), float(v.get("external", 0.0)))
    return tuple(float(x) for x in v)


def emulator_from_data(runs: RunTable, output_names: Sequence[str], space: ParameterSpace,
                       opts: TrainingOptions | None = None,
                       discrepancies: Mapping | None = None) -> EmulatorSet:
    """Train one emulator per named output; always returns an :class:`EmulatorSet`."""
    opts = opts or TrainingOptions()
    if isinstance(output_names, str):
        output_names = [output_names]
    missing = [n for n in output_names if n not in runs.output_names]
    if missing:
        raise SchemaError(f"runs have no output columns {missing}")
    log.info("Fitting regression surfaces...")
    log.info("Building correlation structures...")
    log.info("Creating emulators...")
    priors = {}
    for name in output_names:
        try:
            priors[name] = _build_one(runs, name, space, opts, _discrepancy(discrepancies, name))
        except (HistMatchError, ValueError, ArithmeticError) as exc:
            raise TrainingError(name, exc) from exc
    log.info("Performing Bayes linear adjustment...")
    x = runs.matrix(space)
    ems = {}
    for name, (prior, flags) in priors.items():
        try:
            ems[name] = TrainedEmulator(prior, x, runs.output(name), flags=flags)
        except (HistMatchError, ValueError, ArithmeticError) as exc:
            raise TrainingError(name, exc) from exc
    return EmulatorSet(ems)


# -- variance emulation ------------------------------------------------------

@dataclass
class ReplicateSummary:
    inputs: np.ndarray
    counts: np.ndarray
    means: dict[str, np.ndarray]
    variances: dict[str, np.ndarray]

    def table(self, names, kind: str) -> RunTable:
        cols = self.means if kind == "mean" else self.variances
        return RunTable(tuple(names), self.inputs, tuple(cols), np.column_stack(list(cols.values())))


def aggregate_replicates(runs: RunTable, space: ParameterSpace,
                         output_names: Sequence[str]) -> ReplicateSummary:
    """Group rows with identical inputs: counts, sample means and sample variances.

    Groups follow order of first appearance. Variances use the ``N - 1``
    divisor and are zero for singleton groups.
    """
    x = runs.matrix(space)
    keys: dict[bytes, int] = {}
    groups: list[list[int]] = []
    for i, row in enumerate(x):
        k = row.tobytes()
        if k not in keys:
            keys[k] = len(groups)
            groups.append([])
        groups[keys[k]].append(i)
    inputs = np.array([x[g[0]] for g in groups])
    counts = np.array([len(g) for g in groups])
    means, variances = {}, {}
    for name in output_names:
        y = runs.output(name)
        means[name] = np.array([y[g].mean() for g in groups])
        # identical replicates give exactly zero rather than rounding noise in the mean
        variances[name] = np.array([y[g].var(ddof=1) if len(g) > 1 and np.ptp(y[g]) > 0 else 0.0
                                    for g in groups])
    return ReplicateSummary(inputs, counts, means, variances)


def train_variance_emulators(runs: RunTable, output_names: Sequence[str], space: ParameterSpace,
                             opts: TrainingOptions | None = None,
                             discrepancies: Mapping | None = None) -> EmulatorSet:
    """Two-stage emulation for a stochastic simulator.

    Variance emulators are trained on replicate sample variances ``s2`` with
    noise ``k * 2 s2^2 / (N - 1)`` (``k`` the kurtosis multiplier, 1 under
    normal theory). Mean emulators are trained on replicate means with noise
    ``v(x) / N`` where ``v`` is the variance emulator's adjusted expectation.
    """
    opts = opts or TrainingOptions()
    if isinstance(output_names, str):
        output_names = [output_names]
    missing = [n for n in output_names if n not in runs.output_names]
    if missing:
        raise SchemaError(f"runs have no output columns {missing}")
    agg = aggregate_replicates(runs, space, output_names)
    rep = agg.counts >= 2
    if not rep.any():
        raise InsufficientDataError("no input has more than one replicate; use deterministic training")
    need = 10 * space.dim
    if rep.sum() < need:
        raise InsufficientDataError(
            f"variance emulation needs at least {need} replicated inputs, got {int(rep.sum())}")
    names = space.names
    var_ems, exp_ems = {}, {}
    log.info("Training variance emulators...")
    for name in output_names:
        s2 = agg.variances[name][rep]
        n_rep = agg.counts[rep]
        noise = opts.kurtosis_multiplier * 2.0 * s2 ** 2 / (n_rep - 1)
        table = RunTable(names, agg.inputs[rep], (name,), s2[:, None])
        try:
            prior, flags = _build_one(table, name, space, opts, (0.0, 0.0), noise=noise,
                                      flags={"fourth_moment": "normal theory",
                                             "kurtosis_multiplier": opts.kurtosis_multiplier})
            var_ems[name] = TrainedEmulator(prior, agg.inputs[rep], s2, noise, flags)
        except (HistMatchError, ValueError, ArithmeticError) as exc:
            raise TrainingError(name, exc) from exc
    log.info("Training expectation emulators...")
    for name in output_names:
        m = agg.means[name]
        v_hat = np.maximum(var_ems[name].get_exp(agg.inputs), 0.0)
        noise = v_hat / agg.counts
        table = RunTable(names, agg.inputs, (name,), m[:, None])
        try:
            prior, flags = _build_one(table, name, space, opts, _discrepancy(discrepancies, name),
                                      noise=noise)
            exp_ems[name] = TrainedEmulator(prior, agg.inputs, m, noise, flags,
                                            process_variance=var_ems[name])
        except (HistMatchError, ValueError, ArithmeticError) as exc:
            raise TrainingError(name, exc) from exc
    return EmulatorSet(exp_ems, var_ems)
