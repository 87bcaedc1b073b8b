"""Bayes linear emulators.

The prior for one output is::

    f(x) = sum_j beta_j g_j(x_A) + u(x_A) + w(x)

with a regression surface over the active inputs ``A``, a correlated residual
``u`` and a nugget ``w``. ``Var[u + w] = sigma_sq``; ``beta`` and ``u`` are
uncorrelated a priori. Adjusting by runs ``D`` gives::

    E_D[f(x)]   = E[f(x)] + Cov[f(x), D] Var[D]^-1 (D - E[D])
    Var_D[f(x)] = Var[f(x)] - Cov[f(x), D] Var[D]^-1 Cov[D, f(x)]
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import linalg

from .correlation import Correlator, kernel_matrix
from .errors import ConditioningError, SchemaError
from .space import ParameterSpace, RunTable

__all__ = [
    "Term",
    "design_matrix",
    "EmulatorPrior",
    "TrainedEmulator",
    "Target",
    "prior_expectation",
    "prior_covariance",
    "adjust",
    "get_exp",
    "get_cov",
    "target_moments",
    "implausibility",
    "nth_implausibility",
    "JITTER",
    "FORMAT_VERSION",
]

JITTER = 1e-10
BLOCK_SIZE = 1024
FORMAT_VERSION = 1


@dataclass(frozen=True, order=True)
class Term:
    """One basis function over scaled coordinates.

    ``kind`` is ``const``, ``linear`` (x_i), ``quadratic`` (x_i^2) or
    ``interaction`` (x_i * x_j, i < j).
    """

    kind: str
    i: int = -1
    j: int = -1

    def __post_init__(self):
        if self.kind not in ("const", "linear", "quadratic", "interaction"):
            raise ValueError(f"unknown basis term {self.kind!r}")
        if self.kind == "interaction":
            if self.i == self.j:
                raise ValueError("interaction needs two distinct parameters")
            if self.i > self.j:
                a, b = self.j, self.i
                object.__setattr__(self, "i", a)
                object.__setattr__(self, "j", b)

    @property
    def variables(self) -> tuple[int, ...]:
        if self.kind == "const":
            return ()
        if self.kind == "interaction":
            return (self.i, self.j)
        return (self.i,)

    def __call__(self, u: np.ndarray) -> np.ndarray:
        u = np.atleast_2d(u)
        if self.kind == "const":
            return np.ones(u.shape[0])
        if self.kind == "linear":
            return u[:, self.i]
        if self.kind == "quadratic":
            return u[:, self.i] ** 2
        return u[:, self.i] * u[:, self.j]

    def label(self, names: Sequence[str]) -> str:
        if self.kind == "const":
            return "(Intercept)"
        if self.kind == "linear":
            return names[self.i]
        if self.kind == "quadratic":
            return f"I({names[self.i]}^2)"
        return f"{names[self.i]}:{names[self.j]}"

    def to_list(self) -> list:
        return [self.kind, *self.variables] if self.kind != "quadratic" else [self.kind, self.i]

    @classmethod
    def from_list(cls, spec) -> "Term":
        kind, *idx = spec
        if kind == "interaction":
            return cls(kind, int(idx[0]), int(idx[1]))
        if kind in ("linear", "quadratic"):
            return cls(kind, int(idx[0]))
        return cls("const")


CONSTANT = Term("const")


def design_matrix(basis: Sequence[Term], u) -> np.ndarray:
    u = np.atleast_2d(np.asarray(u, dtype=float))
    return np.column_stack([t(u) for t in basis]) if basis else np.zeros((u.shape[0], 0))


def _points(points, space: ParameterSpace) -> np.ndarray:
    if isinstance(points, RunTable):
        return points.matrix(space)
    if isinstance(points, Mapping):
        missing = [n for n in space.names if n not in points]
        if missing:
            raise SchemaError(f"point is missing parameters {missing}")
        return np.array([[float(points[n]) for n in space.names]])
    x = np.atleast_2d(np.asarray(points, dtype=float))
    if x.shape[1] != space.dim:
        raise SchemaError(f"expected {space.dim} parameter columns, got {x.shape[1]}")
    return x


@dataclass(frozen=True)
class EmulatorPrior:
    """Second-order prior specification for one output."""

    output_name: str
    space: ParameterSpace
    basis: tuple[Term, ...]
    beta_mean: np.ndarray
    beta_var: np.ndarray
    sigma_sq: float
    correlator: Correlator = field(default_factory=Correlator)
    actives: np.ndarray | None = None
    discrepancy: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        basis = tuple(self.basis)
        if CONSTANT not in basis:
            raise ValueError("the basis must contain the constant term")
        p = len(basis)
        beta_mean = np.asarray(self.beta_mean, dtype=float).reshape(p)
        beta_var = np.asarray(self.beta_var, dtype=float)
        if beta_var.ndim == 0 or beta_var.size == 1 and p != 1:
            beta_var = np.eye(p) * float(beta_var)
        beta_var = beta_var.reshape(p, p)
        if not np.allclose(beta_var, beta_var.T, atol=1e-12 * (1 + np.abs(beta_var).max())):
            raise ValueError("beta_var must be symmetric")
        if not self.sigma_sq > 0:
            raise ValueError(f"sigma_sq must be positive, got {self.sigma_sq}")
        if self.actives is None:
            actives = np.zeros(self.space.dim, dtype=bool)
            for t in basis:
                actives[list(t.variables)] = True
        else:
            actives = np.asarray(self.actives, dtype=bool).reshape(self.space.dim)
        for t in basis:
            if not all(actives[list(t.variables)]):
                raise ValueError(f"basis term {t.label(self.space.names)} uses an inactive parameter")
        internal, external = (float(v) for v in self.discrepancy)
        if internal < 0 or external < 0:
            raise ValueError("discrepancies must be non-negative")
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "beta_mean", beta_mean)
        object.__setattr__(self, "beta_var", beta_var)
        object.__setattr__(self, "sigma_sq", float(self.sigma_sq))
        object.__setattr__(self, "actives", actives)
        object.__setattr__(self, "discrepancy", (internal, external))

    @property
    def discrepancy_var(self) -> float:
        return self.discrepancy[0] ** 2 + self.discrepancy[1] ** 2

    @property
    def beta_known(self) -> bool:
        return not np.any(self.beta_var)

    def replace(self, **changes) -> "EmulatorPrior":
        fields_ = {k: getattr(self, k) for k in (
            "output_name", "space", "basis", "beta_mean", "beta_var", "sigma_sq",
            "correlator", "actives", "discrepancy")}
        fields_.update(changes)
        return EmulatorPrior(**fields_)

    def scaled(self, points) -> np.ndarray:
        return self.space.scale(_points(points, self.space), allow_extrapolation=True)

    # prior moments on scaled coordinates
    def _mean_u(self, u):
        return design_matrix(self.basis, u) @ self.beta_mean

    def _cov_u(self, u, v):
        out = self.sigma_sq * kernel_matrix(self.correlator, u, v, self.actives)
        if not self.beta_known:
            out += design_matrix(self.basis, u) @ self.beta_var @ design_matrix(self.basis, v).T
        return out

    def _var_u(self, u):
        var = np.full(u.shape[0], self.sigma_sq)
        if not self.beta_known:
            g = design_matrix(self.basis, u)
            var += np.einsum("ij,jk,ik->i", g, self.beta_var, g)
        return var

    def expectation(self, points) -> np.ndarray:
        return self._mean_u(self.scaled(points))

    def covariance(self, points, other=None) -> np.ndarray:
        u = self.scaled(points)
        v = u if other is None else self.scaled(other)
        return self._cov_u(u, v)

    def adjust(self, runs: RunTable, obs_noise_var=None) -> "TrainedEmulator":
        return adjust(self, runs, obs_noise_var)

    def to_dict(self) -> dict:
        return {
            "output_name": self.output_name,
            "space": self.space.to_dict(),
            "basis": [t.to_list() for t in self.basis],
            "beta_mean": [float(v) for v in self.beta_mean],
            "beta_var": [[float(v) for v in row] for row in self.beta_var],
            "sigma_sq": float(self.sigma_sq),
            "correlator": self.correlator.to_dict(),
            "actives": [bool(a) for a in self.actives],
            "discrepancy": {"internal": self.discrepancy[0], "external": self.discrepancy[1]},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EmulatorPrior":
        disc = d.get("discrepancy", {})
        return cls(
            output_name=d["output_name"],
            space=ParameterSpace.from_dict(d["space"]),
            basis=tuple(Term.from_list(t) for t in d["basis"]),
            beta_mean=np.array(d["beta_mean"], dtype=float),
            beta_var=np.array(d["beta_var"], dtype=float),
            sigma_sq=d["sigma_sq"],
            correlator=Correlator.from_dict(d["correlator"]),
            actives=np.array(d["actives"], dtype=bool),
            discrepancy=(disc.get("internal", 0.0), disc.get("external", 0.0)),
        )


class TrainedEmulator:
    """A prior adjusted by training runs.

    Holds the Cholesky factor of ``Var[D]`` and ``Var[D]^-1 (D - E[D])`` so each
    prediction costs one kernel evaluation against the training points plus a
    triangular solve for variances. Instances are not modified after creation.

    ``obs_noise_var`` adds per-run variance to the diagonal of ``Var[D]``; it is
    used when the training outputs are themselves noisy summaries (sample means
    and sample variances of a stochastic simulator). ``process_variance`` is an
    optional emulator of the simulator's run-to-run variance whose expectation
    enters the implausibility denominator.
    """

    def __init__(self, prior: EmulatorPrior, train_inputs, train_outputs, obs_noise_var=None,
                 flags: Mapping | None = None, process_variance: "TrainedEmulator | None" = None):
        x = np.atleast_2d(np.asarray(train_inputs, dtype=float))
        y = np.asarray(train_outputs, dtype=float).ravel()
        if x.shape[0] != y.size:
            raise SchemaError("inputs and outputs differ in length")
        if x.shape[0] < 1:
            raise ValueError("need at least one training run")
        if x.shape[1] != prior.space.dim:
            raise SchemaError("training inputs do not match the parameter space")
        if obs_noise_var is None:
            noise = np.zeros(y.size)
        else:
            noise = np.broadcast_to(np.asarray(obs_noise_var, dtype=float), y.shape).copy()
            if np.any(noise < 0) or not np.all(np.isfinite(noise)):
                raise ValueError("obs_noise_var must be finite and non-negative")
        self.prior = prior
        self.train_inputs = x
        self.train_outputs = y
        self.obs_noise_var = noise
        self.flags = dict(flags or {})
        self.process_variance = process_variance
        self._build()

    def _build(self):
        pr = self.prior
        u = pr.space.scale(self.train_inputs, allow_extrapolation=True)
        self._u = u
        if u.shape[0] > 1:
            # identical noise-free inputs give identical rows of Var[D]
            _, counts = np.unique(self.train_inputs, axis=0, return_counts=True)
            if np.any(counts > 1):
                dup = np.all(self.train_inputs[:, None, :] == self.train_inputs[None, :, :], axis=-1)
                noisy = self.obs_noise_var > 0
                clash = dup & ~np.eye(u.shape[0], dtype=bool) & ~(noisy[:, None] | noisy[None, :])
                if clash.any():
                    raise ConditioningError(
                        f"Var[D] for {pr.output_name!r} is singular: repeated training inputs without "
                        "observation noise; aggregate replicates or supply obs_noise_var")
        var_d = pr._cov_u(u, u)
        var_d[np.diag_indices_from(var_d)] += self.obs_noise_var
        # exact factorisation when possible; a small diagonal jitter only as a fallback
        self.jitter = 0.0
        try:
            self._chol = linalg.cho_factor(var_d, lower=True, check_finite=True)
        except linalg.LinAlgError:
            self.jitter = JITTER * pr.sigma_sq
            var_d[np.diag_indices_from(var_d)] += self.jitter
            try:
                self._chol = linalg.cho_factor(var_d, lower=True, check_finite=True)
            except (linalg.LinAlgError, ValueError) as exc:
                raise ConditioningError(
                    f"Var[D] for {pr.output_name!r} is not positive definite after jitter; "
                    "remove near-duplicate runs or raise the nugget") from exc
        except ValueError as exc:
            raise ConditioningError(f"Var[D] for {pr.output_name!r} has non-finite entries") from exc
        self._resid = self.train_outputs - pr._mean_u(u)
        self._alpha = linalg.cho_solve(self._chol, self._resid)
        if not np.all(np.isfinite(self._alpha)):
            raise ConditioningError(f"Var[D] for {pr.output_name!r} is numerically singular")
        self._g_train = design_matrix(pr.basis, u)

    # properties -------------------------------------------------------

    @property
    def output_name(self) -> str:
        return self.prior.output_name

    @property
    def space(self) -> ParameterSpace:
        return self.prior.space

    @property
    def n_train(self) -> int:
        return self.train_outputs.size

    @property
    def sigma(self) -> float:
        """Prior standard deviation of the residual process."""
        return math.sqrt(self.prior.sigma_sq)

    def _cross(self, uq: np.ndarray) -> np.ndarray:
        # Cov[f(x), D] for scaled query rows
        pr = self.prior
        k = pr.sigma_sq * kernel_matrix(pr.correlator, uq, self._u, pr.actives)
        if not pr.beta_known:
            k += design_matrix(pr.basis, uq) @ pr.beta_var @ self._g_train.T
        return k

    # predictions ------------------------------------------------------

    def get_exp(self, points) -> np.ndarray:
        uq = self.prior.scaled(points)
        out = np.empty(uq.shape[0])
        for s in range(0, uq.shape[0], BLOCK_SIZE):
            b = uq[s:s + BLOCK_SIZE]
            out[s:s + BLOCK_SIZE] = self.prior._mean_u(b) + self._cross(b) @ self._alpha
        return out

    def get_cov(self, points, other=None, full: bool = False) -> np.ndarray:
        """Adjusted variances, or the full adjusted covariance matrix.

        With ``other`` given, returns the cross-covariance between the two
        point sets. Diagonal variances are clamped at zero.
        """
        uq = self.prior.scaled(points)
        if other is not None:
            return self._cov_block(uq, self.prior.scaled(other))
        if full:
            cov = self._cov_block(uq, uq)
            cov = 0.5 * (cov + cov.T)
            diag = np.diag_indices_from(cov)
            cov[diag] = np.maximum(cov[diag], 0.0)
            return cov
        out = np.empty(uq.shape[0])
        for s in range(0, uq.shape[0], BLOCK_SIZE):
            b = uq[s:s + BLOCK_SIZE]
            k = self._cross(b)
            w = linalg.solve_triangular(self._chol[0], k.T, lower=True, check_finite=False)
            out[s:s + BLOCK_SIZE] = self.prior._var_u(b) - np.einsum("ij,ij->j", w, w)
        return np.maximum(out, 0.0)

    def _cov_block(self, u, v):
        ku, kv = self._cross(u), self._cross(v)
        return self.prior._cov_u(u, v) - ku @ linalg.cho_solve(self._chol, kv.T)

    def get_sd(self, points) -> np.ndarray:
        return np.sqrt(self.get_cov(points))

    def process_var(self, points) -> np.ndarray | float:
        if self.process_variance is None:
            return 0.0
        return np.maximum(self.process_variance.get_exp(points), 0.0)

    def implausibility(self, points, target, cutoff: float | None = None) -> np.ndarray:
        return implausibility(self, points, target, cutoff)

    def with_prior(self, prior: EmulatorPrior) -> "TrainedEmulator":
        """Re-adjust the same training data under a modified prior."""
        return TrainedEmulator(prior, self.train_inputs, self.train_outputs, self.obs_noise_var,
                               self.flags, self.process_variance)

    def is_training_point(self, points) -> np.ndarray:
        x = _points(points, self.space)
        return np.array([np.any(np.all(self.train_inputs == row, axis=1)) for row in x], dtype=bool)

    # serialisation ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "prior": self.prior.to_dict(),
            "training": {
                "inputs": [[float(v) for v in row] for row in self.train_inputs],
                "outputs": [float(v) for v in self.train_outputs],
                "obs_noise_var": [float(v) for v in self.obs_noise_var],
            },
            "flags": {k: self.flags[k] for k in sorted(self.flags)},
        }

    @classmethod
    def from_dict(cls, d: Mapping, process_variance=None) -> "TrainedEmulator":
        tr = d["training"]
        return cls(EmulatorPrior.from_dict(d["prior"]), np.array(tr["inputs"], dtype=float),
                   np.array(tr["outputs"], dtype=float), np.array(tr["obs_noise_var"], dtype=float),
                   d.get("flags"), process_variance)

    def summary(self) -> str:
        pr = self.prior
        names = pr.space.names
        ranges = ": ".join(f"{n}: c({lo:g}, {hi:g})" for n, (lo, hi) in zip(names, pr.space.ranges))
        active = "; ".join(n for n, a in zip(names, pr.actives) if a) or "none"
        eig = np.linalg.eigvalsh(pr.beta_var) if pr.beta_var.size else np.array([])
        hp = "; ".join(f"{k}: {v:.4g}" for k, v in pr.correlator.hyperparameters.items())
        lines = [
            f"Output: {pr.output_name}",
            f"Parameters and ranges:  {ranges}",
            "Specifications:",
            "\tBasis functions:  " + "; ".join(t.label(names) for t in pr.basis),
            f"\tActive variables {active}",
            "\tRegression Surface Expectation:  " + "; ".join(f"{b:.7g}" for b in pr.beta_mean),
            "\tRegression surface Variance (eigenvalues):  " + "; ".join(f"{e:.4g}" for e in eig),
            "Correlation Structure:",
            f"Bayes-adjusted emulator ({self.n_train} runs) - prior specifications listed.",
            f"\tVariance (Representative):  {pr.sigma_sq:.7g}",
            "\tExpectation:  0",
            f"\tCorrelation type: {pr.correlator.kind}",
            f"\tHyperparameters:  {hp}",
            f"\tNugget term: {pr.correlator.nugget:.4g}",
            "Mixed covariance:  " + " ".join("0" for _ in pr.basis),
        ]
        if pr.discrepancy_var:
            lines.append(f"Discrepancies: internal {pr.discrepancy[0]:g}, external {pr.discrepancy[1]:g}")
        for k in sorted(self.flags):
            lines.append(f"Note: {k} = {self.flags[k]}")
        return "\n".join(lines)

    def __repr__(self) -> str:
        return f"TrainedEmulator({self.output_name!r}, n={self.n_train})"


def prior_expectation(em: EmulatorPrior | TrainedEmulator, points) -> np.ndarray:
    prior = em.prior if isinstance(em, TrainedEmulator) else em
    return prior.expectation(points)


def prior_covariance(em: EmulatorPrior | TrainedEmulator, points, other=None) -> np.ndarray:
    prior = em.prior if isinstance(em, TrainedEmulator) else em
    return prior.covariance(points, other)


def adjust(prior: EmulatorPrior, runs: RunTable, obs_noise_var=None) -> TrainedEmulator:
    """Bayes linear adjustment of ``prior`` by the runs' output column."""
    x = runs.matrix(prior.space)
    y = runs.output(prior.output_name)
    return TrainedEmulator(prior, x, y, obs_noise_var)


def get_exp(em: TrainedEmulator, points) -> np.ndarray:
    return em.get_exp(points)


def get_cov(em: TrainedEmulator, points, full: bool = False) -> np.ndarray:
    return em.get_cov(points, full=full)


@dataclass(frozen=True)
class Target:
    """An observation: either ``val`` with ``sigma``, or an interval ``[lower, upper]``.

    Interval endpoints are read as three standard deviations either side of
    the midpoint.
    """

    val: float | None = None
    sigma: float | None = None
    lower: float | None = None
    upper: float | None = None

    def __post_init__(self):
        if self.val is not None:
            if self.sigma is None or not self.sigma > 0:
                raise ValueError("a value target needs sigma > 0")
            if self.lower is not None or self.upper is not None:
                raise ValueError("give either val/sigma or an interval, not both")
        else:
            if self.lower is None or self.upper is None or not self.lower < self.upper:
                raise ValueError("an interval target needs lower < upper")

    @classmethod
    def value(cls, val: float, sigma: float) -> "Target":
        return cls(val=float(val), sigma=float(sigma))

    @classmethod
    def interval(cls, lower: float, upper: float) -> "Target":
        return cls(lower=float(lower), upper=float(upper))

    @classmethod
    def from_spec(cls, spec) -> "Target":
        if isinstance(spec, Target):
            return spec
        if isinstance(spec, Mapping):
            if "val" in spec:
                return cls.value(spec["val"], spec["sigma"])
            return cls.interval(spec["lower"], spec["upper"])
        lo, hi = spec
        return cls.interval(lo, hi)

    def to_spec(self):
        if self.val is not None:
            return {"val": self.val, "sigma": self.sigma}
        return [self.lower, self.upper]

    @property
    def is_interval(self) -> bool:
        return self.val is None

    def moments(self) -> tuple[float, float]:
        return target_moments(self)

    def bounds(self) -> tuple[float, float]:
        if self.is_interval:
            return self.lower, self.upper
        return self.val - 3 * self.sigma, self.val + 3 * self.sigma

    def scaled(self, factor: float) -> "Target":
        """Same centre with the uncertainty multiplied by ``factor``."""
        z, var = self.moments()
        return Target.value(z, math.sqrt(var) * factor)


def target_moments(t: Target) -> tuple[float, float]:
    if t.is_interval:
        return 0.5 * (t.lower + t.upper), ((t.upper - t.lower) / 6.0) ** 2
    return float(t.val), float(t.sigma) ** 2


def _as_target(t) -> Target:
    return Target.from_spec(t)


def implausibility(em: TrainedEmulator, points, target, cutoff: float | None = None) -> np.ndarray:
    """``|E_D[f(x)] - z| / sqrt(Var_D[f(x)] + Var[e] + Var[eps])``.

    Returns booleans ``I <= cutoff`` when a cutoff is given.
    """
    z, var_e = target_moments(_as_target(target))
    mean = em.get_exp(points)
    var = em.get_cov(points)
    denom = var + var_e + em.prior.discrepancy_var + em.process_var(points)
    imp = np.abs(mean - z) / np.sqrt(denom)
    if cutoff is not None:
        return imp <= cutoff
    return imp


def nth_implausibility(ems: Mapping[str, TrainedEmulator], points, targets: Mapping,
                       n: int = 1, cutoff: float | None = None) -> np.ndarray:
    """Per point, the ``n``-th largest implausibility across emulators."""
    names = list(ems)
    if not names:
        raise ValueError("no emulators given")
    missing = [k for k in names if k not in targets]
    if missing:
        raise SchemaError(f"no target for emulated outputs {missing}")
    if not 1 <= n <= len(names):
        raise ValueError(f"n must lie in [1, {len(names)}], got {n}")
    imps = np.vstack([implausibility(ems[k], points, targets[k]) for k in names])
    if n == 1:
        out = imps.max(axis=0)
    else:
        out = -np.sort(-imps, axis=0)[n - 1]
    if cutoff is not None:
        return out <= cutoff
    return out
