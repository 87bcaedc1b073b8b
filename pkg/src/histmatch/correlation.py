"""Correlation kernels with a nugget.

A :class:`Correlator` gives the unit-variance correlation of the residual
process ``u(x) + w(x)``::

    rho(x, x') = (1 - delta) * c(x_A, x'_A) + delta * 1[x == x']

where ``c`` only sees the active coordinates ``A`` and the indicator compares
*all* coordinates, so replicated inputs correlate fully while points that only
differ in inactive inputs do not.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import HyperparameterError

__all__ = ["Correlator", "KERNELS", "default_correlator", "kernel_value", "kernel_matrix"]

KERNELS = ("exp_sq", "matern", "orn_uhl", "rat_quad")
MATERN_NU = (0.5, 1.5, 2.5)


def _exp_sq(d, theta, **_):
    return np.exp(-(d / theta) ** 2)


def _orn_uhl(d, theta, **_):
    return np.exp(-d / theta)


def _matern(d, theta, nu=2.5, **_):
    r = d / theta
    if nu == 0.5:
        return np.exp(-r)
    if nu == 1.5:
        s = np.sqrt(3.0) * r
        return (1.0 + s) * np.exp(-s)
    s = np.sqrt(5.0) * r
    return (1.0 + s + s * s / 3.0) * np.exp(-s)


def _rat_quad(d, theta, alpha=2.0, **_):
    return (1.0 + d * d / (2.0 * alpha * theta * theta)) ** (-alpha)


_FUNCS = {"exp_sq": _exp_sq, "matern": _matern, "orn_uhl": _orn_uhl, "rat_quad": _rat_quad}


@dataclass(frozen=True)
class Correlator:
    """Kernel kind, isotropic correlation length ``theta`` and nugget ``nugget``.

    ``nu`` is only read by ``matern`` and ``alpha`` only by ``rat_quad``.
    """

    kind: str = "exp_sq"
    theta: float = 0.1
    nugget: float = 0.0
    nu: float = 2.5
    alpha: float = 2.0

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise HyperparameterError(f"unknown correlation kind {self.kind!r}; choose from {KERNELS}")
        if not (np.isfinite(self.theta) and self.theta > 0):
            raise HyperparameterError(f"theta must be positive, got {self.theta}")
        if not 0.0 <= self.nugget <= 1.0:
            raise HyperparameterError(f"nugget must lie in [0, 1], got {self.nugget}")
        if self.kind == "matern" and self.nu not in MATERN_NU:
            raise HyperparameterError(f"matern nu must be one of {MATERN_NU}")
        if self.kind == "rat_quad" and not self.alpha > 0:
            raise HyperparameterError("rat_quad alpha must be positive")

    @property
    def hyperparameters(self) -> dict[str, float]:
        hp = {"theta": float(self.theta)}
        if self.kind == "matern":
            hp["nu"] = float(self.nu)
        elif self.kind == "rat_quad":
            hp["alpha"] = float(self.alpha)
        return hp

    def replace(self, **changes) -> "Correlator":
        fields = {"kind": self.kind, "theta": self.theta, "nugget": self.nugget,
                  "nu": self.nu, "alpha": self.alpha}
        fields.update(changes)
        return Correlator(**fields)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "hyperparameters": self.hyperparameters,
                "nugget": float(self.nugget)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Correlator":
        hp = dict(d.get("hyperparameters", {}))
        return cls(kind=d.get("kind", "exp_sq"), theta=hp.pop("theta", 0.1),
                   nugget=d.get("nugget", 0.0), **hp)

    def base(self, dist) -> np.ndarray:
        """Nugget-free correlation ``c`` as a function of scaled distance."""
        return _FUNCS[self.kind](np.asarray(dist, dtype=float), self.theta,
                                 nu=self.nu, alpha=self.alpha)

    def matrix(self, u, v=None, actives=None) -> np.ndarray:
        return kernel_matrix(self, u, u if v is None else v, actives)


def default_correlator() -> Correlator:
    return Correlator("exp_sq", 0.1, 0.0)


def _mask(actives, d: int) -> np.ndarray:
    if actives is None:
        return np.ones(d, dtype=bool)
    mask = np.asarray(actives, dtype=bool)
    if mask.shape != (d,):
        raise ValueError(f"active mask of length {mask.size} for {d} coordinates")
    return mask


def kernel_value(c: Correlator, u, v, actives=None) -> float:
    """Correlation between two scaled points."""
    u = np.asarray(u, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    mask = _mask(actives, u.size)
    same = bool(np.all(u == v))
    if same:
        return 1.0
    diff = (u - v)[mask]
    dist = float(np.sqrt(np.dot(diff, diff)))
    return float((1.0 - c.nugget) * c.base(dist))


def kernel_matrix(c: Correlator, U, V, actives=None) -> np.ndarray:
    """Matrix of :func:`kernel_value` over rows of ``U`` and ``V``."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    mask = _mask(actives, U.shape[1])
    Ua, Va = U[:, mask], V[:, mask]
    if Ua.shape[1]:
        # explicit differences: the |u|^2 + |v|^2 - 2uv shortcut loses exact symmetry
        diff = Ua[:, None, :] - Va[None, :, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        base = c.base(dist)
    else:
        base = np.ones((U.shape[0], V.shape[0]))
    out = (1.0 - c.nugget) * base
    # the indicator is over every coordinate, active or not
    same = np.all(U[:, None, :] == V[None, :, :], axis=-1)
    out[same] = 1.0
    return out
