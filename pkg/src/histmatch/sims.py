"""Bundled SIRS simulators: a deterministic ODE and a Gillespie stochastic model.

Both start from (S, I, R) = (950, 50, 0) with rates ``aSI`` (infection,
frequency dependent), ``aIR`` (recovery) and ``aSR`` (waning immunity), and
report the state at ``t_end``. Simulators follow one interface: called with
an inputs-only :class:`RunTable`, they return a RunTable with the outputs
``nS``, ``nI``, ``nR`` attached (one row per replicate for the stochastic
model).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .emulator import Target
from .space import ParameterSpace, RunTable, latin_hypercube

__all__ = [
    "SIRS_SPACE",
    "SIRS_TARGETS",
    "SIRS_OUTPUTS",
    "INITIAL_STATE",
    "SirsParams",
    "sirs_rhs",
    "sirs_deterministic",
    "sirs_deterministic_batch",
    "sirs_gillespie",
    "OdeSimulator",
    "GillespieSimulator",
    "make_wave0",
    "get_simulator",
]

SIRS_SPACE = ParameterSpace(("aSI", "aIR", "aSR"), ((0.1, 0.8), (0.0, 0.5), (0.0, 0.05)))
SIRS_OUTPUTS = ("nS", "nI", "nR")
SIRS_TARGETS = {
    "nS": Target.interval(580, 651),
    "nI": Target.value(169, 8.45),
    "nR": Target.interval(199, 221),
}
INITIAL_STATE = (950.0, 50.0, 0.0)
DT = 0.01


@dataclass(frozen=True)
class SirsParams:
    aSI: float
    aIR: float
    aSR: float

    def __post_init__(self):
        if min(self.aSI, self.aIR, self.aSR) < 0:
            raise ValueError("SIRS rates must be non-negative")


def sirs_rhs(state, a_si, a_ir, a_sr):
    s, i, r = state
    n = s + i + r
    infect = a_si * s * i / n
    return (a_sr * r - infect, infect - a_ir * i, a_ir * i - a_sr * r)


def sirs_deterministic(p: SirsParams, t_end: float = 10.0, dt: float = DT) -> tuple[float, float, float]:
    """Fixed-step RK4 for one parameter set, in plain Python floats."""
    a_si, a_ir, a_sr = p.aSI, p.aIR, p.aSR
    s, i, r = INITIAL_STATE
    steps = int(round(t_end / dt))
    h = dt
    for _ in range(steps):
        n = s + i + r
        f1 = a_si * s * i / n
        k1 = (a_sr * r - f1, f1 - a_ir * i, a_ir * i - a_sr * r)
        s2, i2, r2 = s + 0.5 * h * k1[0], i + 0.5 * h * k1[1], r + 0.5 * h * k1[2]
        f2 = a_si * s2 * i2 / n
        k2 = (a_sr * r2 - f2, f2 - a_ir * i2, a_ir * i2 - a_sr * r2)
        s3, i3, r3 = s + 0.5 * h * k2[0], i + 0.5 * h * k2[1], r + 0.5 * h * k2[2]
        f3 = a_si * s3 * i3 / n
        k3 = (a_sr * r3 - f3, f3 - a_ir * i3, a_ir * i3 - a_sr * r3)
        s4, i4, r4 = s + h * k3[0], i + h * k3[1], r + h * k3[2]
        f4 = a_si * s4 * i4 / n
        k4 = (a_sr * r4 - f4, f4 - a_ir * i4, a_ir * i4 - a_sr * r4)
        s += h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        i += h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        r += h / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    return s, i, r


def sirs_deterministic_batch(params, t_end: float = 10.0, dt: float = DT) -> np.ndarray:
    """Vectorised RK4 over rows of ``params`` (columns aSI, aIR, aSR); returns n x 3."""
    p = np.atleast_2d(np.asarray(params, dtype=float))
    a_si, a_ir, a_sr = p[:, 0], p[:, 1], p[:, 2]
    y = np.tile(np.asarray(INITIAL_STATE), (p.shape[0], 1)).T.copy()
    n = y.sum(axis=0)

    def rhs(v):
        infect = a_si * v[0] * v[1] / n
        return np.stack((a_sr * v[2] - infect, infect - a_ir * v[1], a_ir * v[1] - a_sr * v[2]))

    h = dt
    for _ in range(int(round(t_end / dt))):
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * h * k1)
        k3 = rhs(y + 0.5 * h * k2)
        k4 = rhs(y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y.T


def _ssa_run(a_si, a_ir, a_sr, t_end, rng, batch=512):
    s, i, r = 950, 50, 0
    n = 1000
    t = 0.0
    u = rng.random((batch, 2))
    k = 0
    while True:
        r_inf = a_si * s * i / n
        r_rec = a_ir * i
        r_wan = a_sr * r
        total = r_inf + r_rec + r_wan
        if total <= 0.0:
            break
        if k == batch:
            u = rng.random((batch, 2))
            k = 0
        u1, u2 = u[k]
        k += 1
        t += -np.log1p(-u1) / total
        if t > t_end:
            break
        pick = u2 * total
        if pick < r_inf:
            s -= 1
            i += 1
        elif pick < r_inf + r_rec:
            i -= 1
            r += 1
        else:
            r -= 1
            s += 1
    return s, i, r


def sirs_gillespie(p: SirsParams, t_end: float = 10.0, seed: int = 0, reps: int = 1,
                   point_index: int = 0) -> np.ndarray:
    """Exact SSA replicates; returns a reps x 3 integer array of (S, I, R) at ``t_end``.

    Replicate ``j`` draws from its own stream keyed on ``(seed, point_index, j)``.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    out = np.empty((reps, 3), dtype=np.int64)
    for j in range(reps):
        rng = np.random.default_rng(np.random.SeedSequence([seed, point_index, j]))
        out[j] = _ssa_run(p.aSI, p.aIR, p.aSR, t_end, rng)
    return out


def _params_matrix(points: RunTable) -> np.ndarray:
    return points.matrix(SIRS_SPACE)


class OdeSimulator:
    """Deterministic SIRS as a batch simulator."""

    name = "sirs-ode"
    output_names = SIRS_OUTPUTS
    stochastic = False

    def __init__(self, t_end: float = 10.0):
        self.t_end = t_end

    def __call__(self, points: RunTable, seed: int = 0) -> RunTable:
        x = _params_matrix(points)
        y = sirs_deterministic_batch(x, self.t_end)
        return RunTable(SIRS_SPACE.names, x, SIRS_OUTPUTS, y)


class GillespieSimulator:
    """Stochastic SIRS; each input row is repeated ``reps`` times."""

    name = "sirs-gillespie"
    output_names = SIRS_OUTPUTS
    stochastic = True

    def __init__(self, reps: int = 20, t_end: float = 10.0):
        self.reps = reps
        self.t_end = t_end

    def __call__(self, points: RunTable, seed: int = 0) -> RunTable:
        x = _params_matrix(points)
        rows, outs, keys = [], [], []
        for idx, row in enumerate(x):
            res = sirs_gillespie(SirsParams(*row), self.t_end, seed, self.reps, idx)
            rows.append(np.repeat(row[None, :], self.reps, axis=0))
            outs.append(res.astype(float))
            keys.append(np.full(self.reps, idx))
        return RunTable(SIRS_SPACE.names, np.vstack(rows), SIRS_OUTPUTS, np.vstack(outs),
                        np.concatenate(keys))


def get_simulator(name: str, **kwargs):
    if name in ("sirs", "sirs-ode", "ode"):
        return OdeSimulator(**kwargs)
    if name in ("sirs-gillespie", "gillespie"):
        return GillespieSimulator(**kwargs)
    raise ValueError(f"unknown demo simulator {name!r}")


def make_wave0(space: ParameterSpace = SIRS_SPACE, n_train: int = 30, n_valid: int = 60,
               seed: int = 0, simulator=None) -> tuple[RunTable, RunTable]:
    """Seeded training and validation LHDs with simulator outputs attached."""
    s_train, s_valid, s_sim = np.random.SeedSequence(seed).spawn(3)
    sim = simulator or OdeSimulator()
    train = latin_hypercube(n_train, space, s_train)
    valid = latin_hypercube(n_valid, space, s_valid)
    sim_seed = int(s_sim.generate_state(1)[0])
    return sim(train, sim_seed), sim(valid, sim_seed + 1)
