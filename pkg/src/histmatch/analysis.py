"""History matching across waves, stopping rules and space summaries.

A wave trains emulators on the previous wave's runs, validates them,
proposes a design inside the region every wave so far leaves plausible and
runs the simulator there. The summaries describe how much of a box the
current emulators rule out: curves of the proportion removed against the
cutoff, and lattice projections (minimum implausibility and optical depth)
onto parameter pairs.
"""

from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .diagnostics import DiagnosticReport, validation_diagnostics
from .emulator import Target, TrainedEmulator, nth_implausibility, target_moments
from .errors import SchemaError
from .proposal import ProposalOptions, generate_new_design, multiwave_measure
from .space import ParameterSpace, RunTable, enclosing_hyperrectangle, latin_hypercube
from .training import EmulatorSet, TrainingOptions, emulator_from_data, train_variance_emulators

__all__ = [
    "WaveOptions",
    "StoppingRule",
    "WaveRecord",
    "WaveState",
    "split_runs",
    "evaluate_simulator",
    "init_state",
    "run_wave",
    "check_stopping",
    "match_count",
    "evaluation_points",
    "space_removed",
    "lattice_summary",
    "emulator_slice",
    "PLOT_TYPES",
    "MODIFIERS",
]

log = logging.getLogger("histmatch")

MODIFIERS = ("obs", "var", "hp", "disc")
PLOT_TYPES = ("exp", "var", "sd", "imp", "nimp")
DEFAULT_U_MOD = (0.8, 0.9, 1.0, 1.1, 1.2)


def _targets(targets: Mapping) -> dict[str, Target]:
    return {k: Target.from_spec(v) for k, v in targets.items()}


# -- waves ------------------------------------------------------------------

@dataclass(frozen=True)
class StoppingRule:
    """Stop when emulators are precise enough, the region is empty, enough runs match, or waves run out.

    ``ratio`` compares each emulator's prior residual sd with the combined
    observation and discrepancy sd of its target.
    """

    ratio: float = 0.5
    max_waves: int = 10
    match_target: int | None = None

    def __post_init__(self):
        if not self.ratio > 0:
            raise ValueError("ratio must be positive")
        if self.max_waves < 1:
            raise ValueError("max_waves must be at least 1")

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "StoppingRule":
        return cls(**dict(d or {}))


@dataclass(frozen=True)
class WaveOptions:
    n_points: int = 90
    validation_fraction: float = 1 / 3
    max_type1_fraction: float = 0.1
    variance_mode: bool = False
    outputs: tuple[str, ...] | None = None
    training: TrainingOptions = field(default_factory=TrainingOptions)
    proposal: ProposalOptions = field(default_factory=ProposalOptions)
    discrepancies: Mapping | None = None
    carry_over: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_points < 2:
            raise ValueError("n_points must be at least 2")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")


@dataclass
class WaveRecord:
    index: int
    space: ParameterSpace
    design: RunTable
    runs: RunTable
    train: RunTable
    validation: RunTable
    emulators: EmulatorSet | None = None
    diagnostics: DiagnosticReport | None = None
    proposal_status: str = "ok"
    proposal_cutoff: float | None = None
    flagged: bool = False
    failed_points: int = 0
    outputs: tuple[str, ...] = ()


@dataclass
class WaveState:
    space: ParameterSpace
    targets: dict[str, Target]
    waves: list[WaveRecord] = field(default_factory=list)
    stopped: str | None = None

    @property
    def current(self) -> WaveRecord:
        return self.waves[-1]

    @property
    def emulator_sets(self) -> list[EmulatorSet]:
        return [w.emulators for w in self.waves if w.emulators is not None]


def split_runs(runs: RunTable, validation_fraction: float, seed) -> tuple[RunTable, RunTable]:
    """Random train/validation split; replicate groups stay together."""
    rng = np.random.default_rng(seed)
    if runs.replicate_key is not None:
        keys = np.unique(runs.replicate_key)
        n_val = int(round(len(keys) * validation_fraction))
        val_keys = set(rng.permutation(keys)[:n_val].tolist())
        val = np.array([k in val_keys for k in runs.replicate_key])
    else:
        n = len(runs)
        n_val = int(round(n * validation_fraction))
        val = np.zeros(n, dtype=bool)
        val[rng.permutation(n)[:n_val]] = True
    return runs.select(np.flatnonzero(~val)), runs.select(np.flatnonzero(val))


def evaluate_simulator(simulator, design: RunTable, seed: int = 0) -> tuple[RunTable, int]:
    """Run ``simulator`` on ``design``; rows that fail or return non-finite outputs are dropped.

    A failing batch is retried one point at a time so one bad point cannot
    sink the rest.
    """
    try:
        runs = simulator(design, seed)
    except Exception:  # noqa: BLE001 - simulator errors are data here
        parts = []
        for i in range(len(design)):
            try:
                parts.append(simulator(design.select([i]), seed))
            except Exception as exc:  # noqa: BLE001
                warnings.warn(f"simulator failed at design row {i}: {exc}", RuntimeWarning, stacklevel=2)
        if not parts:
            return RunTable(design.input_names, np.zeros((0, len(design.input_names)))), len(design)
        runs = parts[0]
        for p in parts[1:]:
            runs = runs.concat(p)
    ok = np.all(np.isfinite(runs.outputs), axis=1) if runs.outputs is not None else np.ones(len(runs), bool)
    failed = int((~ok).sum())
    if failed:
        warnings.warn(f"{failed} simulator rows returned non-finite outputs and were excluded",
                      RuntimeWarning, stacklevel=2)
    return runs.select(np.flatnonzero(ok)), failed


def init_state(space: ParameterSpace, targets: Mapping, train: RunTable,
               validation: RunTable) -> WaveState:
    """Wave 0: the initial runs over the full space, already split."""
    design = train.concat(validation).inputs_only()
    runs = train.concat(validation)
    rec = WaveRecord(0, space, design, runs, train, validation)
    return WaveState(space, _targets(targets), [rec])


def _train(runs: RunTable, outputs, space, opts: WaveOptions):
    if opts.variance_mode:
        return train_variance_emulators(runs, outputs, space, opts.training, opts.discrepancies)
    return emulator_from_data(runs, outputs, space, opts.training, opts.discrepancies)


def _carried(state: WaveState, space: ParameterSpace, popts: ProposalOptions) -> RunTable:
    # training runs from the wave before last that every wave so far leaves plausible
    old = state.waves[-2].train
    x = old.matrix(space)
    inside = space.contains(x)
    if inside.any():
        score = multiwave_measure(popts.nth)(state.emulator_sets, x[inside], state.targets)
        inside[np.flatnonzero(inside)[score > popts.cutoff]] = False
    return old.select(np.flatnonzero(inside))


def run_wave(state: WaveState, simulator, opts: WaveOptions | None = None) -> WaveState:
    """One history matching wave.

    Trains wave-``k`` emulators on wave ``k - 1``'s runs over the box
    enclosing wave ``k - 1``'s design (the original space for ``k = 1``),
    validates them, proposes ``n_points`` from the region every wave so far
    leaves plausible and runs the simulator there. Too many Type I
    validation failures flag the wave and stop before proposing.
    """
    opts = opts or WaveOptions()
    if state.stopped:
        return state
    prev = state.current
    k = prev.index + 1
    s_split, s_prop, s_sim = np.random.SeedSequence([opts.seed, k]).spawn(3)
    outputs = list(opts.outputs or state.targets)
    missing = [o for o in outputs if o not in state.targets]
    if missing:
        raise SchemaError(f"no targets for outputs {missing}")
    space = state.space if k == 1 else enclosing_hyperrectangle(prev.design)
    train = prev.train
    if opts.carry_over and k >= 2:
        train = train.concat(_carried(state, space, opts.proposal))
    log.info(f"Wave {k}: training emulators for {', '.join(outputs)}")
    ems = _train(train, outputs, space, opts)
    targets = {o: state.targets[o] for o in outputs}
    report = validation_diagnostics(ems, targets, prev.validation) if len(prev.validation) else None
    rec = WaveRecord(k, space, RunTable(space.names, np.zeros((0, space.dim))),
                     RunTable(space.names, np.zeros((0, space.dim))),
                     RunTable(space.names, np.zeros((0, space.dim))),
                     RunTable(space.names, np.zeros((0, space.dim))), ems, report)
    rec.outputs = tuple(outputs)
    state.waves.append(rec)
    if report is not None and report.type1_fraction() > opts.max_type1_fraction:
        rec.flagged = True
        state.stopped = "diagnostics"
        warnings.warn(f"wave {k}: Type I failure fraction {report.type1_fraction():.2f} exceeds "
                      f"{opts.max_type1_fraction:.2f}; not advancing", RuntimeWarning, stacklevel=2)
        return state
    popts = ProposalOptions(**{**opts.proposal.__dict__, "seed": int(s_prop.generate_state(1)[0])})
    waves = state.emulator_sets
    result = generate_new_design(waves, opts.n_points, state.targets, popts, box=space,
                                 measure=multiwave_measure(popts.nth))
    rec.proposal_status, rec.proposal_cutoff = result.status, result.cutoff
    if result.empty:
        state.stopped = "empty-space"
        return state
    rec.design = result.points
    runs, failed = evaluate_simulator(simulator, result.points, int(s_sim.generate_state(1)[0]))
    rec.runs, rec.failed_points = runs, failed
    rec.train, rec.validation = split_runs(runs, opts.validation_fraction, s_split)
    return state


def check_stopping(state: WaveState, rule: StoppingRule | None = None) -> tuple[bool, str]:
    """Decide whether to stop after the latest wave, with a reason."""
    rule = rule or StoppingRule()
    if len(state.waves) < 2:
        return False, "no completed wave"
    if state.stopped == "empty-space" or state.current.proposal_status == "empty":
        return True, "empty-space"
    if state.stopped == "diagnostics":
        return True, "diagnostics"
    ems = state.current.emulators
    if ems is not None:
        ratios = []
        for name, em in ems.items():
            _, var_e = target_moments(state.targets[name])
            ratios.append(em.sigma / math.sqrt(var_e + em.prior.discrepancy_var))
        if ratios and max(ratios) < rule.ratio:
            return True, "variance-dominance"
    if rule.match_target is not None and len(state.current.runs):
        count, _ = match_count(state.current.runs, state.targets)
        if count >= rule.match_target:
            return True, "match-count"
    if state.current.index >= rule.max_waves:
        return True, "max-waves"
    return False, "continue"


def match_count(runs: RunTable, targets: Mapping) -> tuple[int, np.ndarray]:
    """Rows whose every targeted output lies in its 3-sigma band or interval."""
    targets = _targets(targets)
    missing = [k for k in targets if k not in runs.output_names]
    if missing:
        raise SchemaError(f"runs have no output columns {missing}")
    ok = np.ones(len(runs), dtype=bool)
    for k, t in targets.items():
        lo, hi = t.bounds()
        y = runs.output(k)
        ok &= (y >= lo) & (y <= hi)
    return int(ok.sum()), ok


# -- space summaries ---------------------------------------------------------

def evaluation_points(box: ParameterSpace, ppd: int, budget: int = 1_000_000,
                      lhd_size: int = 50_000, seed: int = 0) -> tuple[np.ndarray, bool]:
    """A ``ppd``-per-dimension grid over ``box``, or an LHD if the grid exceeds ``budget``.

    Returns the points and whether they form a grid.
    """
    if ppd < 2:
        raise ValueError("ppd must be at least 2")
    if ppd ** box.dim <= budget:
        axes = [np.linspace(lo, hi, ppd) for lo, hi in box.ranges]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, box.dim)
        return grid, True
    return latin_hypercube(min(lhd_size, budget), box, seed).inputs, False


def _modified(ems: Mapping[str, TrainedEmulator], targets, modified: str, m: float):
    if modified == "obs":
        return ems, {k: t.scaled(m) for k, t in targets.items()}
    out = {}
    for k, em in ems.items():
        pr = em.prior
        if modified == "var":
            pr = pr.replace(sigma_sq=pr.sigma_sq * m)
        elif modified == "hp":
            pr = pr.replace(correlator=pr.correlator.replace(theta=pr.correlator.theta * m))
        elif modified == "disc":
            pr = pr.replace(discrepancy=(pr.discrepancy[0] * m, pr.discrepancy[1] * m))
        out[k] = em.with_prior(pr)
    return out, targets


def space_removed(ems: Mapping[str, TrainedEmulator], targets: Mapping, ppd: int = 10,
                  modified: str = "obs", u_mod: Sequence[float] = DEFAULT_U_MOD,
                  cutoffs: Sequence[float] | None = None, nth: int = 1,
                  box: ParameterSpace | None = None, budget: int = 1_000_000,
                  seed: int = 0) -> dict:
    """Proportion of ``box`` with implausibility above each cutoff, per multiplier.

    ``modified`` picks what the multipliers scale: ``obs`` the target sds,
    ``var`` the prior variances sigma^2, ``hp`` the correlation lengths,
    ``disc`` the discrepancy sds. Modified priors are re-adjusted to the
    same training runs.
    """
    if modified not in MODIFIERS:
        raise ValueError(f"modified must be one of {MODIFIERS}")
    targets = _targets(targets)
    names = list(ems)
    box = box or ems[names[0]].space
    x, is_grid = evaluation_points(box, ppd, budget, seed=seed)
    cutoffs = np.asarray(cutoffs if cutoffs is not None else np.round(np.arange(0.5, 10.01, 0.25), 10),
                         dtype=float)
    curves = {}
    for m in u_mod:
        e, t = _modified(ems, targets, modified, float(m))
        imp = nth_implausibility(e, x, {k: t[k] for k in names}, min(nth, len(names)))
        curves[float(m)] = np.array([float(np.mean(imp > c)) for c in cutoffs])
    return {"cutoffs": cutoffs, "curves": curves, "modified": modified, "grid": is_grid,
            "n_points": len(x)}


@dataclass
class LatticeSummary:
    names: tuple[str, ...]
    ppd: int
    min_imp: dict[tuple[int, int], np.ndarray]
    depth2: dict[tuple[int, int], np.ndarray]
    depth1: dict[int, np.ndarray]
    centres: list[np.ndarray]

    def rows(self):
        """Flat records: (kind, p1, p2, bin1, bin2, x1, x2, value)."""
        out = []
        for (i, j), grid in self.min_imp.items():
            for a in range(self.ppd):
                for b in range(self.ppd):
                    out.append(("min_imp", self.names[i], self.names[j], a, b,
                                self.centres[i][a], self.centres[j][b], grid[a, b]))
        for (i, j), grid in self.depth2.items():
            for a in range(self.ppd):
                for b in range(self.ppd):
                    out.append(("depth", self.names[i], self.names[j], a, b,
                                self.centres[i][a], self.centres[j][b], grid[a, b]))
        for i, vec in self.depth1.items():
            for a in range(self.ppd):
                out.append(("depth", self.names[i], "", a, -1, self.centres[i][a], math.nan, vec[a]))
        return out


def lattice_summary(ems, targets: Mapping | None, ppd: int = 20, nth: int = 1, cutoff: float = 3.0,
                    box: ParameterSpace | None = None, measure: Callable | None = None,
                    budget: int = 1_000_000, seed: int = 0) -> LatticeSummary:
    """Pairwise and one-dimensional projections of the acceptable region.

    For each parameter pair the evaluation set is binned ``ppd x ppd`` by the
    pair's values. Each bin records the minimum score (nth-maximum
    implausibility by default) and the optical depth, i.e. the fraction of
    its points that are acceptable. Single parameters get the depth only.
    A custom ``measure(ems, x, targets, cutoff)`` may return scores or
    booleans; booleans leave the minimum-score grids as NaN.
    """
    if box is None:
        box = next(iter(ems.values())).space
    x, _ = evaluation_points(box, ppd, budget, seed=seed)
    if measure is None:
        tg = _targets(targets)
        score = nth_implausibility(ems, x, tg, min(nth, len(ems)))
    else:
        score = np.asarray(measure(ems, x, targets, cutoff))
    if score.dtype == bool:
        ok, score = score, None
    else:
        ok = score <= cutoff
    lo, hi = box.lower, box.upper
    bins = np.clip(np.floor((x - lo) / (hi - lo) * ppd).astype(int), 0, ppd - 1)
    edges = [np.linspace(a, b, ppd + 1) for a, b in box.ranges]
    centres = [0.5 * (e[1:] + e[:-1]) for e in edges]
    min_imp, depth2, depth1 = {}, {}, {}
    for i, j in itertools.combinations(range(box.dim), 2):
        flat = bins[:, i] * ppd + bins[:, j]
        count = np.bincount(flat, minlength=ppd * ppd).astype(float)
        acc = np.bincount(flat, weights=ok.astype(float), minlength=ppd * ppd)
        with np.errstate(invalid="ignore", divide="ignore"):
            depth2[(i, j)] = np.where(count > 0, acc / np.maximum(count, 1), np.nan).reshape(ppd, ppd)
        m = np.full(ppd * ppd, np.nan)
        if score is not None:
            m_ = np.full(ppd * ppd, np.inf)
            np.minimum.at(m_, flat, score)
            m = np.where(np.isfinite(m_), m_, np.nan)
        min_imp[(i, j)] = m.reshape(ppd, ppd)
    for i in range(box.dim):
        count = np.bincount(bins[:, i], minlength=ppd).astype(float)
        acc = np.bincount(bins[:, i], weights=ok.astype(float), minlength=ppd)
        depth1[i] = np.where(count > 0, acc / np.maximum(count, 1), np.nan)
    return LatticeSummary(box.names, ppd, min_imp, depth2, depth1, centres)


def emulator_slice(ems: Mapping[str, TrainedEmulator], pair: Sequence[str], fixed: Mapping | None = None,
                   ppd: int = 20, plot_type: str = "exp", targets: Mapping | None = None,
                   nth: int = 1, box: ParameterSpace | None = None) -> RunTable:
    """Emulator quantities on a ``ppd x ppd`` grid over two parameters.

    Remaining parameters sit at ``fixed`` values (default: box midpoints).
    ``exp``, ``var`` and ``sd`` give one column per output, ``imp`` one
    implausibility column per output, and ``nimp`` the single ``nth``-maximum
    implausibility; the last two need targets.
    """
    if plot_type not in PLOT_TYPES:
        raise SchemaError(f"plot_type must be one of {PLOT_TYPES}, got {plot_type!r}")
    if plot_type in ("imp", "nimp") and not targets:
        raise SchemaError(f"plot_type {plot_type!r} needs targets")
    names = list(ems)
    box = box or ems[names[0]].space
    if len(pair) != 2 or pair[0] == pair[1]:
        raise SchemaError("slice needs two distinct parameters")
    i, j = box.index(pair[0]), box.index(pair[1])
    fixed = dict(fixed or {})
    for k in fixed:
        box.index(k)
    base = box.midpoint.copy()
    for k, v in fixed.items():
        base[box.index(k)] = float(v)
    a = np.linspace(*box.ranges[i], ppd)
    b = np.linspace(*box.ranges[j], ppd)
    aa, bb = np.meshgrid(a, b, indexing="ij")
    x = np.tile(base, (ppd * ppd, 1))
    x[:, i], x[:, j] = aa.ravel(), bb.ravel()
    cols, vals = [], []
    if plot_type == "nimp":
        tg = _targets(targets)
        cols.append("nimp")
        vals.append(nth_implausibility(ems, x, tg, min(nth, len(names))))
    else:
        tg = _targets(targets) if targets else {}
        for k in names:
            em = ems[k]
            if plot_type == "exp":
                vals.append(em.get_exp(x))
            elif plot_type == "var":
                vals.append(em.get_cov(x))
            elif plot_type == "sd":
                vals.append(np.sqrt(em.get_cov(x)))
            else:
                if k not in tg:
                    raise SchemaError(f"no target for {k!r}")
                vals.append(em.implausibility(x, tg[k]))
            cols.append(k if plot_type == "exp" else f"{k}_{plot_type}")
    return RunTable(box.names, x, tuple(cols), np.column_stack(vals))
