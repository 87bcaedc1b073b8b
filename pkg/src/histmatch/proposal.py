"""Space-filling designs from the not-yet-ruled-out region.

The pipeline:

1. evaluate a large Latin hypercube over the box and keep acceptable points;
2. line sampling: rays through distant pairs of accepted points, keeping
   accepted points next to a rejected neighbour or at the box edge;
3. ellipsoid importance sampling around the accepted points, weighting each
   draw by the number of ellipsoids that contain it;
4. resample: maximin-thin to half the requested size and repeat 2-3;
5. maximin-thin to the requested size.

If too few LHD points are acceptable, a cutoff ladder starts from a looser
cutoff and tightens towards the requested one, reusing survivors as seeds.
Any acceptance rule can be plugged in through ``measure``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .emulator import Target, nth_implausibility
from .space import ParameterSpace, RunTable, latin_hypercube, maximin_thin

__all__ = [
    "ProposalOptions",
    "ProposalResult",
    "Acceptor",
    "implausibility_measure",
    "multiwave_measure",
    "lhd_reject",
    "line_sample",
    "ellipsoid_importance_sample",
    "resample_pass",
    "cutoff_ladder",
    "generate_new_design",
]

log = logging.getLogger("histmatch")

Measure = Callable[..., np.ndarray]


@dataclass(frozen=True)
class ProposalOptions:
    cutoff: float = 3.0
    nth: int = 1
    lhd_multiplier: int = 10
    lhd_cap: int = 20000
    n_lines: int = 20
    points_per_line: int = 20
    burn_in: int = 200
    burn_in_rounds: int = 12
    accept_band: tuple[float, float] = (0.1, 0.8)
    resample: int = 1
    seed: int = 0
    ladder: tuple[float, ...] | None = None
    ladder_extension: int = 6
    max_draw_factor: int = 400

    def __post_init__(self):
        if not self.cutoff > 0:
            raise ValueError("cutoff must be positive")
        for name in ("nth", "lhd_multiplier", "lhd_cap", "n_lines", "points_per_line", "burn_in"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.points_per_line < 2:
            raise ValueError("points_per_line must be at least 2")
        if self.resample < 0:
            raise ValueError("resample must be non-negative")
        lo, hi = self.accept_band
        if not 0 < lo < hi < 1:
            raise ValueError("accept_band must satisfy 0 < lower < upper < 1")

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "ProposalOptions":
        d = dict(d or {})
        for key in ("accept_band", "ladder"):
            if d.get(key) is not None:
                d[key] = tuple(float(v) for v in d[key])
        return cls(**d)


# -- acceptance -------------------------------------------------------------

def implausibility_measure(nth: int = 1) -> Measure:
    """The default measure: ``nth``-maximum implausibility across outputs."""
    def measure(ems, x, targets, cutoff=None):
        return nth_implausibility(ems, x, targets, min(nth, len(ems)))
    measure.scored = True
    return measure


def multiwave_measure(nth: int = 1) -> Measure:
    """Largest over waves of each wave's ``nth``-maximum implausibility.

    ``ems`` is a sequence of emulator collections, one per wave, so a point
    must survive every wave to be accepted.
    """
    def measure(waves, x, targets, cutoff=None):
        scores = [nth_implausibility(ems, x, {k: targets[k] for k in ems}, min(nth, len(ems)))
                  for ems in waves]
        return np.max(np.vstack(scores), axis=0)
    measure.scored = True
    return measure


class Acceptor:
    """Applies a measure to points given in scaled box coordinates.

    A measure returning numbers is a score (accept when ``<= cutoff``); one
    returning booleans is used as is.
    """

    def __init__(self, measure: Measure, ems, targets, box: ParameterSpace):
        self.measure = measure
        self.ems = ems
        self.targets = targets
        self.box = box
        self.evaluations = 0

    def _call(self, u, cutoff):
        x = self.box.unscale(u)
        self.evaluations += len(u)
        return np.asarray(self.measure(self.ems, x, self.targets, cutoff))

    def scores(self, u, cutoff):
        """Numeric scores, or ``None`` if the measure is boolean."""
        u = np.atleast_2d(u)
        if len(u) == 0:
            return np.zeros(0)
        out = self._call(u, cutoff)
        return None if out.dtype == bool else out.astype(float)

    def accept(self, u, cutoff) -> np.ndarray:
        u = np.atleast_2d(u)
        if len(u) == 0:
            return np.zeros(0, dtype=bool)
        return self._decide(self._call(u, cutoff), cutoff)

    def accept_natural(self, x, cutoff) -> np.ndarray:
        """Acceptance of points already in natural units."""
        x = np.atleast_2d(x)
        if len(x) == 0:
            return np.zeros(0, dtype=bool)
        self.evaluations += len(x)
        return self._decide(np.asarray(self.measure(self.ems, x, self.targets, cutoff)), cutoff)

    @staticmethod
    def _decide(out, cutoff):
        if out.dtype == bool:
            return out
        return out <= cutoff


# -- stages -----------------------------------------------------------------

def _in_box(u, tol=0.0):
    return np.all(np.abs(u) <= 1.0 + tol, axis=1)


def lhd_reject(acceptor: Acceptor, size: int, cutoff: float, rng) -> tuple[np.ndarray, np.ndarray | None]:
    """Scaled LHD points accepted at ``cutoff``, plus all scores for ladder reuse."""
    unit = ParameterSpace(acceptor.box.names, tuple((-1.0, 1.0) for _ in acceptor.box.names))
    u = latin_hypercube(size, unit, rng).inputs
    scores = acceptor.scores(u, cutoff)
    keep = scores <= cutoff if scores is not None else acceptor.accept(u, cutoff)
    return u[keep], (u, scores)


def _ray_bounds(a, v):
    # parameter range [t0, t1] keeping a + t v inside [-1, 1]^d
    t0, t1 = -np.inf, np.inf
    for ai, vi in zip(a, v):
        if vi == 0:
            continue
        lo, hi = (-1 - ai) / vi, (1 - ai) / vi
        if lo > hi:
            lo, hi = hi, lo
        t0, t1 = max(t0, lo), min(t1, hi)
    return t0, t1


def line_sample(points: np.ndarray, acceptor: Acceptor, cutoff: float, rng,
                n_lines: int = 20, points_per_line: int = 20, max_pool: int = 1000) -> np.ndarray:
    """Boundary points found along rays through pairs of accepted points.

    Pairs are drawn with probability proportional to their separation. Each
    ray runs between the box faces it meets, with ``points_per_line`` equally
    spaced evaluations including both ends.
    """
    points = np.atleast_2d(points)
    m = len(points)
    if m < 2:
        warnings.warn("line sampling needs at least two accepted points", RuntimeWarning, stacklevel=2)
        return np.zeros((0, acceptor.box.dim))
    pool = points
    if m > max_pool:
        pool = points[np.sort(rng.choice(m, max_pool, replace=False))]
        m = max_pool
    i, j = np.triu_indices(m, 1)
    dist = np.sqrt(np.sum((pool[i] - pool[j]) ** 2, axis=1))
    if not np.any(dist > 0):
        return np.zeros((0, acceptor.box.dim))
    picks = rng.choice(len(i), size=n_lines, replace=True, p=dist / dist.sum())
    rays, kept = [], []
    for k in picks:
        a, b = pool[i[k]], pool[j[k]]
        v = b - a
        if not np.any(v):
            continue
        t0, t1 = _ray_bounds(a, v)
        ts = np.linspace(t0, t1, points_per_line)
        ray = np.clip(a[None, :] + ts[:, None] * v[None, :], -1.0, 1.0)
        rays.append(ray)
    if not rays:
        return np.zeros((0, acceptor.box.dim))
    allpts = np.vstack(rays)
    ok = acceptor.accept(allpts, cutoff).reshape(len(rays), points_per_line)
    for ray, acc in zip(rays, ok):
        nb_bad = np.zeros(points_per_line, dtype=bool)
        nb_bad[1:] |= ~acc[:-1]
        nb_bad[:-1] |= ~acc[1:]
        end = np.zeros(points_per_line, dtype=bool)
        end[[0, -1]] = True
        kept.append(ray[acc & (nb_bad | end)])
    out = np.vstack(kept)
    return np.unique(out, axis=0) if len(out) else out


def _shape_matrix(centres: np.ndarray) -> tuple[np.ndarray, bool]:
    d = centres.shape[1]
    if len(centres) >= d + 1:
        cov = np.atleast_2d(np.cov(centres, rowvar=False))
        w = np.linalg.eigvalsh(cov)
        if w[0] > 1e-10 * max(w[-1], 1e-300):
            return cov, False
    spread = centres.var(axis=0) if len(centres) > 1 else np.zeros(d)
    return np.diag(np.maximum(spread, 0.1 ** 2)), True


def ellipsoid_importance_sample(centres: np.ndarray, acceptor: Acceptor, cutoff: float,
                                n_wanted: int, rng, burn_in: int = 200, burn_in_rounds: int = 12,
                                accept_band=(0.1, 0.8), max_draws: int | None = None):
    """Uniform draws from the accepted part of a union of ellipsoids.

    Every centre carries the same ellipsoid shape (the centres' covariance,
    or an axis-aligned fallback if it is degenerate) and a common radius. A
    draw picks a centre uniformly and a point uniformly inside its ellipsoid;
    it is kept if it lies in the box and is accepted, with weight
    ``1 / (number of ellipsoids containing it)``. Keeping each draw with
    probability equal to its weight leaves a uniform sample on the union.

    Returns ``(points, weights, radius)``; draws continue until the weights
    sum to ``n_wanted`` or ``max_draws`` is reached.
    """
    centres = np.atleast_2d(centres)
    d = centres.shape[1]
    cov, fallback = _shape_matrix(centres)
    if fallback and len(centres) >= d + 1:
        warnings.warn("degenerate seed covariance; using axis-aligned ellipsoids", RuntimeWarning,
                      stacklevel=2)
    evals, evecs = np.linalg.eigh(cov)
    evals = np.maximum(evals, 1e-300)
    chol = evecs * np.sqrt(evals)          # maps the unit ball to the shape
    inv = (evecs / np.sqrt(evals)).T        # whitening map
    # longest semi-axis reaches, on average, the nearest box face
    face = np.mean(1.0 - np.max(np.abs(centres), axis=1))
    radius = max(face, 1e-3) / math.sqrt(evals[-1])
    wc = centres @ inv.T

    def draw(m, rad):
        idx = rng.integers(len(centres), size=m)
        z = rng.normal(size=(m, d))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        z *= rng.random(m)[:, None] ** (1.0 / d)
        return centres[idx] + rad * z @ chol.T

    lo, hi = accept_band
    for _ in range(burn_in_rounds):
        cand = draw(burn_in, radius)
        ok = _in_box(cand)
        ok[ok] = acceptor.accept(cand[ok], cutoff)
        rate = ok.mean()
        if rate < lo:
            radius *= 0.8
        elif rate > hi:
            radius *= 1.25
        else:
            break

    max_draws = max_draws or 400 * max(n_wanted, 1)
    pts, wts = [], []
    total_w, drawn = 0.0, 0
    batch = max(64, 2 * n_wanted)
    while total_w < n_wanted and drawn < max_draws:
        cand = draw(batch, radius)
        drawn += batch
        ok = _in_box(cand)
        ok[ok] = acceptor.accept(cand[ok], cutoff)
        cand = cand[ok]
        if len(cand) == 0:
            continue
        wz = cand @ inv.T
        cnt = np.zeros(len(cand))
        for s in range(0, len(wc), 256):
            d2 = np.sum((wz[:, None, :] - wc[None, s:s + 256, :]) ** 2, axis=-1)
            cnt += np.sum(d2 <= radius * radius * (1 + 1e-12), axis=1)
        w = 1.0 / np.maximum(cnt, 1.0)
        pts.append(cand)
        wts.append(w)
        total_w += float(w.sum())
    if not pts:
        return np.zeros((0, d)), np.zeros(0), radius
    return np.vstack(pts), np.concatenate(wts), radius


def _importance_stage(seeds, acceptor, cutoff, n_points, rng, opts: ProposalOptions):
    pts, wts, _ = ellipsoid_importance_sample(
        seeds, acceptor, cutoff, n_points, rng, opts.burn_in, opts.burn_in_rounds,
        opts.accept_band, opts.max_draw_factor * max(n_points, 1))
    keep = rng.random(len(wts)) < wts
    return pts[keep]


def _union(d, *arrays):
    arrays = [a for a in arrays if len(a)]
    if not arrays:
        return np.zeros((0, d))
    return np.unique(np.vstack(arrays), axis=0)


def _explore(seeds, acceptor, cutoff, n_points, rngs, opts, say):
    d = acceptor.box.dim
    say("Performing line sampling...")
    if len(seeds) >= 2:
        boundary = line_sample(seeds, acceptor, cutoff, next(rngs), opts.n_lines, opts.points_per_line)
    else:
        next(rngs)
        boundary = np.zeros((0, d))
    pool = _union(d, seeds, boundary)
    say(f"Line sampling generated {len(boundary)} more points.")
    say("Performing importance sampling...")
    imp = _importance_stage(pool, acceptor, cutoff, n_points, next(rngs), opts)
    say(f"Importance sampling generated {len(imp)} more points.")
    return _union(d, pool, imp)


def resample_pass(points, acceptor, cutoff, n_points, rngs, opts, say=lambda m: None):
    """Thin to ``n_points // 2`` by maximin, then rerun line and importance sampling."""
    k = min(len(points), max(n_points // 2, 1))
    thinned = maximin_thin(points, k) if k < len(points) else points
    return _explore(thinned, acceptor, cutoff, n_points, rngs, opts, say)


def cutoff_ladder(cutoff: float, ladder: Sequence[float] | None = None, extension: int = 6) -> list[float]:
    """Descending cutoffs ending at ``cutoff``.

    The default rungs are ``cutoff * (2, 1.5, 1.25, 1)``; ``extension`` adds
    doubling rungs above the loosest one for regions too small to hit with
    the initial LHD.
    """
    rungs = sorted({float(c) for c in (ladder or (2 * cutoff, 1.5 * cutoff, 1.25 * cutoff))} | {cutoff},
                   reverse=True)
    rungs = [c for c in rungs if c >= cutoff]
    top = rungs[0]
    extra = [top * 2 ** k for k in range(extension, 0, -1)]
    return extra + rungs


@dataclass
class ProposalResult:
    points: RunTable
    cutoff: float
    status: str
    messages: list[str] = field(default_factory=list)
    evaluations: int = 0

    @property
    def empty(self) -> bool:
        return self.status == "empty"

    def __len__(self) -> int:
        return len(self.points)


def _rng_stream(seed):
    ss = np.random.SeedSequence(seed)
    while True:
        (child,) = ss.spawn(1)
        yield np.random.default_rng(child)


def generate_new_design(ems, n_points: int, targets: Mapping, opts: ProposalOptions | None = None,
                        box: ParameterSpace | None = None, measure: Measure | None = None,
                        progress: Callable[[str], None] | None = None) -> ProposalResult:
    """Propose ``n_points`` acceptable points spread over the acceptable region.

    ``ems`` is an emulator collection, or a list of them (one per wave) in
    which case a point must pass every wave. ``box`` defaults to the
    parameter space of the (last) emulators. Every returned point is
    re-checked against the measure at ``opts.cutoff``.
    """
    opts = opts or ProposalOptions()
    if n_points < 1:
        raise ValueError("n_points must be at least 1")
    multi = isinstance(ems, (list, tuple))
    if box is None:
        if ems is None or (multi and not ems):
            raise ValueError("a box is required when no emulators are given")
        last = ems[-1] if multi else ems
        box = next(iter(last.values())).space
    if measure is None:
        measure = multiwave_measure(opts.nth) if multi else implausibility_measure(opts.nth)
    if targets is not None:
        targets = {k: Target.from_spec(v) for k, v in targets.items()}
    acceptor = Acceptor(measure, ems, targets, box)
    messages: list[str] = []

    def say(msg):
        messages.append(msg)
        (progress or log.info)(msg)

    rngs = _rng_stream(opts.seed)
    cutoff = opts.cutoff
    d = box.dim
    size = min(opts.lhd_multiplier * n_points, opts.lhd_cap)
    say("Proposing from LHS...")
    seeds, (lhd_u, lhd_scores) = lhd_reject(acceptor, size, cutoff, next(rngs))
    say(f"{len(seeds)} initial valid points generated for I={cutoff:g}")

    rungs = [cutoff]
    if len(seeds) < d + 1:
        ladder = cutoff_ladder(cutoff, opts.ladder, opts.ladder_extension)
        n_extra = opts.ladder_extension

        def accepted_at(c):
            keep = lhd_scores <= c if lhd_scores is not None else acceptor.accept(lhd_u, c)
            return lhd_u[keep]

        # start from the loosest default rung; only if it finds nothing,
        # fall back to the tightest doubling rung that does
        start = None
        if len(accepted_at(ladder[n_extra])):
            start = ladder[n_extra]
        else:
            for c in reversed(ladder[:n_extra]):
                if len(accepted_at(c)):
                    start = c
                    break
        if start is None:
            say(f"No acceptable points found, even at cutoff {ladder[0]:g}")
            return ProposalResult(RunTable(box.names, np.zeros((0, d))), ladder[0], "empty",
                                  messages, acceptor.evaluations)
        rungs = [c for c in ladder if c <= start]
        seeds = accepted_at(start)
        if start != cutoff:
            say(f"{len(seeds)} initial valid points generated for I={start:g}")

    current = seeds
    for rung, nxt in zip(rungs, rungs[1:] + [None]):
        current = _explore(current, acceptor, rung, n_points, rngs, opts, say)
        if nxt is None:
            break
        ok = acceptor.accept(current, nxt) if len(current) else np.zeros(0, dtype=bool)
        tries = 0
        while not ok.any() and tries < 2:
            current = _explore(current, acceptor, rung, n_points, rngs, opts, say)
            ok = acceptor.accept(current, nxt)
            tries += 1
        if not ok.any():
            say(f"No acceptable points found at cutoff {nxt:g}")
            return ProposalResult(RunTable(box.names, np.zeros((0, d))), nxt, "empty",
                                  messages, acceptor.evaluations)
        current = current[ok]
        say(f"Tightening cutoff to I={nxt:g}: {len(current)} points retained")

    for r in range(opts.resample):
        say(f"Resample {r + 1}")
        current = resample_pass(current, acceptor, cutoff, n_points, rngs, opts, say)

    # post-hoc check at the requested cutoff, on the exact values returned
    x = box.unscale(current) if len(current) else np.zeros((0, d))
    if len(x):
        x = x[box.contains(x)]
        x = x[acceptor.accept_natural(x, cutoff)]
    if len(x) == 0:
        return ProposalResult(RunTable(box.names, np.zeros((0, d))), cutoff, "empty",
                              messages, acceptor.evaluations)
    status = "ok"
    if len(x) < n_points:
        warnings.warn(f"only {len(x)} acceptable points found; {n_points} requested",
                      RuntimeWarning, stacklevel=2)
        status = "short"
    else:
        say("Selecting final points using maximin criterion...")
        x = maximin_thin(x, n_points, space=box)
    return ProposalResult(RunTable(box.names, x), cutoff, status, messages, acceptor.evaluations)
