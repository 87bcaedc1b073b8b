"""Parameter spaces, run tables and space-filling designs.

Everything downstream works in the scaled cube ``[-1, 1]^d``: the midpoint of
each range maps to 0 and the bounds to -1 and +1.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DegenerateRangeError, DomainError, SchemaError

__all__ = [
    "ParameterSpace",
    "RunTable",
    "scale_point",
    "unscale_point",
    "latin_hypercube",
    "maximin_thin",
    "enclosing_hyperrectangle",
]

# exhaustive maximin search is used while C(n, k) stays below this
EXACT_MAXIMIN_BUDGET = 20000


@dataclass(frozen=True)
class ParameterSpace:
    """Named continuous parameters with finite ranges.

    The order of ``names`` is the canonical column order for every matrix
    handled by the package.
    """

    names: tuple[str, ...]
    ranges: tuple[tuple[float, float], ...]

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        ranges = tuple((float(lo), float(hi)) for lo, hi in self.ranges)
        if len(names) != len(ranges):
            raise SchemaError("names and ranges differ in length")
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate parameter names in {names}")
        for name, (lo, hi) in zip(names, ranges):
            if not (np.isfinite(lo) and np.isfinite(hi)) or not lo < hi:
                raise DomainError(f"range for {name!r} must satisfy lower < upper, got [{lo}, {hi}]")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "ranges", ranges)

    @classmethod
    def from_dict(cls, ranges: Mapping[str, Sequence[float]]) -> "ParameterSpace":
        return cls(tuple(ranges), tuple(tuple(v) for v in ranges.values()))

    def to_dict(self) -> dict[str, list[float]]:
        return {n: [lo, hi] for n, (lo, hi) in zip(self.names, self.ranges)}

    @property
    def dim(self) -> int:
        return len(self.names)

    @property
    def lower(self) -> np.ndarray:
        return np.array([r[0] for r in self.ranges])

    @property
    def upper(self) -> np.ndarray:
        return np.array([r[1] for r in self.ranges])

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def half_width(self) -> np.ndarray:
        return 0.5 * (self.upper - self.lower)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"unknown parameter {name!r}") from None

    def contains(self, x, tol: float = 0.0) -> np.ndarray:
        """Row-wise membership test for natural-unit points."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        slack = tol * (self.upper - self.lower)
        return np.all((x >= self.lower - slack) & (x <= self.upper + slack), axis=1)

    def scale(self, x, allow_extrapolation: bool = False) -> np.ndarray:
        """Map natural-unit rows (n x d) into the scaled cube."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise SchemaError(f"expected {self.dim} columns, got {x.shape[-1]}")
        u = (x - self.midpoint) / self.half_width
        if not allow_extrapolation:
            bad = np.abs(u) > 1.0 + 1e-12
            if np.any(bad):
                col = self.names[int(np.argwhere(bad)[0][-1])]
                raise DomainError(f"value of {col!r} outside its range")
        return u

    def unscale(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape[-1] != self.dim:
            raise SchemaError(f"expected {self.dim} columns, got {u.shape[-1]}")
        return self.midpoint + u * self.half_width


def _point_vector(x, space: ParameterSpace) -> np.ndarray:
    if isinstance(x, Mapping):
        unknown = set(x) - set(space.names)
        missing = set(space.names) - set(x)
        if unknown or missing:
            raise SchemaError(f"point names do not match space: unknown={sorted(unknown)}, missing={sorted(missing)}")
        return np.array([float(x[n]) for n in space.names])
    return np.asarray(x, dtype=float)


def scale_point(x, space: ParameterSpace, allow_extrapolation: bool = False) -> np.ndarray:
    """Scale a single point (mapping name -> value, or a vector in canonical order)."""
    return space.scale(_point_vector(x, space), allow_extrapolation=allow_extrapolation)


def unscale_point(u, space: ParameterSpace) -> np.ndarray:
    return space.unscale(_point_vector(u, space))


def _fmt(v: float) -> str:
    # repr round-trips exactly, which keeps CSV output byte-stable
    v = float(v)
    if v == 0.0:
        return "0.0"
    return repr(v)


@dataclass(frozen=True)
class RunTable:
    """Parameter sets (rows) with named input columns and optional outputs."""

    input_names: tuple[str, ...]
    inputs: np.ndarray
    output_names: tuple[str, ...] = ()
    outputs: np.ndarray | None = None
    replicate_key: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        names = tuple(self.input_names)
        if inputs.shape[1] != len(names):
            raise SchemaError(f"{len(names)} input names for {inputs.shape[1]} columns")
        if len(set(names)) != len(names):
            raise SchemaError("duplicate input names")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "input_names", names)
        onames = tuple(self.output_names)
        if len(set(onames)) != len(onames):
            raise SchemaError("duplicate output names")
        if set(onames) & set(names):
            raise SchemaError("a column cannot be both input and output")
        object.__setattr__(self, "output_names", onames)
        if onames:
            outputs = np.asarray(self.outputs, dtype=float).reshape(inputs.shape[0], len(onames))
            object.__setattr__(self, "outputs", outputs)
        else:
            object.__setattr__(self, "outputs", None)
        if self.replicate_key is not None:
            key = np.asarray(self.replicate_key)
            if key.shape != (inputs.shape[0],):
                raise SchemaError("replicate_key needs one entry per row")
            object.__setattr__(self, "replicate_key", key)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @classmethod
    def from_columns(cls, columns: Mapping[str, Iterable[float]], input_names: Sequence[str],
                     replicate_key=None) -> "RunTable":
        missing = [n for n in input_names if n not in columns]
        if missing:
            raise SchemaError(f"missing input columns {missing}")
        inputs = np.column_stack([np.asarray(columns[n], dtype=float) for n in input_names])
        onames = tuple(n for n in columns if n not in input_names)
        outputs = (np.column_stack([np.asarray(columns[n], dtype=float) for n in onames])
                   if onames else None)
        return cls(tuple(input_names), inputs, onames, outputs, replicate_key)

    def output(self, name: str) -> np.ndarray:
        if name not in self.output_names:
            raise SchemaError(f"run table has no output column {name!r}")
        return self.outputs[:, self.output_names.index(name)]

    def has_outputs(self, names: Iterable[str]) -> bool:
        return all(n in self.output_names for n in names)

    def reordered(self, names: Sequence[str]) -> "RunTable":
        names = tuple(names)
        if self.input_names == names:
            return self
        if set(self.input_names) != set(names):
            raise SchemaError(
                f"input columns {sorted(self.input_names)} do not match parameters {sorted(names)}")
        order = [self.input_names.index(n) for n in names]
        return RunTable(names, self.inputs[:, order], self.output_names, self.outputs,
                        self.replicate_key)

    def aligned(self, space: ParameterSpace) -> "RunTable":
        """Reorder input columns to the canonical order of ``space``."""
        return self.reordered(space.names)

    def matrix(self, space: ParameterSpace) -> np.ndarray:
        return self.aligned(space).inputs

    def select(self, rows) -> "RunTable":
        rows = np.asarray(rows)
        key = None if self.replicate_key is None else self.replicate_key[rows]
        outputs = None if self.outputs is None else self.outputs[rows]
        return RunTable(self.input_names, self.inputs[rows], self.output_names, outputs, key)

    def inputs_only(self) -> "RunTable":
        return RunTable(self.input_names, self.inputs)

    def with_outputs(self, outputs: Mapping[str, Iterable[float]]) -> "RunTable":
        cols = {n: self.inputs[:, i] for i, n in enumerate(self.input_names)}
        for n in self.output_names:
            cols[n] = self.output(n)
        cols.update({n: np.asarray(v, dtype=float) for n, v in outputs.items()})
        return RunTable.from_columns(cols, self.input_names, self.replicate_key)

    def concat(self, other: "RunTable") -> "RunTable":
        other = other.reordered(self.input_names)
        if other.output_names != self.output_names:
            raise SchemaError("cannot concatenate tables with different outputs")
        outputs = None if self.outputs is None else np.vstack([self.outputs, other.outputs])
        key = None
        if self.replicate_key is not None and other.replicate_key is not None:
            theirs = other.replicate_key
            if len(self) and len(other) and np.intersect1d(self.replicate_key, theirs).size:
                # keep groups from the two tables distinct
                if np.issubdtype(theirs.dtype, np.integer) and np.issubdtype(self.replicate_key.dtype, np.integer):
                    theirs = theirs - theirs.min() + self.replicate_key.max() + 1
                else:
                    while np.intersect1d(self.replicate_key.astype(str), theirs.astype(str)).size:
                        theirs = np.array([f"{t}+" for t in theirs])
            key = np.concatenate([self.replicate_key, theirs])
        return RunTable(self.input_names, np.vstack([self.inputs, other.inputs]),
                        self.output_names, outputs, key)

    # CSV ------------------------------------------------------------------

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = list(self.input_names) + list(self.output_names)
        if self.replicate_key is not None:
            header.append("replicate")
        writer.writerow(header)
        for i in range(len(self)):
            row = [_fmt(v) for v in self.inputs[i]]
            if self.outputs is not None:
                row += [_fmt(v) for v in self.outputs[i]]
            if self.replicate_key is not None:
                row.append(str(self.replicate_key[i]))
            writer.writerow(row)
        return buf.getvalue()

    def to_csv(self, path) -> None:
        Path(path).write_text(self.to_csv_text())

    @classmethod
    def from_csv_text(cls, text: str, input_names: Sequence[str],
                      replicate_column: str | None = "replicate") -> "RunTable":
        reader = csv.reader(io.StringIO(text))
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError("empty CSV") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]
        if not rows:
            raise SchemaError("CSV holds no data rows")
        if len(set(header)) != len(header):
            raise SchemaError("duplicate column names in CSV header")
        key = None
        columns: dict[str, list] = {h: [] for h in header}
        for lineno, row in enumerate(rows, start=2):
            if len(row) != len(header):
                raise SchemaError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            for h, v in zip(header, row):
                columns[h].append(v.strip())
        if replicate_column and replicate_column in columns:
            raw = columns.pop(replicate_column)
            try:
                key = np.array([int(v) for v in raw])
            except ValueError:
                key = np.array(raw)
        parsed = {}
        for h, vals in columns.items():
            try:
                parsed[h] = np.array([float(v) for v in vals])
            except ValueError:
                raise SchemaError(f"column {h!r} holds non-numeric values") from None
        return cls.from_columns(parsed, list(input_names), key)

    @classmethod
    def read_csv(cls, path, input_names: Sequence[str],
                 replicate_column: str | None = "replicate") -> "RunTable":
        return cls.from_csv_text(Path(path).read_text(), input_names, replicate_column)


def latin_hypercube(n: int, space: ParameterSpace, seed=None) -> RunTable:
    """Jittered Latin hypercube of ``n`` points over ``space``.

    Each column is an independent random permutation of the ``n`` strata with a
    uniform offset inside the stratum.
    """
    if n < 1:
        raise ValueError("latin_hypercube needs n >= 1")
    rng = np.random.default_rng(seed)
    u = np.empty((n, space.dim))
    for j in range(space.dim):
        u[:, j] = (rng.permutation(n) + rng.random(n)) / n
    x = space.lower + u * (space.upper - space.lower)
    return RunTable(space.names, x)


def _as_matrix(points) -> tuple[np.ndarray, RunTable | None]:
    if isinstance(points, RunTable):
        return points.inputs, points
    return np.atleast_2d(np.asarray(points, dtype=float)), None


def _scaled_for_distance(x: np.ndarray, space: ParameterSpace | None) -> np.ndarray:
    if space is not None:
        return space.scale(x, allow_extrapolation=True)
    lo, hi = x.min(axis=0), x.max(axis=0)
    half = np.where(hi > lo, 0.5 * (hi - lo), 1.0)
    return (x - 0.5 * (hi + lo)) / half


def _min_pair_distance(dist: np.ndarray, combos: np.ndarray) -> np.ndarray:
    k = combos.shape[1]
    best = np.full(combos.shape[0], np.inf)
    for a in range(k):
        for b in range(a + 1, k):
            best = np.minimum(best, dist[combos[:, a], combos[:, b]])
    return best


def _exact_maximin(u: np.ndarray, k: int) -> np.ndarray:
    diff = u[:, None, :] - u[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    combos = np.array(list(combinations(range(u.shape[0]), k)), dtype=int)
    score = _min_pair_distance(dist, combos)
    # argmax returns the first maximiser, i.e. the lexicographically lowest rows
    return combos[int(np.argmax(score))]


def _greedy_maximin(u: np.ndarray, k: int) -> np.ndarray:
    n = u.shape[0]
    chunk = max(1, 4_000_000 // (n * u.shape[1]))  # keep each block near 32 MB
    best_d, best_pair = -1.0, (0, 1)
    for start in range(0, n, chunk):
        block = u[start:start + chunk]
        d2 = np.sum((block[:, None, :] - u[None, :, :]) ** 2, axis=-1)
        rows = np.arange(start, start + block.shape[0])
        d2[np.arange(block.shape[0]), rows] = -1.0
        d2[_lower_mask(rows, n)] = -1.0
        i, j = np.unravel_index(int(np.argmax(d2)), d2.shape)
        if d2[i, j] > best_d:
            best_d, best_pair = d2[i, j], (start + i, j)
    chosen = [min(best_pair), max(best_pair)]
    mind = np.minimum(np.sum((u - u[chosen[0]]) ** 2, axis=1), np.sum((u - u[chosen[1]]) ** 2, axis=1))
    mind[chosen] = -np.inf
    while len(chosen) < k:
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, np.sum((u - u[nxt]) ** 2, axis=1))
        mind[chosen] = -np.inf
    return np.sort(np.array(chosen))


def _lower_mask(rows: np.ndarray, n: int) -> np.ndarray:
    # mask for entries (i, j) with j <= i, so every pair is visited once
    return np.arange(n)[None, :] <= rows[:, None]


def maximin_thin(points, k: int, seed=None, space: ParameterSpace | None = None):
    """Select ``k`` rows maximising the minimum pairwise distance.

    Distances are Euclidean in scaled coordinates (``space`` if given, otherwise
    the points' own enclosing box). Small problems are solved exactly; larger
    ones use the greedy farthest-point rule seeded with the most distant pair.
    Ties go to the lowest row index. ``seed`` is accepted for interface
    symmetry; the selection itself is deterministic.
    """
    x, table = _as_matrix(points)
    n = x.shape[0]
    if k > n:
        raise ValueError(f"cannot keep {k} of {n} points")
    if k < 0:
        raise ValueError("k must be non-negative")
    if k == n:
        idx = np.arange(n)
    elif k == 0:
        idx = np.arange(0)
    elif k == 1:
        idx = np.array([0])
    else:
        u = _scaled_for_distance(x, space)
        if math.comb(n, k) <= EXACT_MAXIMIN_BUDGET:
            idx = _exact_maximin(u, k)
        else:
            idx = _greedy_maximin(u, k)
    if table is not None:
        return table.select(idx)
    return x[idx]


def enclosing_hyperrectangle(points, names: Sequence[str] | None = None) -> ParameterSpace:
    """Minimum enclosing box of the rows of ``points``."""
    x, table = _as_matrix(points)
    if table is not None:
        names = table.input_names
    if names is None:
        names = tuple(f"x{i + 1}" for i in range(x.shape[1]))
    if x.shape[0] < 2:
        raise DegenerateRangeError(names[0])
    lo, hi = x.min(axis=0), x.max(axis=0)
    for name, a, b in zip(names, lo, hi):
        if not b > a:
            raise DegenerateRangeError(name)
    return ParameterSpace(tuple(names), tuple(zip(lo.tolist(), hi.tolist())))
