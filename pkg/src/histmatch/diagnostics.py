"""Emulator validation: comparison, classification and standardised errors.

Each test compares emulator predictions with held-out simulator runs (or,
without a validation table, leave-one-out predictions on the training runs).
For stochastic emulator sets the validation table holds raw replicates; the
expectation emulators are checked against replicate means and the variance
emulators against sample variances, each with the matching sampling noise
added to the predictive variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import linalg

from .emulator import Target, TrainedEmulator, target_moments
from .errors import NumericDegeneracyError, SchemaError
from .space import RunTable, _fmt
from .training import EmulatorSet, aggregate_replicates

__all__ = [
    "Predictions",
    "EmulatorDiagnostics",
    "DiagnosticReport",
    "predictions",
    "loo_predictions",
    "comparison_test",
    "classification_test",
    "standardized_errors",
    "validation_diagnostics",
]


@dataclass
class Predictions:
    """Emulator moments next to the simulator values they should match.

    ``noise_var`` is sampling noise in ``observed`` (zero for deterministic
    runs), ``process_var`` the simulator's run-to-run variance, and
    ``on_training`` marks points the emulator was trained on.
    """

    inputs: np.ndarray
    observed: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    noise_var: np.ndarray
    process_var: np.ndarray
    on_training: np.ndarray

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(self.var + self.noise_var)


def predictions(em: TrainedEmulator, validation: RunTable, noise_var=None) -> Predictions:
    """Deterministic-style predictions at every validation row."""
    x = validation.matrix(em.space)
    f = validation.output(em.output_name)
    n = len(f)
    pv = em.process_var(x)
    return Predictions(
        inputs=x, observed=f, mean=em.get_exp(x), var=em.get_cov(x),
        noise_var=np.zeros(n) if noise_var is None else np.broadcast_to(noise_var, (n,)).astype(float),
        process_var=np.broadcast_to(pv, (n,)).astype(float),
        on_training=em.is_training_point(x),
    )


def loo_predictions(em: TrainedEmulator, refit_limit: int = 50) -> Predictions:
    """Leave-one-out predictions on the emulator's own training runs.

    Up to ``refit_limit`` runs each fold re-adjusts the same prior on the other
    ``n - 1`` runs. Beyond that the closed-form identities
    ``E = D_i - [K^-1 r]_i / [K^-1]_ii`` and ``Var = 1 / [K^-1]_ii`` (minus the
    run's own noise) give the same numbers from one factorisation.
    """
    x, y, noise = em.train_inputs, em.train_outputs, em.obs_noise_var
    n = len(y)
    if n < 2:
        raise SchemaError("leave-one-out needs at least two training runs")
    mean = np.empty(n)
    var = np.empty(n)
    if n <= refit_limit:
        for i in range(n):
            keep = np.arange(n) != i
            sub = TrainedEmulator(em.prior, x[keep], y[keep], noise[keep])
            mean[i] = sub.get_exp(x[i:i + 1])[0]
            var[i] = sub.get_cov(x[i:i + 1])[0]
    else:
        k_inv = linalg.cho_solve(em._chol, np.eye(n))
        diag = np.diag(k_inv)
        mean = y - em._alpha / diag
        var = np.maximum(1.0 / diag - noise - em.jitter, 0.0)
    pv = em.process_var(x)
    return Predictions(x, y.copy(), mean, var, noise.copy(), np.broadcast_to(pv, (n,)).astype(float),
                       np.zeros(n, dtype=bool))


def _sim_implausibility(p: Predictions, em: TrainedEmulator, target) -> np.ndarray:
    z, var_e = target_moments(Target.from_spec(target))
    return np.abs(p.observed - z) / np.sqrt(var_e + em.prior.discrepancy_var + p.process_var)


def _em_implausibility(p: Predictions, em: TrainedEmulator, target) -> np.ndarray:
    z, var_e = target_moments(Target.from_spec(target))
    return np.abs(p.mean - z) / np.sqrt(p.var + var_e + em.prior.discrepancy_var + p.process_var)


def comparison_test(em: TrainedEmulator, validation: RunTable | Predictions, c: float = 3.0,
                    target=None) -> np.ndarray:
    """Boolean failure mask: ``|f(x) - E_D[f(x)]| > c sd_D[f(x)]``.

    With a target, points whose simulator output is itself implausible
    (``I_sim > c``) are exempt. Zero error with zero spread passes.
    """
    p = validation if isinstance(validation, Predictions) else predictions(em, validation)
    err = np.abs(p.observed - p.mean)
    fail = err > c * p.sd
    fail &= ~p.on_training
    if target is not None:
        fail &= ~(_sim_implausibility(p, em, target) > c)
    return fail


def classification_test(em: TrainedEmulator, validation: RunTable | Predictions, target,
                        cutoff: float = 3.0) -> np.ndarray:
    """Type I mask: the emulator rules a point out (``I_em > cutoff``) but the simulator does not."""
    p = validation if isinstance(validation, Predictions) else predictions(em, validation)
    return (_em_implausibility(p, em, target) > cutoff) & (_sim_implausibility(p, em, target) <= cutoff)


def standardized_errors(em: TrainedEmulator, validation: RunTable | Predictions,
                        target=None, c: float = 3.0) -> tuple[np.ndarray, np.ndarray, bool]:
    """``U = (f - E_D[f]) / sd_D[f]`` with failures where ``|U| > 3``.

    Returns ``(U, fail, underconfident)``; the flag is set when every
    ``|U| < 1``. With a target, points with ``I_sim > c`` are exempt from
    failing, as in :func:`comparison_test`.
    """
    p = validation if isinstance(validation, Predictions) else predictions(em, validation)
    sd = p.sd
    zero = sd <= 0
    bad = zero & ~p.on_training
    if np.any(bad):
        idx = np.flatnonzero(bad)
        raise NumericDegeneracyError(
            f"{em.output_name}: zero predictive sd at non-training validation rows {idx.tolist()}")
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(zero, 0.0, (p.observed - p.mean) / np.where(zero, 1.0, sd))
    fail = np.abs(u) > 3.0
    if target is not None:
        fail &= ~(_sim_implausibility(p, em, target) > c)
    underconfident = bool(len(u)) and float(np.max(np.abs(u))) < 1.0
    return u, fail, underconfident


@dataclass
class EmulatorDiagnostics:
    output: str
    kind: str
    predictions: Predictions
    comparison: np.ndarray
    standardized: np.ndarray
    standardized_fail: np.ndarray
    underconfident: bool
    classification: np.ndarray | None = None
    i_em: np.ndarray | None = None
    i_sim: np.ndarray | None = None
    rows: np.ndarray | None = None  # validation row for each prediction

    @property
    def failing(self) -> np.ndarray:
        fail = self.comparison | self.standardized_fail
        if self.classification is not None:
            fail = fail | self.classification
        return fail

    def counts(self) -> dict:
        return {
            "comparison": int(self.comparison.sum()),
            "classification": None if self.classification is None else int(self.classification.sum()),
            "standardized": int(self.standardized_fail.sum()),
        }

    def table_csv(self, names) -> dict[str, str]:
        p = self.predictions
        base = [list(names)]
        rows = [[_fmt(v) for v in r] for r in p.inputs]
        prefix = self.output if self.kind == "expectation" else f"variance_{self.output}"
        out = {}
        sd = p.sd
        cols = {
            "comparison": (["observed", "mean", "sd", "lower", "upper", "fail"],
                           [p.observed, p.mean, sd, p.mean - 3 * sd, p.mean + 3 * sd, self.comparison]),
            "standardized": (["mean", "u", "fail"], [p.mean, self.standardized, self.standardized_fail]),
        }
        if self.classification is not None:
            cols["classification"] = (["i_sim", "i_em", "type1"], [self.i_sim, self.i_em, self.classification])
        for test, (hdr, vals) in cols.items():
            lines = [",".join(base[0] + hdr)]
            for i, r in enumerate(rows):
                extra = [str(int(v[i])) if v.dtype == bool else _fmt(v[i]) for v in vals]
                lines.append(",".join(r + extra))
            out[f"{prefix}_{test}.csv"] = "\n".join(lines) + "\n"
        return out


@dataclass
class DiagnosticReport:
    """Results of every test on every emulator, plus the failing points."""

    input_names: tuple[str, ...]
    validation_inputs: np.ndarray
    per_emulator: list[EmulatorDiagnostics] = field(default_factory=list)
    mode: str = "validation"

    @property
    def failing_rows(self) -> np.ndarray:
        rows = set()
        for d in self.per_emulator:
            rows.update(int(r) for r in d.rows[d.failing])
        return np.array(sorted(rows), dtype=int)

    @property
    def failures(self) -> RunTable:
        rows = self.failing_rows
        return RunTable(self.input_names, self.validation_inputs[rows].reshape(-1, len(self.input_names)))

    @property
    def ok(self) -> bool:
        return self.failing_rows.size == 0

    def type1_fraction(self) -> float:
        rows = set()
        for d in self.per_emulator:
            if d.classification is not None:
                rows.update(int(r) for r in d.rows[d.classification])
        n = len(self.validation_inputs)
        return len(rows) / n if n else 0.0

    @property
    def warnings(self) -> list[str]:
        return [f"{d.kind} emulator {d.output}: all |U| < 1, possible under-confidence or overfitting"
                for d in self.per_emulator if d.underconfident]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n_points": int(len(self.validation_inputs)),
            "failing_rows": self.failing_rows.tolist(),
            "failing_points": [dict(zip(self.input_names, (float(v) for v in row)))
                               for row in self.validation_inputs[self.failing_rows]],
            "type1_fraction": self.type1_fraction(),
            "emulators": [{"output": d.output, "kind": d.kind, "failures": d.counts(),
                           "max_abs_u": float(np.max(np.abs(d.standardized))) if d.standardized.size else 0.0}
                          for d in self.per_emulator],
            "warnings": self.warnings,
        }

    def plot_tables(self) -> dict[str, str]:
        out = {}
        for d in self.per_emulator:
            out.update(d.table_csv(self.input_names))
        return out


def _run_tests(em, p, target, c, kind, rows):
    comp = comparison_test(em, p, c, target)
    u, ufail, under = standardized_errors(em, p, target, c)
    diag = EmulatorDiagnostics(em.output_name, kind, p, comp, u, ufail, under, rows=rows)
    if target is not None:
        diag.classification = classification_test(em, p, target, c)
        diag.i_em = _em_implausibility(p, em, target)
        diag.i_sim = _sim_implausibility(p, em, target)
    return diag


def validation_diagnostics(ems: Mapping[str, TrainedEmulator], targets: Mapping | None = None,
                           validation: RunTable | None = None, c: float = 3.0) -> DiagnosticReport:
    """Run all three tests on every emulator.

    Classification needs targets and is skipped without them. Without a
    validation table, leave-one-out predictions on the training runs stand
    in for held-out data.
    """
    names = list(ems)
    if not names:
        raise SchemaError("no emulators to validate")
    first = ems[names[0]]
    space = first.space
    targets = None if targets is None else {k: Target.from_spec(v) for k, v in targets.items()}
    if targets is not None:
        missing = [k for k in names if k not in targets]
        if missing:
            raise SchemaError(f"no targets for {missing}")
    if validation is not None:
        missing = [k for k in names if k not in validation.output_names]
        if missing:
            raise SchemaError(f"validation table has no output columns {missing}")
    stochastic = isinstance(ems, EmulatorSet) and ems.is_variance
    tgt = (lambda k: None) if targets is None else (lambda k: targets[k])

    if validation is None:
        report = DiagnosticReport(space.names, first.train_inputs, mode="loo")
        for k in names:
            p = loo_predictions(ems[k])
            report.per_emulator.append(_run_tests(ems[k], p, tgt(k), c, "expectation", np.arange(len(p.observed))))
        return report

    if not stochastic:
        x = validation.matrix(space)
        report = DiagnosticReport(space.names, x)
        for k in names:
            p = predictions(ems[k], validation)
            report.per_emulator.append(_run_tests(ems[k], p, tgt(k), c, "expectation", np.arange(len(x))))
        return report

    agg = aggregate_replicates(validation, space, names)
    report = DiagnosticReport(space.names, agg.inputs)
    idx = np.arange(len(agg.counts))
    for k in names:
        em, vem = ems.expectation[k], ems.variance[k]
        v_hat = np.maximum(vem.get_exp(agg.inputs), 0.0)
        table = RunTable(space.names, agg.inputs, (k,), agg.means[k][:, None])
        p = predictions(em, table, noise_var=v_hat / agg.counts)
        report.per_emulator.append(_run_tests(em, p, tgt(k), c, "expectation", idx))
        rep = agg.counts >= 2
        if rep.any():
            vt = RunTable(space.names, agg.inputs[rep], (k,), agg.variances[k][rep][:, None])
            kurt = float(vem.flags.get("kurtosis_multiplier", 1.0))
            vp = predictions(vem, vt, noise_var=kurt * 2.0 * v_hat[rep] ** 2 / (agg.counts[rep] - 1))
            report.per_emulator.append(_run_tests(vem, vp, None, c, "variance", idx[rep]))
    return report
