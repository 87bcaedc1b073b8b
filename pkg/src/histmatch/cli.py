"""The ``histmatch`` command line.

Exit codes: 0 success, 1 diagnostic failures (or nothing acceptable to
propose), 2 bad input or schema, 3 computation error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .analysis import (
    MODIFIERS,
    PLOT_TYPES,
    WaveRecord,
    WaveState,
    check_stopping,
    emulator_slice,
    evaluate_simulator,
    lattice_summary,
    run_wave,
    space_removed,
)
from .config import Config, load_config, sirs_demo_config
from .diagnostics import validation_diagnostics
from .errors import HistMatchError, SchemaError
from .proposal import ProposalOptions, generate_new_design
from .sims import GillespieSimulator, get_simulator, make_wave0
from .space import ParameterSpace, RunTable, _fmt, latin_hypercube
from .training import EmulatorSet, emulator_from_data, train_variance_emulators

log = logging.getLogger("histmatch")

EXIT_OK, EXIT_DIAGNOSTIC, EXIT_INPUT, EXIT_COMPUTE = 0, 1, 2, 3
STATE_FORMAT = "histmatch-state"
STATE_VERSION = 1


# -- file helpers -----------------------------------------------------------

def dump_json(obj) -> str:
    """Deterministic JSON text (insertion order, exact float repr, trailing newline)."""
    return json.dumps(obj, indent=2) + "\n"


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(text.encode("utf-8"))


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise SchemaError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path} is not valid JSON: {exc}") from None


def read_runs(path, names: Sequence[str]) -> RunTable:
    try:
        return RunTable.read_csv(path, names)
    except OSError as exc:
        raise SchemaError(f"cannot read {path}: {exc}") from None


def load_emulators(path) -> EmulatorSet:
    return EmulatorSet.from_dict(read_json(path))


def rows_csv(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _require_outputs(runs: RunTable, outputs) -> None:
    missing = [o for o in outputs if o not in runs.output_names]
    if missing:
        raise SchemaError(f"run table has no output columns {missing}")


# -- simulators -------------------------------------------------------------

class ExternalSimulator:
    """A command reading input CSV on stdin and writing run CSV on stdout.

    Designs are split into batches of ``batch_size`` rows, dispatched up to
    ``workers`` at a time and reassembled in order. The seed reaches the
    command through the ``HISTMATCH_SEED`` environment variable. A
    ``replicate`` column in the output marks replicate groups.
    """

    def __init__(self, command: Sequence[str], input_names, output_names=(), batch_size: int = 50,
                 workers: int = 1, stochastic: bool = False, timeout: float | None = None):
        self.command = list(command)
        self.input_names = tuple(input_names)
        self.output_names = tuple(output_names)
        self.batch_size = batch_size
        self.workers = max(1, workers)
        self.stochastic = stochastic
        self.timeout = timeout

    def _batch(self, points: RunTable, seed: int, b: int) -> RunTable:
        env = dict(os.environ, HISTMATCH_SEED=str(seed), HISTMATCH_BATCH=str(b))
        proc = subprocess.run(self.command, input=points.to_csv_text(), capture_output=True, text=True,
                              env=env, timeout=self.timeout)
        if proc.returncode != 0:
            raise RuntimeError(f"simulator exited {proc.returncode}: {proc.stderr.strip()[:200]}")
        runs = RunTable.from_csv_text(proc.stdout, self.input_names)
        if self.output_names:
            _require_outputs(runs, self.output_names)
        return runs

    def __call__(self, points: RunTable, seed: int = 0) -> RunTable:
        points = points.reordered(self.input_names)
        n = len(points)
        chunks = [points.select(np.arange(i, min(i + self.batch_size, n))) for i in range(0, n, self.batch_size)]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            parts = list(pool.map(lambda a: self._batch(a[1], seed, a[0]), enumerate(chunks)))
        out = parts[0]
        for p in parts[1:]:
            out = out.concat(p)
        return out


def make_simulator(cfg: Config, workers: int | None = None):
    spec = cfg.simulator or "sirs-ode"
    workers = workers or cfg.workers
    if isinstance(spec, str):
        return get_simulator(spec)
    if "demo" in spec:
        kw = {k: spec[k] for k in ("reps", "t_end") if k in spec}
        return get_simulator(spec["demo"], **kw)
    return ExternalSimulator(spec["command"], cfg.space.names, spec.get("outputs", cfg.outputs),
                             spec.get("batch_size", 50), workers, spec.get("stochastic", False),
                             spec.get("timeout"))


# -- wave state persistence ----------------------------------------------------

def _wave_dir(root: Path, k: int) -> Path:
    return root / f"wave_{k}"


def save_wave(root: Path, rec: WaveRecord) -> None:
    d = _wave_dir(root, rec.index)
    write_text(d / "design.csv", rec.design.to_csv_text())
    write_text(d / "runs.csv", rec.runs.to_csv_text())
    if rec.emulators is not None:
        write_text(d / "emulators.json", dump_json(rec.emulators.to_dict()))
    if rec.diagnostics is not None:
        write_text(d / "diagnostics.json", dump_json(rec.diagnostics.to_dict()))
        for name, text in rec.diagnostics.plot_tables().items():
            write_text(d / name, text)
    elif rec.index == 0:
        write_text(d / "diagnostics.json", dump_json({}))


def _validation_rows(rec: WaveRecord) -> list[int]:
    # rows of rec.runs that went to validation, recovered by identity of the split tables
    if not len(rec.validation):
        return []
    val = {tuple(r) for r in rec.validation.inputs}
    return [i for i, r in enumerate(rec.runs.inputs) if tuple(r) in val]


def save_state(root: Path, state: WaveState, cfg: Config, stop: tuple[bool, str]) -> None:
    waves = []
    for w in state.waves:
        waves.append({
            "index": w.index,
            "space": w.space.to_dict(),
            "n_design": len(w.design),
            "n_runs": len(w.runs),
            "validation_rows": _validation_rows(w),
            "outputs": list(w.outputs),
            "proposal_status": w.proposal_status,
            "proposal_cutoff": w.proposal_cutoff,
            "flagged": w.flagged,
            "failed_points": w.failed_points,
        })
    doc = {"format": STATE_FORMAT, "version": STATE_VERSION, "config": cfg.raw, "waves": waves,
           "stopped": state.stopped, "stopping": {"stop": stop[0], "reason": stop[1]}}
    write_text(root / "state.json", dump_json(doc))


def load_state(root: Path, cfg: Config) -> WaveState:
    doc = read_json(root / "state.json")
    if doc.get("format") != STATE_FORMAT or doc.get("version") != STATE_VERSION:
        raise SchemaError(f"{root / 'state.json'} is not a histmatch state file")
    state = WaveState(cfg.space, dict(cfg.targets), [], doc.get("stopped"))
    for w in doc["waves"]:
        d = _wave_dir(root, w["index"])
        space = ParameterSpace.from_dict(w["space"])
        if w["n_runs"]:
            runs = read_runs(d / "runs.csv", cfg.space.names)
        else:
            runs = RunTable(cfg.space.names, np.zeros((0, cfg.space.dim)))
        if w["n_design"]:
            design = read_runs(d / "design.csv", cfg.space.names)
        else:
            design = RunTable(cfg.space.names, np.zeros((0, cfg.space.dim)))
        val = np.zeros(len(runs), dtype=bool)
        val[w["validation_rows"]] = True
        ems = load_emulators(d / "emulators.json") if (d / "emulators.json").exists() else None
        rec = WaveRecord(w["index"], space, design, runs, runs.select(np.flatnonzero(~val)),
                         runs.select(np.flatnonzero(val)), ems, None, w["proposal_status"],
                         w["proposal_cutoff"], w["flagged"], w["failed_points"], tuple(w["outputs"]))
        state.waves.append(rec)
    return state


def initial_state(cfg: Config, simulator, seed: int, train_csv=None, valid_csv=None) -> WaveState:
    """Wave 0 from supplied run tables, or from seeded LHDs run through ``simulator``."""
    if train_csv:
        train = read_runs(train_csv, cfg.space.names)
        valid = read_runs(valid_csv, cfg.space.names) if valid_csv else train.select(np.arange(0))
    else:
        n_train = cfg.wave.get("n_train", 10 * cfg.space.dim)
        n_valid = cfg.wave.get("n_valid", 2 * n_train)
        s_train, s_valid, s_sim = np.random.SeedSequence(seed).spawn(3)
        sim_seed = int(s_sim.generate_state(1)[0])
        train, _ = evaluate_simulator(simulator, latin_hypercube(n_train, cfg.space, s_train), sim_seed)
        valid, _ = evaluate_simulator(simulator, latin_hypercube(n_valid, cfg.space, s_valid), sim_seed + 1)
    _require_outputs(train, cfg.outputs)
    rec = WaveRecord(0, cfg.space, train.concat(valid).inputs_only() if len(valid) else train.inputs_only(),
                     train.concat(valid) if len(valid) else train, train, valid, outputs=tuple(cfg.outputs))
    return WaveState(cfg.space, dict(cfg.targets), [rec])


# -- commands ---------------------------------------------------------------

def _config(args) -> Config:
    if not getattr(args, "config", None):
        raise SchemaError("--config is required")
    return load_config(args.config)


def _seed(args, cfg: Config | None) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return cfg.seed if cfg is not None else 0


def _out(args) -> Path:
    return Path(args.out_dir or ".")


def cmd_train(args) -> int:
    cfg = _config(args)
    runs = read_runs(args.runs, cfg.space.names)
    _require_outputs(runs, cfg.outputs)
    opts = cfg.training.__class__(**{**cfg.training.__dict__, "seed": _seed(args, cfg)})
    if args.variance_mode or cfg.variance_mode:
        ems = train_variance_emulators(runs, cfg.outputs, cfg.space, opts, cfg.discrepancies or None)
    else:
        ems = emulator_from_data(runs, cfg.outputs, cfg.space, opts, cfg.discrepancies or None)
    out = _out(args)
    write_text(out / "emulators.json", dump_json(ems.to_dict()))
    write_text(out / "summary.txt", ems.summary() + "\n")
    print(f"wrote {len(ems)} emulators to {out / 'emulators.json'}")
    return EXIT_OK


def cmd_validate(args) -> int:
    ems = load_emulators(args.emulators)
    targets = None
    if not args.no_targets:
        if args.config:
            targets = _config(args).targets
    space = next(iter(ems.values())).space
    runs = read_runs(args.validation, space.names)
    _require_outputs(runs, list(ems))
    report = validation_diagnostics(ems, targets, runs, args.cutoff)
    out = _out(args)
    write_text(out / "diagnostics.json", dump_json(report.to_dict()))
    for name, text in report.plot_tables().items():
        write_text(out / name, text)
    n = len(report.failing_rows)
    print(f"{n} failing validation points" if n else "no failing validation points")
    return EXIT_OK if report.ok else EXIT_DIAGNOSTIC


def _proposal_options(args, cfg: Config) -> ProposalOptions:
    d = dict(cfg.proposal.__dict__)
    d["seed"] = _seed(args, cfg)
    if args.cutoff is not None:
        d["cutoff"] = args.cutoff
    if args.nth is not None:
        d["nth"] = args.nth
    return ProposalOptions(**d)


def _targets_for(cfg: Config, ems) -> dict:
    missing = [k for k in ems if k not in cfg.targets]
    if missing:
        raise SchemaError(f"no targets for outputs {missing}")
    return cfg.targets


def cmd_propose(args) -> int:
    cfg = _config(args)
    waves = [load_emulators(p) for p in args.emulators]
    for w in waves:
        _targets_for(cfg, w)
    opts = _proposal_options(args, cfg)
    ems = waves if len(waves) > 1 else waves[0]
    res = generate_new_design(ems, args.n, cfg.targets, opts)
    out = _out(args)
    write_text(out / "design.csv", res.points.to_csv_text())
    write_text(out / "proposal.json", dump_json({"status": res.status, "cutoff": res.cutoff,
                                                 "n_points": len(res), "messages": res.messages}))
    print(f"{len(res)} points proposed ({res.status})")
    return EXIT_DIAGNOSTIC if res.empty else EXIT_OK


def cmd_wave(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    out = _out(args)
    simulator = make_simulator(cfg, args.workers)
    if (out / "state.json").exists():
        state = load_state(out, cfg)
    else:
        state = initial_state(cfg, simulator, seed, args.train, args.validation)
        save_wave(out, state.waves[0])
    overrides = {"seed": seed}
    if args.variance_mode or getattr(simulator, "stochastic", False):
        overrides["variance_mode"] = True
    if args.cutoff is not None or args.nth is not None:
        overrides["proposal"] = _proposal_options(args, cfg)
    stop = check_stopping(state, cfg.stopping)
    if state.stopped or stop[0]:
        print(f"not running another wave: {state.stopped or stop[1]}")
        save_state(out, state, cfg, stop)
        return EXIT_OK
    state = run_wave(state, simulator, cfg.wave_options(**overrides))
    save_wave(out, state.current)
    stop = check_stopping(state, cfg.stopping)
    save_state(out, state, cfg, stop)
    rec = state.current
    print(f"wave {rec.index}: {len(rec.runs)} runs, proposal {rec.proposal_status}, "
          f"stop={stop[0]} ({stop[1]})")
    return EXIT_DIAGNOSTIC if rec.flagged else EXIT_OK


def _parse_fixed(items) -> dict:
    out = {}
    for item in items or []:
        name, sep, val = item.partition("=")
        if not sep:
            raise SchemaError(f"--fixed expects NAME=VALUE, got {item!r}")
        try:
            out[name] = float(val)
        except ValueError:
            raise SchemaError(f"--fixed value for {name!r} is not a number") from None
    return out


def _svg_heatmap(x: np.ndarray, y: np.ndarray, z: np.ndarray, title: str) -> str:
    """A plain SVG heat map of ``z`` over the grid ``x`` by ``y``."""
    n, m = len(x), len(y)
    cell, pad = 10, 30
    finite = z[np.isfinite(z)]
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    span = hi - lo or 1.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{n * cell + 2 * pad}" '
             f'height="{m * cell + 2 * pad}">',
             f'<text x="{pad}" y="{pad - 10}" font-size="12">{title}</text>']
    for i in range(n):
        for j in range(m):
            v = z[i, j]
            if not np.isfinite(v):
                continue
            s = int(round(255 * (v - lo) / span))
            parts.append(f'<rect x="{pad + i * cell}" y="{pad + (m - 1 - j) * cell}" width="{cell}" '
                         f'height="{cell}" fill="rgb({s},{64},{255 - s})"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_analyze(args) -> int:
    ems = load_emulators(args.emulators)
    cfg = load_config(args.config) if args.config else None
    targets = cfg.targets if (cfg and not args.no_targets) else None
    out = _out(args)
    ppd = args.ppd or 20
    if args.kind == "space-removed":
        if not targets:
            raise SchemaError("space-removed needs targets (--config)")
        if args.modified not in MODIFIERS:
            raise SchemaError(f"--modified must be one of {MODIFIERS}")
        cutoffs = [args.cutoff] if args.cutoff is not None else None
        res = space_removed(ems, _targets_for(cfg, ems), ppd, args.modified, args.u_mod,
                            cutoffs, args.nth or 1, seed=_seed(args, cfg))
        rows = [(float(m), float(c), float(p)) for m, curve in res["curves"].items()
                for c, p in zip(res["cutoffs"], curve)]
        write_text(out / "space_removed.csv", rows_csv(["multiplier", "cutoff", "removed"], rows))
    elif args.kind == "lattice":
        if not targets:
            raise SchemaError("lattice needs targets (--config)")
        lat = lattice_summary(ems, _targets_for(cfg, ems), ppd, args.nth or 1,
                              args.cutoff if args.cutoff is not None else 3.0, seed=_seed(args, cfg))
        rows = [tuple(float(v) if isinstance(v, (float, np.floating)) else v for v in r) for r in lat.rows()]
        write_text(out / "lattice.csv",
                   rows_csv(["kind", "param1", "param2", "bin1", "bin2", "x1", "x2", "value"], rows))
    else:
        if args.plot_type not in PLOT_TYPES:
            raise SchemaError(f"--plot-type must be one of {PLOT_TYPES}")
        if not args.pair or len(args.pair) != 2:
            raise SchemaError("slice needs --pair NAME NAME")
        sel = ems
        if args.output:
            if args.output not in ems:
                raise SchemaError(f"no emulator for output {args.output!r}")
            sel = {args.output: ems[args.output]}
        if args.plot_type in ("imp", "nimp") and targets:
            _targets_for(cfg, sel)
        tab = emulator_slice(sel, args.pair, _parse_fixed(args.fixed), ppd, args.plot_type, targets,
                             args.nth or 1)
        write_text(out / "slice.csv", tab.to_csv_text())
        if args.svg:
            space = next(iter(sel.values())).space
            i, j = space.index(args.pair[0]), space.index(args.pair[1])
            a = np.linspace(*space.ranges[i], ppd)
            b = np.linspace(*space.ranges[j], ppd)
            for k, name in enumerate(tab.output_names):
                z = tab.outputs[:, k].reshape(ppd, ppd)
                write_text(out / f"slice_{name}.svg", _svg_heatmap(a, b, z, name))
    print(f"wrote {args.kind} output to {out}")
    return EXIT_OK


def cmd_demo(args) -> int:
    out = _out(args)
    if args.action == "wave0":
        sim = GillespieSimulator(args.reps) if args.stochastic else None
        train, valid = make_wave0(seed=args.seed or 0, simulator=sim)
        cfg = sirs_demo_config(args.stochastic)
        cfg["seed"] = args.seed or 0
        if args.stochastic:
            cfg["simulator"] = {"demo": "sirs-gillespie", "reps": args.reps}
        write_text(out / "config.json", dump_json(cfg))
        write_text(out / "train.csv", train.to_csv_text())
        write_text(out / "validation.csv", valid.to_csv_text())
        print(f"wrote demo config and wave-0 runs to {out}")
        return EXIT_OK
    # simulate: CSV on stdin, CSV on stdout
    from .sims import SIRS_SPACE

    sim = get_simulator(args.simulator, **({"reps": args.reps} if "gillespie" in args.simulator else {}))
    points = RunTable.from_csv_text(sys.stdin.read(), SIRS_SPACE.names)
    seed = args.seed if args.seed is not None else int(os.environ.get("HISTMATCH_SEED", "0"))
    sys.stdout.write(sim(points, seed).to_csv_text())
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="histmatch", description="Bayes linear emulation and history matching.")
    p.add_argument("--version", action="version", version=f"histmatch {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out-dir", default=None)

    sp = sub.add_parser("train", help="train emulators from a run table")
    sp.add_argument("runs")
    common(sp)
    sp.add_argument("--variance-mode", action="store_true", help="emulate replicate variances first")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("validate", help="diagnostics on a validation run table")
    sp.add_argument("emulators")
    sp.add_argument("validation")
    common(sp)
    sp.add_argument("--cutoff", type=float, default=3.0)
    sp.add_argument("--no-targets", action="store_true")
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("propose", help="propose a design from the non-implausible region")
    sp.add_argument("emulators", nargs="+", help="one emulators.json per wave")
    common(sp)
    sp.add_argument("-n", "--n", type=int, default=90)
    sp.add_argument("--cutoff", type=float, default=None)
    sp.add_argument("--nth", type=int, default=None)
    sp.set_defaults(func=cmd_propose)

    sp = sub.add_parser("wave", help="run the next history matching wave")
    common(sp)
    sp.add_argument("--workers", type=int, default=None)
    sp.add_argument("--cutoff", type=float, default=None)
    sp.add_argument("--nth", type=int, default=None)
    sp.add_argument("--variance-mode", action="store_true")
    sp.add_argument("--train", default=None, help="wave-0 training runs (else simulated)")
    sp.add_argument("--validation", default=None, help="wave-0 validation runs")
    sp.set_defaults(func=cmd_wave)

    sp = sub.add_parser("analyze", help="space-removed curves, lattice summaries and slices")
    sp.add_argument("kind", choices=("space-removed", "lattice", "slice"))
    sp.add_argument("emulators")
    common(sp)
    sp.add_argument("--ppd", type=int, default=None)
    sp.add_argument("--cutoff", type=float, default=None)
    sp.add_argument("--nth", type=int, default=None)
    sp.add_argument("--no-targets", action="store_true")
    sp.add_argument("--modified", default="obs")
    sp.add_argument("--u-mod", type=float, nargs="+", default=[0.8, 0.9, 1.0, 1.1, 1.2])
    sp.add_argument("--plot-type", default="exp")
    sp.add_argument("--pair", nargs=2, default=None)
    sp.add_argument("--fixed", nargs="*", default=None, help="NAME=VALUE for the other parameters")
    sp.add_argument("--output", default=None)
    sp.add_argument("--svg", action="store_true")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("demo", help="bundled SIRS simulators")
    sp.add_argument("action", choices=("wave0", "simulate"))
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out-dir", default=None)
    sp.add_argument("--stochastic", action="store_true")
    sp.add_argument("--reps", type=int, default=20)
    sp.add_argument("--simulator", default="sirs-ode")
    sp.set_defaults(func=cmd_demo)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (SchemaError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (HistMatchError, ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
        # TrainingError lands here and names the output
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
