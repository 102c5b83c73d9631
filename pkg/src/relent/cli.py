"""Command line entry point.

``relent <command> --config FILE [--jobs N] [--seed S] [--out DIR]``

Exit status: 0 pass, 1 usage error, 2 verdict failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import ensemble as ens
from .cns import State
from .config import RunConfig, emit_config, load_config, run_hash
from .diagnostics import Verdict, gronwall_envelope, martingale_estimate, write_ledger_csv
from .errors import NumericalError, RelentError, StoppingTimeError, UsageError
from .grid import Grid
from .snapshot import write_checkpoint

log = logging.getLogger("relent")

EXIT_PASS, EXIT_USAGE, EXIT_FAIL, EXIT_NUMERICAL = 0, 1, 2, 3

COMMANDS = {
    "energy": "energy",
    "twin": "twin",
    "eps-sweep": "eps_sweep",
    "ito-check": "ito_check",
    "coercivity": "coercivity",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="relent", description="Energy and relative-energy experiments for stochastic compressible flow.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (ensemble members run in parallel)")
    p.add_argument("--seed", type=int, default=None, help="overrides RELENT_SEED and the config seed")
    p.add_argument("--out", default=None, help="output root (overrides output_dir)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def initial_state(grid: Grid, cfg: RunConfig) -> State:
    """Smooth periodic data: a sine density bump and a cosine (1D) or Taylor-Green (2D) velocity."""
    ini = cfg.initial
    if ini.kind == "equilibrium":
        return State(0.0, grid.constant(1.0), grid.zeros(1))
    if grid.dim == 1:
        (x,) = grid.coords
        rho = 1.0 + ini.rho_amplitude * np.sin(np.pi * x)
        u = (ini.u_amplitude * np.cos(np.pi * x))[None]
    else:
        x, y = grid.coords
        rho = 1.0 + ini.rho_amplitude * np.sin(np.pi * x) * np.sin(np.pi * y)
        u = ini.u_amplitude * np.stack([np.cos(np.pi * x) * np.sin(np.pi * y), -np.sin(np.pi * x) * np.cos(np.pi * y)])
    return State.from_velocity(0.0, rho, u)


# ----------------------------------------------------------------------
# experiments; each returns (verdict ok, summary dict, produced files)


def _plot_script(path: Path, plots: list[tuple[str, str, str]]) -> None:
    """gnuplot script; ``plots`` holds ``(csv name, using clause, title)`` for produced files only."""
    lines = ["set datafile separator ','", "set key autotitle columnhead", "set terminal pngcairo size 900,600"]
    for i, (name, using, title) in enumerate(plots):
        lines += [f"set output '{Path(name).stem}_{i}.png'", f"set title '{title}'", f"plot '{name}' using {using} with lines"]
    path.write_text("\n".join(lines) + "\n")


def _energy(cfg: RunConfig, out: Path, jobs: int):
    grid = cfg.grid.build()
    params = cfg.model_params()
    stepper = cfg.stepper.build()
    plan = replace(cfg.experiment.plan(), ledger_every=cfg.ledger_every)
    init = initial_state(grid, cfg)
    res = ens.run_energy_ensemble(grid, init, params, stepper, plan, jobs=jobs)
    files = []
    for m, led in enumerate(res.ledgers):
        name = f"member_{m:04d}.csv"
        write_ledger_csv(out / name, led)
        files.append(name)
    ens.write_stats_csv(out / "stats.csv", res.stats)
    files.append("stats.csv")
    st = res.stats
    mass0 = st.mean["mass"][0]
    mass_err = max(
        float(np.max(np.abs(np.array([r.mass for r in led]) - led[0].mass))) / abs(led[0].mass) for led in res.ledgers
    )
    budget = cfg.experiment.budget_constant * (res.dt + grid.dx**2) * st.t
    verdicts = [
        Verdict.judge(float(v), float(c), float(b))
        for v, c, b in zip(st.mean["energy_residual"], st.ci_halfwidth["energy_residual"], budget)
    ]
    status = "fail" if any(v.status == "fail" for v in verdicts) else (
        "inconclusive" if any(v.status == "inconclusive" for v in verdicts) else "pass"
    )
    summary = {
        "dt": res.dt,
        "mass0": mass0,
        "mass_rel_error": mass_err,
        "energy_residual_max": float(np.max(st.mean["energy_residual"])),
        "energy_verdict": status,
    }
    if plan.n_members >= 16:
        _, _, mart = martingale_estimate(st, "stoch_cum")
        summary["martingale_verdict"] = mart
    ok = mass_err <= 1e-12 and status != "fail"
    header, _ = ens.stats_rows(st)
    col = header.index("total_mean") + 1
    return ok, summary, files, [("stats.csv", f"1:{col}", "total energy (mean)")]


def _twin(cfg: RunConfig, out: Path, jobs: int):
    grid = cfg.grid.build()
    params = cfg.model_params()
    stepper = cfg.stepper.build()
    exp = cfg.experiment
    plan = replace(exp.plan(), ledger_every=cfg.ledger_every)
    init = initial_state(grid, cfg)
    kwargs = {"E0": exp.E0, "decouple": exp.variant == "decoupled", "jobs": jobs}
    if exp.variant == "b":
        fine = Grid(grid.dim, grid.n * exp.refine, grid.length)
        kwargs.update(refine=exp.refine, strong_init_fine=initial_state(fine, cfg))
    results = ens.run_twin_ensemble(grid, init, params, stepper, plan, **kwargs)
    files = []
    for m, r in enumerate(results):
        name = f"member_{m:04d}.csv"
        write_ledger_csv(out / name, r.weak)
        files.append(name)
    t = results[0].t
    rel = np.stack([r.rel_energy for r in results])
    mean = rel.mean(axis=0)
    ci = 3.0 * rel.std(axis=0, ddof=1) / math.sqrt(len(results)) if len(results) > 1 else np.zeros_like(mean)
    coupled = all(r.coupled for r in results)
    summary = {"variant": exp.variant, "coupled": coupled, "dt": results[0].dt, "max_rel_energy": float(rel.max())}
    envelope = np.full_like(mean, np.nan)
    if exp.variant == "decoupled":
        summary["note"] = "coupled" if coupled else "not coupled"
        ok = coupled
    elif exp.variant == "a" and exp.E0 == 0:
        ok = coupled and float(rel.max()) <= 1e-10
    else:
        if exp.variant == "a":
            # perturbed data: E(t) <= E0 exp(cM t)
            seed = float(mean[0])
            summary["fitted_rate"] = ens.fit_gronwall_rate(t, mean, seed)
            if exp.c_M is not None:
                envelope = gronwall_envelope(seed, exp.c_M, t)
        else:
            # refined reference: the gap starts at zero and is fed by truncation
            # error, so the envelope is seeded with the first-interval gap
            t1, seed = float(t[1]), float(mean[1])
            if exp.c_M is not None:
                envelope = seed * (t / t1) ** 2 * np.exp(exp.c_M * np.maximum(t - t1, 0.0))
        summary["grad_sup"] = max(r.grad_sup for r in results)
        summary["envelope_checked"] = exp.c_M is not None
        finite = bool(np.all(np.isfinite(rel)))
        ok = finite and (exp.c_M is None or bool(np.all(mean <= 1.2 * envelope)))
    with open(out / "twin_stats.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "rel_energy_mean", "rel_energy_ci", "envelope"])
        for row in zip(t, mean, ci, envelope):
            w.writerow([repr(float(x)) for x in row])
    files.append("twin_stats.csv")
    return ok, summary, files, [("twin_stats.csv", "1:2", "relative energy (mean)")]


def _eps_sweep(cfg: RunConfig, out: Path, jobs: int):
    grid = cfg.grid.build()
    exp = cfg.experiment
    plan = exp.plan()
    fields = ens.default_sweep_fields(grid, cfg.initial.v0_amplitude)
    rows, series = ens.run_eps_sweep(
        grid,
        cfg.params.law(),
        cfg.noise.build(),
        cfg.stepper.build(),
        plan,
        fields=fields,
        delta_rule=exp.delta_rule,
        M=exp.stop_M if exp.stop_M is not None else math.inf,
        n_rows=exp.n_rows,
        jobs=jobs,
    )
    ens.write_sweep_csv(out / "sweep.csv", rows)
    files = ["sweep.csv"]
    plots = [("sweep.csv", "1:3", "sup relative energy")]
    for r, (t, m, c) in zip(rows, series):
        name = f"series_eps_{r.eps:g}.csv"
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "rel_energy_mean", "rel_energy_ci"])
            for row in zip(t, m, c):
                w.writerow([repr(float(x)) for x in row])
        files.append(name)
        plots.append((name, "1:2", f"relative energy, eps={r.eps:g}"))
    verdict = ens.sweep_verdict(rows, exp.target_ratio)
    return verdict["pass"], verdict, files, plots


def _ito_check(cfg: RunConfig, out: Path, jobs: int):
    exp = cfg.experiment
    grid = Grid(1, cfg.grid.n if cfg.grid.dim == 1 else 8)
    dts, mean, ci = ens.run_ito_check(grid, exp.dts, exp.n_members, exp.seed, t_end=exp.t_end or 1.0)
    with open(out / "ito_check.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dt", "residual_mean", "residual_ci"])
        for row in zip(dts, mean, ci):
            w.writerow([repr(float(x)) for x in row])
    order = ens.observed_order(dts, mean)
    ok = order >= exp.min_order
    return ok, {"observed_order": order, "min_order": exp.min_order}, ["ito_check.csv"], [
        ("ito_check.csv", "1:2", "mean residual")
    ]


def _coercivity(cfg: RunConfig, out: Path, jobs: int):
    exp = cfg.experiment
    rows = ens.coercivity_table(exp.deltas, exp.gammas, cfg.params.a)
    with open(out / "coercivity.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gamma", "delta", "mode", "constant"])
        for g, d, mode, c in rows:
            w.writerow([repr(g), repr(d), mode, repr(c)])
    ok = all(r[3] > 0 for r in rows)
    return ok, {"min_constant": min(r[3] for r in rows)}, ["coercivity.csv"], []


RUNNERS = {
    "energy": _energy,
    "twin": _twin,
    "eps_sweep": _eps_sweep,
    "ito_check": _ito_check,
    "coercivity": _coercivity,
}


def run_dir(cfg: RunConfig, root: str | os.PathLike | None = None) -> Path:
    root = Path(root if root is not None else cfg.output_dir)
    return root / f"{cfg.experiment.kind}-{run_hash(cfg)}"


def dispatch(cfg: RunConfig, jobs: int = 1, root=None) -> int:
    """Run the configured experiment and write its outputs; returns the exit status."""
    out = run_dir(cfg, root)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(emit_config(cfg))
    kind = cfg.experiment.kind
    log.info("running %s into %s", kind, out)
    try:
        ok, summary, files, plots = RUNNERS[kind](cfg, out, jobs)
    except StoppingTimeError as exc:
        log.error("%s", exc)
        _write_summary(out, {"status": "stopped", "tau_M": exc.tau, "error": str(exc)})
        return EXIT_NUMERICAL
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        last = getattr(exc, "last_good", None)
        if last is not None and cfg.grid.dim in (1, 2):
            grid = Grid(last.rho.ndim, last.rho.shape[0], cfg.grid.length)
            write_checkpoint(out / "last_good", grid, last, {"step": exc.step, "error": str(exc)})
        _write_summary(out, {"status": "numerical_failure", "error": str(exc), "t": exc.t, "step": exc.step})
        return EXIT_NUMERICAL
    _plot_script(out / "plot.gp", [p for p in plots if p[0] in files])
    summary["status"] = "pass" if ok else "fail"
    _write_summary(out, summary)
    log.info("%s: %s", kind, summary["status"])
    print(json.dumps(summary, default=float))
    return EXIT_PASS if ok else EXIT_FAIL


def _write_summary(out: Path, summary: dict) -> None:
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=float) + "\n")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = load_config(args.config)
        kind = COMMANDS[args.command]
        if cfg.experiment.kind != kind:
            raise UsageError(f"command {args.command!r} does not match experiment.kind={cfg.experiment.kind!r}")
        seed = args.seed
        if seed is None and os.environ.get("RELENT_SEED"):
            try:
                seed = int(os.environ["RELENT_SEED"])
            except ValueError:
                raise UsageError("RELENT_SEED must be an integer") from None
        if seed is not None:
            cfg = cfg.with_seed(seed)
        return dispatch(cfg, args.jobs, args.out)
    except UsageError as exc:
        print(f"relent: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RelentError as exc:
        print(f"relent: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
