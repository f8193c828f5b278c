"""Batch front end: ``gcalc {expect,conditional,decompose,simulate,verify}``.

Exit codes: 0 when every check holds, 1 when any check fails or a run
aborts (e.g. too many paths leave the slab domain), 2 on a configuration
error. Reports are JSON; ``--format csv`` also writes the scalar table.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .cylinder import backward_eval, conditional_at
from .decomp import (
    InequalityReport,
    default_controls,
    eta_matching_control,
    mean_uncertainty,
    summarize_decomposition,
    verify_cor34,
    verify_cor49,
    verify_lemma32,
    verify_martingale_construction,
    verify_thm33,
)
from .model import GCalcError
from .paths import SimParams, control_family, simulate, sup_expect, terminal_functional

log = logging.getLogger("gcalc")

TIMING_KEY = "timing"


class Run:
    """Shared state of one command: config, derived objects, collected output."""

    def __init__(self, cfg: ExperimentConfig, threads: int | None):
        self.cfg = cfg
        self.band = cfg.volatility_band()
        self.cyl = cfg.cylinder_config()
        s = cfg.sim
        self.sim = SimParams(
            n_paths=s.n_paths,
            n_steps=s.n_steps,
            horizon=cfg.time_partition().horizon,
            seed=cfg.seed,
            increments=s.increments,
            block_size=s.block_size,
            threads=threads,
        )
        self.checks: list[dict] = []
        self.results: list[dict] = []

    def controls(self, surfaces):
        c = self.cfg.controls
        return control_family(
            self.band,
            self.sim.horizon,
            n_constants=c.n_constants,
            schedule_intervals=c.schedule_intervals,
            surfaces=surfaces if c.feedback else (),
        )

    def add(self, report: InequalityReport):
        log.info("%s: lhs=%.6g rhs=%.6g holds=%s", report.check, report.lhs, report.rhs, report.holds)
        self.checks.append(report.to_dict())


def cmd_expect(run: Run):
    for p in run.cfg.payoff_exprs():
        s = backward_eval(p, band=run.band, cfg=run.cyl)
        rep = sup_expect(terminal_functional(s), run.controls([s]), run.sim)
        tol = 3.0 * rep.std_error + (s.grid_error if math.isfinite(s.grid_error) else 0.0)
        run.results.append(
            {
                "payoff": p.text(),
                "pde_value": s.value,
                "grid_error": s.grid_error,
                "mc_lower_bound": rep.value,
                "mc_std_error": rep.std_error,
                "best_control": rep.best_control,
                "gap": s.value - rep.value,
            }
        )
        run.add(
            InequalityReport(
                check="lower_bound",
                lhs=rep.value,
                rhs=s.value,
                holds=bool(rep.value <= s.value + tol),
                tolerance=tol,
                seeds=[run.sim.seed],
                details={"payoff": p.text(), "n_controls": rep.n_controls},
            )
        )


def cmd_conditional(run: Run):
    cond = run.cfg.conditional
    for p in run.cfg.payoff_exprs():
        s = backward_eval(p, band=run.band, cfg=run.cyl)
        i = cond.stage
        points = cond.points
        if not points:
            if i == 0:
                points = [[]]
            elif i < p.n:
                axis = s.axes[i - 1]
                points = [[0.0] * (i - 1) + [float(x)] for x in axis.grid]
            else:
                points = [[0.0] * i]
        for pt in points:
            v = conditional_at(s, i, pt)
            run.results.append({"payoff": p.text(), "stage": i, "time": p.partition.times[i],
                                "observed": list(pt), "value": float(v)})


def cmd_decompose(run: Run):
    for p in run.cfg.payoff_exprs():
        s = backward_eval(p, band=run.band, cfg=run.cyl)
        controls = default_controls([s], run.sim)
        summ = summarize_decomposition(s, run.sim, controls)
        mu = mean_uncertainty(p, band=run.band, cfg=run.cyl)
        ek = summ.expected_K
        row = summ.to_dict()
        row.pop("per_control")
        row["mean_uncertainty"] = mu
        run.results.append(row)
        run.add(
            InequalityReport(
                check="reconstruction",
                lhs=1.0 - summ.worst_pass_fraction,
                rhs=1e-3,
                holds=bool(summ.worst_pass_fraction >= 0.999),
                tolerance=0.0,
                constants={"reconstruction_tol": summ.reconstruction_tol},
                seeds=[run.sim.seed],
                details={"payoff": p.text()},
            )
        )
        run.add(
            InequalityReport(
                check="increasing_K",
                lhs=-summ.min_dK,
                rhs=1e-12,
                holds=bool(summ.min_dK >= -1e-12 and summ.max_abs_K0 == 0.0),
                tolerance=0.0,
                seeds=[run.sim.seed],
                details={"payoff": p.text(), "max_abs_K0": summ.max_abs_K0},
            )
        )
        tol = max(3.0 * ek["std_error"], 0.03 * abs(mu), 1e-3)
        run.add(
            InequalityReport(
                check="mean_uncertainty",
                lhs=abs(ek["value"] - mu),
                rhs=0.0,
                holds=bool(abs(ek["value"] - mu) <= tol),
                tolerance=tol,
                seeds=[run.sim.seed],
                details={"payoff": p.text(), "E_K_T": ek["value"], "mean_uncertainty": mu,
                         "best_control": ek["best_control"]},
            )
        )


def cmd_simulate(run: Run):
    out_dir = run.cfg.output.dir
    write_csv = out_dir is not None and run.cfg.output.format == "csv"
    for p in run.cfg.payoff_exprs():
        fn = terminal_functional(p)
        for c in run.controls([]):
            b = simulate(c, run.sim.n_paths, run.sim.n_steps, run.sim.horizon, run.sim.seed,
                         run.sim.increments, run.sim.block_size)
            xi = fn(b)
            dens = np.diff(b.qv, axis=1) / b.dt
            ok = bool(dens.min() >= run.band.var_min * (1 - 1e-12) and dens.max() <= run.band.var_max * (1 + 1e-12))
            n = b.n_paths
            run.results.append(
                {
                    "payoff": p.text(),
                    "control": c.id,
                    "mean_B_T": float(b.B[:, -1].mean()),
                    "se_B_T": float(b.B[:, -1].std(ddof=1) / math.sqrt(n)),
                    "mean_qv_T": float(b.qv[:, -1].mean()),
                    "mean_payoff": float(xi.mean()),
                    "se_payoff": float(xi.std(ddof=1) / math.sqrt(n)),
                }
            )
            run.add(
                InequalityReport(
                    check="qv_density_in_band",
                    lhs=float(dens.max()),
                    rhs=run.band.var_max,
                    holds=ok,
                    tolerance=0.0,
                    seeds=[run.sim.seed],
                    details={"control": c.id, "min_density": float(dens.min())},
                )
            )
            if write_csv:
                safe = "".join(ch if ch.isalnum() else "_" for ch in c.id)
                b.to_csv(Path(out_dir) / f"paths_{safe}.csv", xi)


def cmd_verify(run: Run):
    e = run.cfg.exponents
    for name in run.cfg.checks:
        if name == "martingale":
            for z, eta in run.cfg.martingale_pairs:
                ctr = run.controls([]) + [eta_matching_control(eta, run.band)]
                r = verify_martingale_construction(z, eta, ctr, run.sim, run.band)
                r.details["pair"] = [z, eta]
                run.add(r)
            continue
        for p in run.cfg.payoff_exprs():
            if name == "thm33":
                r = verify_thm33(p, run.band, run.sim, e.alpha, e.delta, e.gamma, run.cyl)
            elif name == "lemma32":
                r = verify_lemma32(p, run.band, run.sim, e.beta, e.gamma, run.cyl)
            elif name == "cor34":
                r = verify_cor34(p, run.band, run.sim, e.gamma, run.cyl)
            else:
                r = verify_cor49(p, run.cfg.other_expr(), run.band, run.sim, e.cor49_alpha, e.beta, e.gamma, run.cyl)
            run.add(r)


COMMANDS = {
    "expect": cmd_expect,
    "conditional": cmd_conditional,
    "decompose": cmd_decompose,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
}


def _clean(x):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    return x


def run_command(command: str, cfg: ExperimentConfig, threads: int | None = None) -> dict:
    """Execute one command and return the report dictionary."""
    start = time.perf_counter()
    run = Run(cfg, threads)
    COMMANDS[command](run)
    report = {
        "version": __version__,
        "command": command,
        "config": cfg.model_dump(mode="json"),
        "checks": run.checks,
        "results": run.results,
        "all_hold": all(c["holds"] for c in run.checks),
        TIMING_KEY: {"seconds": time.perf_counter() - start},
    }
    return _clean(report)


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)


def results_csv(report: dict) -> str:
    rows = report["results"]
    if not rows:
        return ""
    keys = sorted({k for r in rows for k in r})
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: json.dumps(v) if isinstance(v, (list, dict)) else v for k, v in r.items()})
    return buf.getvalue()


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gcalc", description="Batch front end for G-expectation experiments.")
    ap.add_argument("--version", action="version", version=f"gcalc {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="JSON experiment config")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", type=Path, help="output directory")
        sp.add_argument("--format", choices=("json", "csv"), help="report format")
        sp.add_argument("--threads", type=int, help="worker threads (default: GCALC_THREADS or 1)")
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = args.threads
    if threads is None and os.environ.get("GCALC_THREADS"):
        threads = int(os.environ["GCALC_THREADS"])
    try:
        cfg = load_config(args.config, seed=args.seed)
        out = cfg.output.model_copy(
            update={k: v for k, v in (("dir", str(args.out) if args.out else None), ("format", args.format)) if v}
        )
        cfg = cfg.model_copy(update={"output": out})
    except ConfigError as e:
        for loc, msg in e.errors:
            print(f"config error: {loc}: {msg}", file=sys.stderr)
        return 2
    if cfg.output.dir:
        Path(cfg.output.dir).mkdir(parents=True, exist_ok=True)
    try:
        report = run_command(args.command, cfg, threads)
    except GCalcError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    text = report_json(report)
    if cfg.output.dir:
        d = Path(cfg.output.dir)
        (d / "report.json").write_text(text + "\n")
        if cfg.output.format == "csv":
            (d / "results.csv").write_text(results_csv(report))
    elif cfg.output.format == "csv":
        sys.stdout.write(results_csv(report))
    else:
        print(text)
    return 0 if report["all_hold"] else 1


if __name__ == "__main__":
    sys.exit(main())
