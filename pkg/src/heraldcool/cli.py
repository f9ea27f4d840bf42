"""Command-line front end.

Subcommands
-----------
sweep-rap   thermally averaged RAP transfer efficiency versus pulse length
cool        Monte Carlo of the heralded cooling sequence plus closed-form comparison
rabi        synthetic Rabi scan (CSV) from a model, thermal or simulated state
fit         fit a Rabi scan (CSV or JSON) and write the result as JSON

Exit codes: 0 success, 1 usage or config error, 2 numerical failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .analysis import (ScanFormatError, estimate_nbar_from_carrier, fit_rabi,
                       load_scan, save_scan, synthesize_scan, tail_populations,
                       thermal_scan_populations)
from .config import ConfigError, RunConfig
from .dynamics import IntegrationError, TruncationError, transfer_efficiency
from .fock import ThermalDistribution, truncation_for
from .protocol import (NOT_RUN, analytic_p0, exact_herald_statistics, herald_statistics, run_trials,
                       sequence_p0)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("heraldcool")


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _u64(text):
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser():
    parser = _Parser(prog="heraldcool", description=__doc__.split("\n\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--seed", type=_u64, help="master RNG seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--shots", type=int, help="trials (cool) or shots per point (rabi)")
    common.add_argument("--cycles", type=int, help="herald cycles")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("sweep-rap", parents=[common], help="RAP efficiency vs pulse length")
    p.add_argument("--transition", choices=("carrier", "sideband", "both"), default="both")
    sub.add_parser("cool", parents=[common], help="simulate heralded cooling")
    sub.add_parser("rabi", parents=[common], help="synthesise a Rabi scan")
    p = sub.add_parser("fit", parents=[common], help="fit a Rabi scan")
    p.add_argument("--input", type=Path, help="scan file (overrides fit.input)")
    return parser


def _flags(args):
    flags = {"seed": args.seed, "output_dir": str(args.out) if args.out else None}
    if args.command == "cool":
        flags.update({"protocol.shots": args.shots, "protocol.cycles": args.cycles})
    elif args.command == "rabi":
        flags.update({"rabi.shots": args.shots, "rabi.cycles": args.cycles})
    elif args.command == "fit" and args.input is not None:
        flags["fit.input"] = str(args.input)
    return flags


def _header(cfg, command):
    return f"heraldcool {command} config_sha256={cfg.digest()} seed={cfg.seed}"


def _write(path, text):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    log.info("wrote %s", path)
    return path


def _write_json(path, cfg, command, payload):
    meta = {"command": command, "config_sha256": cfg.digest(), "seed": cfg.seed}
    body = json.dumps({"meta": meta, **payload}, indent=2, allow_nan=False)
    return _write(path, body + "\n")


def _num(x):
    """JSON-safe float: NaN and inf become None."""
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


# subcommands

def cmd_sweep_rap(cfg, transitions=("carrier", "sideband")):
    """Write ``sweep_rap.csv`` with one row per (transition, duration)."""
    mode = cfg.mode()
    init = ThermalDistribution.create(cfg.data["thermal"]["nbar"], n_max=mode.n_max)
    rtol = cfg.data["sweep"]["rtol"]
    rows, failures = [], 0
    for which in transitions:
        grid = cfg.sweep_grid(which)
        if grid.size == 0:
            raise UsageError(f"sweep grid for {which} is empty")
        base = cfg.pulse(which)
        for duration in grid:
            pulse = replace(base, duration=float(duration))
            try:
                eff = transfer_efficiency(pulse, init, mode, rtol=rtol)
            except IntegrationError as err:
                log.error("%s T=%g: %s", which, duration, err)
                eff, failures = math.nan, failures + 1
            rows.append((which, float(duration), eff))
            log.info("%s T=%.3e s efficiency=%.6f", which, duration, eff)
    buf = io.StringIO()
    buf.write(f"# {_header(cfg, 'sweep-rap')}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("transition", "duration_s", "transfer_efficiency"))
    for which, duration, eff in rows:
        writer.writerow((which, repr(duration), "nan" if math.isnan(eff) else repr(eff)))
    path = _write(cfg.output_dir / "sweep_rap.csv", buf.getvalue())
    if failures:
        raise NumericalFailure(f"{failures} of {len(rows)} sweep points failed to integrate")
    return path


def _epsilon(cfg):
    forced = cfg.data["protocol"]["forced_transfer"]
    return 1.0 - forced if forced is not None else cfg.data["protocol"]["epsilon"]


def cmd_cool(cfg):
    """Write ``cool_summary.json`` and the per-trial log ``cool_trials.csv``."""
    config = cfg.protocol()
    batch = run_trials(config, workers=cfg.data["protocol"]["workers"])
    exact = exact_herald_statistics(config)
    eps = _epsilon(cfg)
    per_cycle = []
    for m in range(1, config.cycles + 1):
        stats = herald_statistics(batch, cycles=m)
        frac, p0, _ = exact[m - 1]
        entry = stats.to_dict()
        entry.update({
            "exact_heralded_fraction": _num(frac),
            "exact_p0_given_herald": _num(p0),
            "epsilon": eps,
            "analytic_p0_with_carrier": analytic_p0(eps, config.nbar, m, "with-carrier"),
            "analytic_p0_ideal": analytic_p0(eps, config.nbar, m, "ideal"),
            "sequence_p0": sequence_p0(eps, config.nbar, m),
        })
        per_cycle.append({k: (_num(v) if isinstance(v, float) else v) for k, v in entry.items()})
        if not stats.defined:
            log.warning("no accepted trials after %d cycle(s); statistics undefined", m)
    summary = {"nbar": config.nbar, "shots": config.shots, "cycles": config.cycles,
               "heating_mean": config.heating_mean, "per_cycle": per_cycle}
    summary_path = _write_json(cfg.output_dir / "cool_summary.json", cfg, "cool", summary)

    buf = io.StringIO()
    buf.write(f"# {_header(cfg, 'cool')}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("trial", "initial_n", "n_after_raps", "herald_bits", "accepted", "final_n"))
    bits = ["".join(str(b) for b in row if b != NOT_RUN) for row in batch.bits.tolist()]
    writer.writerows(zip(range(len(batch)), batch.initial_n.tolist(), batch.n_after_raps.tolist(),
                         bits, batch.accepted.astype(int).tolist(), batch.final_n.tolist()))
    trials_path = _write(cfg.output_dir / "cool_trials.csv", buf.getvalue())
    return summary_path, trials_path


def _rabi_populations(cfg):
    rabi = cfg.data["rabi"]
    if rabi["source"] == "thermal":
        return thermal_scan_populations(cfg.data["thermal"]["nbar"], cfg.data["thermal"]["tail_tol"])
    if rabi["source"] == "model":
        n_max = max(truncation_for(rabi["nbar_tail"], cfg.data["thermal"]["tail_tol"]), 2)
        return tail_populations(rabi["p0"], rabi["nbar_tail"], n_max)
    config = replace(cfg.protocol(), cycles=rabi["cycles"])
    batch = run_trials(config, workers=cfg.data["protocol"]["workers"])
    stats = herald_statistics(batch)
    if not stats.defined:
        raise NumericalFailure("protocol produced no heralded trials to probe")
    log.info("protocol source: %d accepted, p0=%.4f", stats.accepted, stats.p0_given_herald)
    return stats.motional_histogram


def cmd_rabi(cfg):
    """Write ``rabi_scan.csv``: binomially sampled excitation versus probe time."""
    rabi = cfg.data["rabi"]
    changes = {} if rabi["probe_omega0"] is None else {"omega0": rabi["probe_omega0"]}
    mode = cfg.mode(**changes)
    times = np.linspace(rabi["start"], rabi["stop"], rabi["points"])
    rng = np.random.default_rng([cfg.seed, 1])
    scan = synthesize_scan(_rabi_populations(cfg), rabi["transition"], times, mode,
                           rabi["shots"], rng)
    path = cfg.output_dir / "rabi_scan.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_scan(scan, path, header_lines=[_header(cfg, "rabi")])
    return path


def cmd_fit(cfg):
    """Write ``fit_result.json`` for the scan named by ``fit.input``."""
    opts = cfg.data["fit"]
    if opts["input"] is None:
        raise UsageError("fit needs an input scan (--input or fit.input)")
    scan = load_scan(opts["input"])
    mode = cfg.mode()
    fit_mode = opts["mode"]
    if fit_mode == "auto":
        fit_mode = "nbar" if scan.transition == "carrier" else "p0"
    if fit_mode == "nbar":
        est = estimate_nbar_from_carrier(scan, mode, nbar_guess=opts["nbar_tail"],
                                         n_starts=opts["n_starts"])
        payload = {"mode": "nbar", "transition": scan.transition, "nbar": _num(est.nbar),
                   "nbar_err": _num(est.nbar_err), "omega0": _num(est.omega0),
                   "converged": est.converged, "wide_uncertainty": est.wide_uncertainty,
                   "fit": est.fit.to_dict()}
    else:
        guess = (opts["p0"], opts["eta"] or mode.lamb_dicke, opts["nbar_tail"],
                 opts["omega0"] or mode.omega0)
        result = fit_rabi(scan, guess, n_starts=opts["n_starts"],
                          omega0_prior=opts["omega0_prior"])
        payload = {"mode": "p0", "transition": scan.transition, **result.to_dict()}
    return _write_json(cfg.output_dir / "fit_result.json", cfg, "fit", payload)


def run(args):
    cfg = RunConfig.load(args.config, flags=_flags(args))
    cfg.output_dir.mkdir(parents=True, exist_ok=True)   # fail on an unwritable path before any work
    if args.command == "sweep-rap":
        which = ("carrier", "sideband") if args.transition == "both" else (args.transition,)
        return cmd_sweep_rap(cfg, which)
    return {"cool": cmd_cool, "rabi": cmd_rabi, "fit": cmd_fit}[args.command](cfg)


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")
    try:
        run(args)
    except (ConfigError, UsageError, ScanFormatError, json.JSONDecodeError) as err:
        print(f"heraldcool: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFailure, IntegrationError, TruncationError, FloatingPointError) as err:
        print(f"heraldcool: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as err:
        print(f"heraldcool: I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
