"""Command line entry point.

Subcommands: simulate, reconstruct, squeeze, slh, analyze.  Results go to
stdout as JSON (or to ``--out``); failures exit nonzero with a JSON error
object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, SpinFilterError
from .estimator import SamplerConfig, estimate_backaction_free, estimate_separable
from .harness import ExperimentConfig, analyze_run, run_experiment, slh_check_table
from .slh import FaradayParams, spectra, wong_zakai_limit, faraday_E
from .spin import SpinBasis, bloch_from_angles
from .trajectory import ControlWaveform, MeasurementRecord


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message, usage=self.format_usage().strip())


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or key = value experiment config")
    p.add_argument("--qubits", type=int, nargs="+", help="qubit counts n")
    p.add_argument("--trials", type=int, help="trials per qubit count")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--dt", type=float, help="integrator step (units of 1/kappa)")
    p.add_argument("--out", help="output directory or file")
    p.add_argument("--format", choices=("csv", "json"), help="summary table format")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spinfilter", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="simulate truth trajectories for an experiment config")
    _common(p)
    p.add_argument("--experiment", choices=("tomography", "track", "squeeze"))
    p.add_argument("--workers", type=int)
    p.add_argument("--analyze", action="store_true", help="run the analysis phase as well")

    p = sub.add_parser("reconstruct", help="estimate the initial state from a record file")
    _common(p)
    p.add_argument("--record", required=True)
    p.add_argument("--control", help="control CSV (default: no control)")
    p.add_argument("--method", choices=("separable", "backaction-free"), default="separable")
    p.add_argument("--truth", type=float, nargs=2, metavar=("THETA", "PHI"))

    p = sub.add_parser("squeeze", help="minimum squeezing with and without controls")
    _common(p)
    p.add_argument("--workers", type=int)

    p = sub.add_parser("slh", help="Faraday SLH coefficient residuals and spectra")
    _common(p)
    p.add_argument("--chi0", type=float, nargs="+", default=[0.0, 0.01, 0.1])
    p.add_argument("--kappa", type=float, default=1.0)
    p.add_argument("--spectra", action="store_true")

    p = sub.add_parser("analyze", help="recompute outcomes and summaries from stored trial files")
    _common(p)
    p.add_argument("--workers", type=int)
    return parser


def _config(args, **overrides) -> ExperimentConfig:
    data = {}
    if args.config:
        cfg = ExperimentConfig.from_file(args.config)
        data = cfg.to_dict()
    flags = {"n_list": args.qubits, "trials": args.trials, "master_seed": args.seed, "dt": args.dt,
             "out": args.out, "format": args.format, "workers": getattr(args, "workers", None)}
    data.update({k: v for k, v in flags.items() if v is not None})
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(data)


def _emit(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _cmd_simulate(args) -> dict:
    cfg = _config(args, experiment=args.experiment)
    phases = ("simulate", "analyze") if args.analyze else ("simulate",)
    m = run_experiment(cfg, phases=phases)
    return {"out": cfg.out, "trials": len(m.trials), "wall_clock": m.wall_clock}


def _cmd_reconstruct(args) -> dict:
    rec = MeasurementRecord.from_csv(args.record)
    control = ControlWaveform.from_csv(args.control) if args.control else ControlWaveform.none()
    sampler = SamplerConfig()
    if args.config:
        sampler = ExperimentConfig.from_file(args.config).sampler
    truth = bloch_from_angles(*args.truth) if args.truth else None
    seed = args.seed if args.seed is not None else rec.seed
    est = estimate_separable if args.method == "separable" else estimate_backaction_free
    res = est(rec, control, sampler, seed=seed, truth=truth)
    payload = json.loads(res.to_json(rec.n, seed))
    if args.out:
        Path(args.out).write_text(json.dumps(payload) + "\n")
    return payload


def _cmd_squeeze(args) -> dict:
    cfg = _config(args, experiment="squeeze", truth="+x", n_list=args.qubits or [50])
    if not args.config and args.trials is None:
        cfg.trials = 10
    m = run_experiment(cfg)
    rows = {}
    for n in cfg.n_list:
        ts = [t["outcome"] for t in m.trials if t["n"] == n]
        rows[str(n)] = {"median_min_xi2_db_uncontrolled": float(np.median([o["min_xi2_db_off"] for o in ts])),
                        "median_min_xi2_db_controlled": float(np.median([o["min_xi2_db_on"] for o in ts])),
                        "trials": len(ts)}
    return {"out": cfg.out, "summary": rows}


def _cmd_slh(args) -> dict:
    ns = args.qubits or [2]
    rows = slh_check_table(ns, args.chi0, args.kappa)
    out = {"residuals": rows}
    if args.spectra:
        out["spectra"] = {f"n={n},chi0={c}": spectra(wong_zakai_limit(faraday_E(FaradayParams(c, args.kappa,
                                                                                           SpinBasis(n)))))
                          for n in ns for c in args.chi0}
    if args.out:
        _emit(out, args.out)
    return out


def _cmd_analyze(args) -> dict:
    if not args.out:
        raise ConfigError("analyze needs --out pointing at a run directory")
    m = analyze_run(args.out, workers=getattr(args, "workers", None))
    return {"out": args.out, "trials": len(m.trials)}


COMMANDS = {"simulate": _cmd_simulate, "reconstruct": _cmd_reconstruct, "squeeze": _cmd_squeeze,
            "slh": _cmd_slh, "analyze": _cmd_analyze}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        result = COMMANDS[args.command](args)
        print(json.dumps(result, sort_keys=True, default=float))
        return 0
    except SpinFilterError as exc:
        print(json.dumps(exc.as_dict(), default=str), file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "details": {}}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
