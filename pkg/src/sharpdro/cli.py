"""Command-line entry point: ``sharpdro <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure
(a ``failure.json`` with the diagnostic is written to the output directory).
"""
from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

from . import __version__, harness
from .config import load_config, parse_config
from .errors import ConfigError, SharpDROError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p, out=True):
    p.add_argument("--config", help="YAML experiment config (defaults when omitted)")
    if out:
        p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, default=None,
                   help="thread count; results do not depend on it (env SHARPDRO_WORKERS)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="sharpdro", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"sharpdro {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="build the corrupted train/test datasets")
    _common(p)

    p = sub.add_parser("train", help="train one method on one seed")
    _common(p)
    p.add_argument("--data", help="directory written by `generate` (regenerated when omitted)")
    p.add_argument("--method")
    p.add_argument("--seed", type=int)
    p.add_argument("--rho", type=float)

    p = sub.add_parser("evaluate", help="per-severity metrics and a loss-surface slice for saved weights")
    _common(p)
    p.add_argument("--theta", required=True, help="theta.npz written by `train`")
    p.add_argument("--data")

    p = sub.add_parser("sweep-rho", help="accuracy per severity across perturbation radii")
    _common(p)

    p = sub.add_parser("compare", help="all configured methods across all configured seeds")
    _common(p)

    p = sub.add_parser("minimax-verify", help="audit the SGDA+SAM convergence guarantees")
    _common(p)
    p.add_argument("--force", action="store_true", help="run even when step sizes violate the theorem")

    p = sub.add_parser("report", help="merge result tables from several runs")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="merge despite tool-version mismatches")
    return ap


def _load(args):
    cfg = load_config(args.config) if args.config else parse_config("")
    if getattr(args, "method", None) or getattr(args, "seed", None) is not None \
            or getattr(args, "rho", None) is not None:
        values = {}
        if args.method:
            values["method"] = args.method
        if args.seed is not None:
            values["seed"] = args.seed
        if args.rho is not None:
            values["rho"] = args.rho
        cfg = cfg.override("train", **values)
    return cfg


def _fail(out, exc) -> int:
    path = None
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        path = Path(out) / "failure.json"
        path.write_text(json.dumps({
            "tool_version": __version__, "error": type(exc).__name__, "message": str(exc),
            "traceback": traceback.format_exception(type(exc), exc, exc.__traceback__),
            "time": harness.timestamp(),
        }, indent=2) + "\n")
    print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
    if path:
        print(f"failure manifest: {path}", file=sys.stderr)
    return 2


def run(args) -> int:
    if args.command == "report":
        harness.report_command(args.inputs, args.out, args.force)
        print(f"wrote {Path(args.out) / 'merged.csv'}")
        return 0
    cfg = _load(args)
    workers = args.workers if args.workers is not None else harness.default_workers()
    if workers < 1:
        raise UsageError("--workers must be >= 1")
    out = Path(args.out)
    if args.command == "generate":
        tr, te = harness.generate(cfg, out, workers)
        print(f"wrote {len(tr)} train and {len(te)} test rows to {out}")
    elif args.command == "train":
        record = harness.train_command(cfg, out, args.data, workers)
        if record.status != "ok":
            print(f"error: run aborted: {record.diagnostic}", file=sys.stderr)
            print(f"failure manifest: {out / 'metrics.csv.manifest.json'}", file=sys.stderr)
            return 2
        print(f"wrote {out / 'metrics.csv'}")
    elif args.command == "evaluate":
        harness.evaluate_command(cfg, args.theta, out, args.data, workers)
        print(f"wrote {out / 'metrics.csv'} and {out / 'surface.csv'}")
    elif args.command == "sweep-rho":
        harness.sweep_rho_command(cfg, out, workers)
        print(f"wrote {out / 'sweep.csv'}")
    elif args.command == "compare":
        harness.compare_command(cfg, out, workers)
        print(f"wrote {out / 'compare.csv'}")
    elif args.command == "minimax-verify":
        rate_check, checks = harness.minimax_command(cfg, out, args.force)
        if checks is None:
            print("step sizes violate the convergence conditions:", file=sys.stderr)
            for name in rate_check.violations:
                lhs, rhs = rate_check.values[name]
                print(f"  {name}: {lhs!r} > {rhs!r}", file=sys.stderr)
            print("pass --force to run anyway", file=sys.stderr)
            return 1
        failed = [c for c in checks if not c[1]]
        for name, ok, value, threshold in checks:
            print(f"{'PASS' if ok else 'FAIL'} {name}: {value!r} vs {threshold!r}")
        if failed:
            print(f"failure manifest: {out / 'checks.csv.manifest.json'}", file=sys.stderr)
            return 2
    return 0


def main(argv=None) -> int:
    out = None
    try:
        args = build_parser().parse_args(argv)
        out = getattr(args, "out", None)
        return run(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (SharpDROError, OSError) as exc:
        return _fail(out, exc)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
