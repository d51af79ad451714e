"""``liabval`` command line: ``run`` and ``verify`` from a JSON config."""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

from . import __version__
from .config import load_config
from .errors import LiabvalError
from .report import TOLERANCES, clean, write_csv, write_json
from .runner import run, run_verification

EXIT_OK = 0
EXIT_FAIL = 1


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="liabval", description="Value insurance liabilities on scenario trees.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, text in (("run", "value the configured liability"), ("verify", "run oracle suites")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="path to the JSON run configuration")
        p.add_argument("--output-dir", help="override the configured output directory")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--threads", type=int, default=1, help="worker threads for optimizer restarts")
        p.add_argument("--strict", action="store_true", help="treat warnings as errors")
    return ap


def _fail(kind: str, message: str, details: dict | None = None) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "details": details or {}}, sort_keys=True) + "\n")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    with warnings.catch_warnings():
        if args.strict:
            warnings.simplefilter("error")
        try:
            cfg = load_config(args.config, args.output_dir, args.seed)
            out_dir = Path(cfg.output_dir)
            if args.command == "run":
                result = run(cfg, TOLERANCES, max(1, args.threads))
                write_json(out_dir / "valuation.json", result.report)
                write_csv(out_dir / "plot_series.csv", result.plot_header, result.plot_rows)
                print(json.dumps({"root": clean(result.report["root"]), "output_dir": str(out_dir)}, sort_keys=True))
                return EXIT_OK
            report = run_verification(cfg, TOLERANCES)
            write_json(out_dir / "verification.json", report)
            summary = {k: bool(v["passed"]) for k, v in report["suites"].items()}
            print(json.dumps({"passed": bool(report["passed"]), "suites": summary}, sort_keys=True))
            return EXIT_OK if report["passed"] else EXIT_FAIL
        except LiabvalError as exc:
            _fail(exc.kind, str(exc), clean(exc.details))
            return exc.exit_code
        except Warning as exc:
            _fail("warning", str(exc))
            return EXIT_FAIL
        except OSError as exc:
            _fail("io", str(exc))
            return EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
