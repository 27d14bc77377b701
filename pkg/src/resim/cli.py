"""Command-line entry point: ``resim {reconstruct,simulate,evaluate,stats,presets}``.

Exit codes: 0 success, 2 input or config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import METHODS, ConfigError, load_config
from .ingest import ManifestError, parse_label_line
from .lidar.profile import UnknownPresetError, profile_table
from .metrics import distribution_divergence, histogram_table, size_distribution
from .ply import PlyError
from .replay import parse_export_line
from .sdf import FitDivergenceError

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
THREADS_ENV = "RESIM_THREADS"

log = logging.getLogger("resim")


def set_threads(n: Optional[int]) -> None:
    """Apply ``n`` (or ``$RESIM_THREADS``) to the parallel ray-casting kernels."""
    import numba

    if n is None:
        env = os.environ.get(THREADS_ENV)
        if not env:
            return
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(THREADS_ENV, f"not an integer: {env!r}") from None
    if n < 1:
        raise ConfigError("threads", "must be at least 1")
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def read_label_file(path) -> list:
    """Labels in either the ingest layout (9 fields) or the exported layout (8 fields)."""
    labels = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            try:
                n = len(text.split())
                labels.append(parse_export_line(text) if n == 8 else parse_label_line(text))
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}", str(exc)) from None
    return labels


def _common(p: argparse.ArgumentParser, out_required: bool = False) -> None:
    p.add_argument("--config", type=Path, help="pipeline YAML config")
    p.add_argument("--seed", type=int, help="root seed (overrides the config)")
    p.add_argument("--out", type=Path, required=out_required, help="output directory (overrides the config)")
    p.add_argument("--threads", type=int, help=f"worker threads (default: ${THREADS_ENV} or all cores)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="resim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reconstruct", help="fuse a posed sequence into an SDF grid and mesh")
    _common(p)
    p.add_argument("--method", choices=METHODS)

    p = sub.add_parser("simulate", help="replay objects and cast virtual scans against a mesh")
    _common(p)
    p.add_argument("--profile", help="target sensor: preset name or profile file")
    p.add_argument("--mesh", type=Path, help="background mesh (default: reconstruct output)")

    p = sub.add_parser("evaluate", help="truncated Chamfer distance and depth RMSE")
    _common(p)
    p.add_argument("--mesh", type=Path, help="mesh to re-raycast (default: reconstruct output)")
    p.add_argument("--real", type=Path, help="manifest of real scans (pairs with --sim)")
    p.add_argument("--sim", type=Path, help="manifest of simulated scans")
    p.add_argument("--detail", action="store_true", help="also report RMSE with unsquared residuals")

    p = sub.add_parser("stats", help="object-size histograms and pairwise divergence")
    p.add_argument("labels", nargs="+", type=Path, help="label files")
    p.add_argument("--bin-width", type=float, default=0.25, help="histogram bin width in metres")
    p.add_argument("--out", type=Path, help="write histograms.csv and divergence.csv here")

    sub.add_parser("presets", help="print the built-in sensor table")
    return parser


def _presets() -> int:
    rows = profile_table()
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def _stats(args) -> int:
    if not args.bin_width > 0:
        raise ConfigError("--bin-width", "must be positive")
    hists = []
    for path in args.labels:
        if not path.is_file():
            raise ConfigError("labels", f"file not found: {path}")
        hists.append((str(path), size_distribution(read_label_file(path), args.bin_width)))
    parts = [histogram_table(h, name) for name, h in hists]
    hist_csv = parts[0] + "".join(p.split("\n", 1)[1] for p in parts[1:])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["source"] + [n for n, _ in hists])
    for na, ha in hists:
        w.writerow([na] + [repr(distribution_divergence(ha, hb)) for _, hb in hists])
    if args.out is None:
        sys.stdout.write(hist_csv + "\n" + buf.getvalue())
    else:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "histograms.csv").write_text(hist_csv)
        (args.out / "divergence.csv").write_text(buf.getvalue())
    return EXIT_OK


def run(argv: Optional[Sequence[str]] = None) -> int:
    from . import pipeline

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "presets":
        return _presets()
    if args.command == "stats":
        return _stats(args)

    overrides = {"seed": args.seed, "output": args.out, "threads": args.threads,
                 "method": getattr(args, "method", None), "profile": getattr(args, "profile", None),
                 "mesh": getattr(args, "mesh", None)}
    cfg = load_config(args.config, overrides)
    set_threads(cfg.threads)
    if args.command == "reconstruct":
        written = pipeline.cmd_reconstruct(cfg)
    elif args.command == "simulate":
        written = pipeline.cmd_simulate(cfg)
    else:
        written = pipeline.cmd_evaluate(cfg, args.real, args.sim, detail=args.detail)
        sys.stdout.write(Path(written["scores"]).read_text())
    for key in sorted(written):
        log.info("wrote %s: %s", key, written[key])
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        code = run(argv)
    except (ConfigError, ManifestError, UnknownPresetError, PlyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_INPUT
    except FitDivergenceError as exc:
        print(f"error: reconstruction diverged: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_INPUT
    return code


if __name__ == "__main__":
    sys.exit(main())
