"""Command-line front end.

Exit codes: 0 success, 2 configuration problems, 3 pad deadline misses,
4 file I/O failures.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from dataclasses import replace

from .harness import (
    ConfigError,
    ExperimentConfig,
    config_fingerprint,
    load_config_file,
    read_matrix_csv,
    read_samples_csv,
    report_json,
    run_experiment,
    sweep,
    write_artifacts,
    write_sweep_csv,
)
from .leakage import analyze
from .machine import PadExceededError, measure_worst_case_pad
from .attacks import get_driver

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PAD = 3
EXIT_IO = 4


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None,
                        help="override the experiment seed")
    parser.add_argument("--jobs", type=int, default=1,
                        help="worker threads for shard execution")
    parser.add_argument("--out", default=None,
                        help="directory for output artifacts")


def _load(args: argparse.Namespace) -> ExperimentConfig:
    ec = load_config_file(args.config)
    if args.seed is not None:
        ec = replace(ec, seed=args.seed)
    if args.out is not None:
        ec = replace(ec, output_dir=args.out)
    return ec


def _cmd_run(args: argparse.Namespace) -> int:
    ec = _load(args)
    _, report = run_experiment(ec, jobs=max(1, args.jobs))
    sys.stdout.write(report_json(report, ec.seed, config_fingerprint(ec)))
    return EXIT_OK


def _cmd_analyze(args: argparse.Namespace) -> int:
    samples = read_samples_csv(args.samples)
    report = analyze(samples, trials=args.trials,
                     seed=args.seed if args.seed is not None else 0,
                     bin_width=args.bin_width)
    with open(args.samples, "rb") as fh:
        fingerprint = hashlib.sha256(fh.read()).hexdigest()[:16]
    sys.stdout.write(report_json(report,
                                 args.seed if args.seed is not None else 0,
                                 fingerprint))
    if args.out is not None:
        from .harness import _atomic_write, write_matrix_csv
        from .leakage import channel_matrix
        from .render import render_heatmap
        import os
        matrix = channel_matrix(samples, args.bin_width)
        write_matrix_csv(matrix, os.path.join(args.out, "matrix.csv"))
        _atomic_write(os.path.join(args.out, "report.json"),
                      report_json(report,
                                  args.seed if args.seed is not None else 0,
                                  fingerprint).encode())
        render_heatmap(matrix, os.path.join(args.out, "heatmap.ppm"))
    return EXIT_OK


def _cmd_sweep(args: argparse.Namespace) -> int:
    ec = _load(args)
    rows = sweep(ec, jobs=max(1, args.jobs))
    widths = (10, 12, 13)
    sys.stdout.write("%-*s %-*s %-*s %12s %12s  %s\n"
                     % (widths[0], "attack", widths[1], "mitigation",
                        widths[2], "policy", "m_mb", "m0_mb", "verdict"))
    for row in rows:
        m = "n/a" if row["m_mb"] is None else f"{row['m_mb']:.1f}"
        m0 = "n/a" if row["m0_mb"] is None else f"{row['m0_mb']:.1f}"
        sys.stdout.write("%-*s %-*s %-*s %12s %12s  %s\n"
                         % (widths[0], row["attack"], widths[1],
                            row["mitigation"], widths[2], row["policy"],
                            m, m0, row["verdict"]))
    if ec.output_dir:
        import os
        write_sweep_csv(rows, os.path.join(ec.output_dir, "sweep.csv"))
    return EXIT_OK


def _cmd_render(args: argparse.Namespace) -> int:
    from .render import render_heatmap
    matrix = read_matrix_csv(args.matrix)
    render_heatmap(matrix, args.output)
    return EXIT_OK


def _cmd_pad_calibrate(args: argparse.Namespace) -> int:
    ec = _load(args)
    driver = get_driver(ec.attack, ec.march)
    worst = driver.worst_case_raw()
    pad = measure_worst_case_pad(ec.march, ec.attack.mitigation,
                                 ec.attack.select_mask, driver.sw_ops)
    sys.stdout.write(f"worst_case_cycles = {worst}\n")
    sys.stdout.write(f"pad = {pad}\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="microleak",
        description="Deterministic timing side-channel simulator and "
                    "leakage analyzer.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="collect samples and analyze leakage")
    p_run.add_argument("config", help="experiment config file")
    _common(p_run)
    p_run.set_defaults(func=_cmd_run)

    p_an = sub.add_parser("analyze", help="re-analyze an existing samples CSV")
    p_an.add_argument("samples", help="samples.csv produced by run")
    p_an.add_argument("--trials", type=int, default=1000)
    p_an.add_argument("--bin-width", type=int, default=1)
    _common(p_an)
    p_an.set_defaults(func=_cmd_analyze)

    p_sw = sub.add_parser("sweep",
                          help="attack x mitigation x policy verdict grid")
    p_sw.add_argument("config", help="experiment config file")
    _common(p_sw)
    p_sw.set_defaults(func=_cmd_sweep)

    p_re = sub.add_parser("render", help="matrix.csv to PPM heatmap")
    p_re.add_argument("matrix", help="matrix.csv produced by run")
    p_re.add_argument("output", help="destination .ppm path")
    p_re.set_defaults(func=_cmd_render)

    p_pc = sub.add_parser("pad-calibrate",
                          help="print the worst-case switch cost and the pad")
    p_pc.add_argument("config", help="experiment config file")
    _common(p_pc)
    p_pc.set_defaults(func=_cmd_pad_calibrate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        sys.stderr.write(f"microleak: config error: {exc}\n")
        return EXIT_CONFIG
    except PadExceededError as exc:
        sys.stderr.write(f"microleak: {exc}\n")
        return EXIT_PAD
    except OSError as exc:
        sys.stderr.write(f"microleak: i/o error: {exc}\n")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
