#!/usr/bin/env python3
"""
Benchmark: reference convergence tables
=======================================

Runs the preset studies, times them and compares the finest-mesh observed
rates with the reference ones.

    python benchmarks/reproduce_tables.py                 # all presets, h down to 1/16
    python benchmarks/reproduce_tables.py --full test5    # one preset, h down to 1/32
"""

import argparse
import time
from typing import List, Optional, Sequence

from argyris_qge import PRESETS, Colors, format_time, run_study

colors = Colors


def _rate_cell(got: Optional[float], want: float, tolerance: float) -> str:
    if got is None:
        return colors.warning("   n/a")
    text = f"{got:6.3f}"
    return colors.success(text) if abs(got - want) <= tolerance else colors.error(text)


def run_preset(name: str, full: bool, workers: Optional[int], tolerance: float) -> bool:
    preset = PRESETS[name]
    legs: Sequence[str] = preset.h_values if full else [h for h in preset.h_values if h != "1/32"]
    print(f"\n{colors.info(f'{name}: {preset.description}')}")
    print(f"  Meshes: {', '.join(legs)}")

    start = time.perf_counter()
    table = run_study(preset.problem(), legs, workers=workers)
    elapsed = time.perf_counter() - start

    print()
    print(table.format())
    final = table.final
    cells = [_rate_cell(got, want, tolerance) for got, want in zip(final.rates, preset.reference_rates)]
    reference = " ".join(f"{r:6.3f}" for r in preset.reference_rates)
    print(f"\n  Final rates:     {' '.join(cells)}")
    print(f"  Reference (1/32): {reference}")
    print(f"  Time:            {format_time(elapsed)}")
    return table.all_ok


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="Reproduce the reference convergence tables")
    parser.add_argument("presets", nargs="*", metavar="PRESET",
                        help=f"presets to run (default: all of {', '.join(PRESETS)})")
    parser.add_argument("--full", action="store_true", help="include h=1/32")
    parser.add_argument("--workers", type=int, default=None, help="concurrent rows per study")
    parser.add_argument("--tolerance", type=float, default=0.25,
                        help="rate tolerance used for coloring (default: 0.25)")
    args = parser.parse_args(argv)

    print(colors.bold("\n" + "=" * 80))
    print(colors.bold("ARGYRIS CONVERGENCE TABLES".center(80)))
    print(colors.bold("=" * 80))

    names = args.presets or list(PRESETS)
    unknown = [name for name in names if name not in PRESETS]
    if unknown:
        parser.error(f"unknown preset(s): {', '.join(unknown)}")
    failed = [name for name in names if not run_preset(name, args.full, args.workers, args.tolerance)]

    print(f"\n{colors.bold('=' * 80)}")
    if failed:
        print(colors.error(f"Failed rows in: {', '.join(failed)}"))
    else:
        print(colors.success("All studies completed"))
    print(colors.bold("=" * 80))
    return 1 if failed else 0


if __name__ == '__main__':
    raise SystemExit(main())
