"""Run every canned reproduction target and print its graded and supplementary checks.

    python3 scripts/reproduce_all.py [-o OUT] [--workers N] [targets ...]
"""

import argparse
import time

from gpbalance import pipelines as pl


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("targets", nargs="*", default=sorted(pl.REPRODUCE_TARGETS))
    p.add_argument("-o", "--output", default="reproduce-out")
    p.add_argument("--workers", type=int, default=3)
    args = p.parse_args()
    for target in args.targets:
        start = time.perf_counter()
        res = pl.reproduce(target, args.output, workers=args.workers)
        print(f"== {target} ({time.perf_counter() - start:.0f} s)")
        for c in res.checks:
            print("  " + c.line())
        for c in res.supplementary:
            print("  (supplementary) " + c.line())


if __name__ == "__main__":
    main()
