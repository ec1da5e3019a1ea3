"""NEIC alpha sweep on the true plant (with the learned model) and on the nominal loop.

Prints, per alpha, how long the episode lasted, the mean actuated error and the
control effort, plus the relative effort change across the sweep.

    python3 scripts/neic_alpha_sweep.py [--alphas 0.5 1.0 1.5] [--t-end 30] [--workers 3]
"""

import argparse

from gpbalance import pipelines as pl
from gpbalance.config import load_scenario


def report(label, cfg, gp, alphas, workers):
    results = pl.sweep(cfg, "controller.alpha", alphas, gp, workers)
    reports = [r for _, _, r in results]
    decreasing, errs, change = pl.alpha_trend(reports, 2)
    print(label)
    for (alpha, episode, rep), err in zip(results, errs):
        print(f"  alpha={alpha}: ran {episode.t[-1]:.3f} s, actuated error {err:.4f}, effort {rep.stats.effort:.3f}")
    print(f"  strictly decreasing: {decreasing}, effort change {change:.1%}")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--alphas", type=float, nargs="+", default=list(pl.ALPHAS))
    p.add_argument("--t-end", type=float, default=30.0)
    p.add_argument("--workers", type=int, default=3)
    args = p.parse_args()
    cfg = load_scenario("three_link_neic", [f"sim.t_end={args.t_end}"])
    gp = pl.train(cfg, pl.collect(cfg))
    report("true plant + GP", cfg, gp, args.alphas, args.workers)
    report("nominal loop", pl._nominal_loop(cfg), None, args.alphas, args.workers)


if __name__ == "__main__":
    main()
