"""When does EIC's uncontrolled motion exceed 1 rad, compared with when the pendulum falls?

Runs the EIC failure scenario with the fall and error limits lifted, on the true
plant with the learned model and on the nominal closed loop, and prints the first
time ||p_an - p_an^d|| > 1 rad next to the first time the balance error exceeds
the configured fall limit.

    python3 scripts/eic_drift_timeline.py [--t-end 10]
"""

import argparse

import numpy as np

from gpbalance import analysis as an
from gpbalance import pipelines as pl
from gpbalance.config import load_scenario


def first_time(t, mask):
    idx = np.flatnonzero(mask)
    return float(t[idx[0]]) if idx.size else None


def timeline(cfg, gp, fall_limit):
    with np.errstate(over="ignore", invalid="ignore"):  # the fallen robot is integrated until it blows up
        episode = pl.run(cfg, gp)
    motion = an.uncontrolled_motion_metric(episode)
    fell = first_time(episode.t, np.abs(episode.e_u).max(axis=1) > fall_limit)
    return episode, motion, fell


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--t-end", type=float, default=10.0)
    args = p.parse_args()
    base = load_scenario("three_link_eic_failure")
    fall_limit = base.sim.fall_limit
    loose = load_scenario("three_link_eic_failure", [f"sim.t_end={args.t_end}", "sim.fall_limit=1e9",
                                                     "sim.error_limit=1e9"])
    gp = pl.train(base, pl.collect(base))
    for label, cfg, model in (("true plant + GP", loose, gp), ("nominal loop", pl._nominal_loop(loose), None)):
        episode, motion, fell = timeline(cfg, model, fall_limit)
        print(f"{label}: ran to {episode.t[-1]:.3f} s ({episode.reason or 'completed'})")
        print(f"  balance error > {fall_limit} rad first at {fell}")
        print(f"  ||p_an - p_an^d|| > 1 rad first at {motion.first_exceed(1.0)}")
        print(f"  max null-space command {motion.max_command():.2e}")


if __name__ == "__main__":
    main()
