"""Conditioning of the learned 3-link model along a PEIC closed loop on that model.

For each GP noise floor, trains the 3-link residual GP, runs PEIC with the GP
model itself as plant, and reports the PEIC identity residuals, how well the
designed acceleration solves the model, and the smallest singular value of the
effective inertia ``Dbar + d mu / d qdd``. A near-singular effective inertia means
the model's forward dynamics are ill-posed, and the identities are lost to
round-off.

    python3 scripts/gp_model_conditioning.py [--floors 1e-3 1e-2 5e-2] [--t-end 5]
"""

import argparse

from gpbalance import pipelines as pl
from gpbalance.config import load_scenario
from gpbalance.control import GpDynamics


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--floors", type=float, nargs="+", default=[1e-3, 1e-2, 5e-2])
    p.add_argument("--t-end", type=float, default=5.0)
    args = p.parse_args()
    for floor in args.floors:
        cfg = load_scenario("three_link_peic", [f"gp.vartheta_floor={floor}", f"sim.t_end={args.t_end}"])
        gp = pl.train(cfg, pl.collect(cfg))
        res = pl.peic_identities(cfg, gp)
        dyn = GpDynamics(pl.build_nominal(cfg), gp)
        print(f"vartheta floor {floor:g}: {res.ticks} ticks ({res.episode.reason or 'completed'})")
        for k, v in res.residuals.items():
            print(f"  {k}: {v:.2e}")
        print(f"  model residual {pl.model_residual(res.episode, dyn):.2e}")
        print(f"  min sigma(Dbar + dmu/dqdd) {pl.min_model_inertia(res.episode, dyn):.2e}")


if __name__ == "__main__":
    main()
