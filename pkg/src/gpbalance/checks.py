"""Numerical self-checks: structural identities of the models, solvers and GP.

Each check returns a ``Check`` with the measured worst-case value and its
tolerance; ``run_all`` is what ``gpbalance reproduce numerics`` reports.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .analysis import LyapunovSetup
from .control import GainSchedule, GpDynamics, bem_residual, bem_solve, nullspace_decomp
from .dynamics import NOMINALS, ROBOTS, RobotModel, State, _zero_forces, christoffel_coriolis, nominal_from_robot, total_energy
from .gp import GpHyperparams, condition, nll_and_grad
from .sim import TruePlant, rk4_step

Array = np.ndarray


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    tol: float
    above: bool = False  # pass when value > tol instead of value <= tol

    @property
    def passed(self) -> bool:
        return bool(self.value > self.tol) if self.above else bool(self.value <= self.tol)

    def line(self) -> str:
        rel = ">" if self.above else "<="
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.value:.4g} (need {rel} {self.tol:.4g})"


def _random_states(rng: np.random.Generator, k: int, count: int, q_span=1.0, qd_span=2.0):
    return rng.uniform(-q_span, q_span, (count, k)), rng.uniform(-qd_span, qd_span, (count, k))


# --- dynamics ---------------------------------------------------------------------------


def skew_symmetry(model: RobotModel, count: int = 100, seed: int = 0, h: float = 1e-6) -> float:
    """max |N + N^T| for ``N = Ddot - 2C``; Ddot by central differences along qd."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for q, qd in zip(*_random_states(rng, model.dof, count)):
        d_dot = (model.mass_matrix(q + h * qd) - model.mass_matrix(q - h * qd)) / (2 * h)
        n_mat = d_dot - 2 * christoffel_coriolis(model, q, qd)
        worst = max(worst, float(np.abs(n_mat + n_mat.T).max()))
    return worst


def energy_drift(model: RobotModel, t_end: float = 1.0, dt: float = 1e-3, seed: int = 0) -> float:
    """|E(t) - E(0)| over ``t_end`` for the unforced, frictionless plant under RK4."""
    free = dataclasses.replace(model, friction=_zero_forces)
    plant = TruePlant(free)
    rng = np.random.default_rng(seed)
    q, qd = rng.uniform(-0.3, 0.3, free.dof), rng.uniform(-0.5, 0.5, free.dof)
    e0 = total_energy(free, State(q, qd, free.n))
    u = np.zeros(free.n)
    worst = 0.0
    for _ in range(int(round(t_end / dt))):
        q, qd = rk4_step(plant, q, qd, u, dt)
        worst = max(worst, abs(total_energy(free, State(q, qd, free.n)) - e0))
    return worst


# --- decompositions -------------------------------------------------------------------------


def svd_identities(nominal_name: str = "three_link", count: int = 100, seed: int = 0) -> float:
    """Reconstruction, orthonormality, kernel and pseudo-inverse residuals of Dbar_ua."""
    nominal = NOMINALS[nominal_name]()
    n = nominal.n
    rng = np.random.default_rng(seed)
    worst = 0.0
    for q in rng.uniform(-1.0, 1.0, (count, nominal.dof)):
        d_ua = nominal.d_bar(q)[n:, :n]
        dec = nullspace_decomp(d_ua)
        worst = max(
            worst,
            float(np.abs(dec.reconstruct() - d_ua).max()),
            float(np.abs(dec.v.T @ dec.v - np.eye(n)).max()),
            float(np.abs(d_ua @ dec.v_n).max()) if dec.v_n.size else 0.0,
            float(np.abs(d_ua @ dec.pinv() - np.eye(nominal.m)).max()),
        )
    return worst


def lyapunov_residual() -> float:
    """|A0^T P + P A0 + Q| for both shipped gain sets."""
    sets = [GainSchedule.build(1, 1, 10, 3, 1000, 100), GainSchedule.build(2, 1, 15, 3, 25, 5.5)]
    return max(LyapunovSetup.from_gains(g).residual for g in sets)


# --- GP ---------------------------------------------------------------------------------------


def _toy_data(rng, count=20, dim=3):
    x = rng.uniform(-1, 1, (count, dim))
    y = np.sin(x @ np.arange(1.0, dim + 1)) + 0.5 * x[:, 0] ** 2
    return x, y


def gp_interpolation(seed: int = 0) -> float:
    """Max latent variance at the training inputs with vartheta = 0."""
    x, y = _toy_data(np.random.default_rng(seed))
    gp = condition(x, y, [GpHyperparams(np.full(3, 2.0), 1.0, 0.0)], 0, 1)
    return max(float(gp.variance(xi)[0]) for xi in x)


def gp_prior_reversion(seed: int = 0) -> float:
    """|mean| and |variance - sigma_f^2| far from the data."""
    x, y = _toy_data(np.random.default_rng(seed))
    gp = condition(x, y, [GpHyperparams(np.full(3, 2.0), 1.3, 0.1)], 0, 1)
    far = np.full(3, 50.0)
    return max(abs(float(gp.mean(far)[0])), abs(float(gp.variance(far)[0]) - 1.3**2))


def gp_nll_gradient(seed: int = 0, h: float = 1e-6) -> float:
    """Relative error between the analytic NLL gradient and central differences."""
    x, y = _toy_data(np.random.default_rng(seed))
    theta = np.log(np.array([1.5, 0.7, 2.0, 1.2, 0.2]))
    _, grad = nll_and_grad(theta, x, y)
    fd = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        fd[i] = (nll_and_grad(theta + e, x, y, False)[0] - nll_and_grad(theta - e, x, y, False)[0]) / (2 * h)
    return float(np.linalg.norm(grad - fd) / np.linalg.norm(fd))


def gp_two_point(seed: int = 0) -> float:
    """Mean and variance against the explicit 2x2 inverse (including the factorisation jitter)."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (2, 2))
    y = rng.normal(size=2)
    hyp = GpHyperparams(np.array([0.8, 1.7]), 1.1, 0.3)
    gp = condition(x, y, [hyp], 0, 1)
    s2, a = hyp.sigma_f**2, hyp.vartheta**2 + gp.channels[0].jitter
    k12 = s2 * math.exp(-0.5 * float((x[0] - x[1]) @ (hyp.w * (x[0] - x[1]))))
    det = (s2 + a) ** 2 - k12**2
    kinv = np.array([[s2 + a, -k12], [-k12, s2 + a]]) / det
    worst = 0.0
    for xs in rng.uniform(-1.5, 1.5, (10, 2)):
        ks = s2 * np.exp(-0.5 * ((x - xs) ** 2 @ hyp.w))
        worst = max(worst, abs(float(ks @ kinv @ y) - float(gp.mean(xs)[0])),
                    abs(s2 - float(ks @ kinv @ ks) - float(gp.variance(xs)[0])))
    return worst


# --- BEM ----------------------------------------------------------------------------------------


def _exact_three_link() -> GpDynamics:
    return GpDynamics(nominal_from_robot(ROBOTS["three_link"]()), None)


def bem_symmetric(count: int = 20, seed: int = 0) -> float:
    """At rest with zero external command, link 3 balances upright: theta3_e = -theta2."""
    dyn = _exact_three_link()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for q_a in rng.uniform(-0.8, 0.8, (count, 2)):
        est = bem_solve(dyn, np.zeros(2), q_a, np.zeros(2), np.zeros(1), tol=1e-12)
        worst = max(worst, abs(float(est.q_u_e[0]) + q_a[1]))
    return worst


def bem_grid_scan(count: int = 20, seed: int = 0, span: float = 1.5, coarse: float = 1e-3, fine: float = 1e-5) -> float:
    """Distance between the solver's root and the nearest root located on a 1e-5 grid."""
    dyn = _exact_three_link()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        q_a, v_ext = rng.uniform(-0.5, 0.5, 2), rng.uniform(-2.0, 2.0, 2)
        est = bem_solve(dyn, v_ext, q_a, np.zeros(2), np.array([-q_a[1]]), tol=1e-12)
        root = float(est.q_u_e[0])

        def f(z):
            return float(bem_residual(dyn, q_a, np.zeros(2), v_ext, np.array([z]))[0])

        grid = np.arange(-span, span + coarse, coarse) - q_a[1]
        vals = np.array([f(z) for z in grid])
        brackets = np.flatnonzero(np.sign(vals[:-1]) != np.sign(vals[1:]))
        if brackets.size == 0:
            return math.inf
        b = brackets[np.argmin(np.abs(grid[brackets] - root))]
        sub = np.arange(grid[b], grid[b + 1] + fine, fine)
        scan_root = float(sub[np.argmin([abs(f(z)) for z in sub])])
        worst = max(worst, abs(scan_root - root))
    return worst


def run_all() -> list[Check]:
    checks = []
    for name in sorted(ROBOTS):
        model = ROBOTS[name]()
        checks.append(Check(f"{name}: Ddot - 2C skew-symmetry (100 states)", skew_symmetry(model), 1e-6))
        checks.append(Check(f"{name}: RK4 energy drift over 1 s at dt=1e-3 [J]", energy_drift(model), 1e-6))
    checks += [
        Check("three_link: SVD / null-space identities", svd_identities(), 1e-10),
        Check("Lyapunov equation residual", lyapunov_residual(), 1e-10),
        Check("GP: variance at training points (vartheta=0)", gp_interpolation(), 1e-8),
        Check("GP: prior reversion far from data", gp_prior_reversion(), 1e-10),
        Check("GP: NLL gradient vs finite differences (relative)", gp_nll_gradient(), 1e-5),
        Check("GP: 2-point closed-form oracle", gp_two_point(), 1e-12),
        Check("BEM: symmetric case theta3_e = -theta2", bem_symmetric(), 1e-8),
        Check("BEM: grid-scan root match (20 samples)", bem_grid_scan(), 1e-5),
    ]
    return checks
