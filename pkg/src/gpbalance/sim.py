"""Fixed-step episode simulation, excitation data collection and logs."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy.linalg import solve_continuous_are, solve_discrete_are
from scipy.optimize import fsolve
from scipy.signal import cont2discrete

from .control import BalanceController, ControlFrame, GpDynamics, SumOfSines
from .dynamics import NominalModel, RobotModel, SingularDynamicsError, State, accel, forward_dynamics
from .gp import residual_target

log = logging.getLogger(__name__)

Array = np.ndarray


class DivergenceError(RuntimeError):
    pass


class ScenarioError(ValueError):
    pass


class Plant(Protocol):
    n: int
    m: int

    def accel(self, q: Array, qd: Array, u: Array) -> Array: ...


class TruePlant:
    """Rigid-body plant integrated as the physical system."""

    def __init__(self, model: RobotModel):
        self.model = model
        self.n, self.m = model.n, model.m

    def accel(self, q: Array, qd: Array, u: Array) -> Array:
        return accel(self.model, q, qd, u)


class GpModelPlant:
    """The controller's own GP-corrected model used as the plant (nominal closed loop)."""

    def __init__(self, dyn: GpDynamics):
        self.dyn = dyn
        self.n, self.m = dyn.n, dyn.m
        self._guess: Array | None = None

    def accel(self, q: Array, qd: Array, u: Array) -> Array:
        qdd = self.dyn.accel(q, qd, u, self._guess)
        self._guess = qdd
        return qdd


def rk4_step(plant: Plant, q: Array, qd: Array, u: Array, dt: float) -> tuple[Array, Array]:
    """Classical RK4 on (q, qd) with ``u`` held constant over the step."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    f = plant.accel
    k1q, k1v = qd, f(q, qd, u)
    k2q, k2v = qd + 0.5 * dt * k1v, f(q + 0.5 * dt * k1q, qd + 0.5 * dt * k1v, u)
    k3q, k3v = qd + 0.5 * dt * k2v, f(q + 0.5 * dt * k2q, qd + 0.5 * dt * k2v, u)
    k4q, k4v = qd + dt * k3v, f(q + dt * k3q, qd + dt * k3v, u)
    q_new = q + dt / 6.0 * (k1q + 2 * k2q + 2 * k3q + k4q)
    qd_new = qd + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    if not (np.isfinite(q_new).all() and np.isfinite(qd_new).all()):
        raise DivergenceError("non-finite state after RK4 step")
    return q_new, qd_new


@dataclass(frozen=True)
class Disturbance:
    """Instantaneous jump of ``q[index]`` (``kind='q'``) or ``qd[index]`` at time ``t``."""

    t: float
    index: int
    jump: float
    kind: str = "q"


@dataclass
class Scenario:
    plant: Plant
    controller: Callable[[float, Array, Array, Array | None], object]
    t_end: float
    control_rate: float
    q0: Array
    qd0: Array | None = None
    integration_substeps: int = 4
    disturbances: Sequence[Disturbance] = ()
    seed: int = 0
    sensor_noise_std: Array | float = 0.0
    error_limit: float = 1.5
    fall_limit: float = 1.2
    lyapunov_p: Array | None = None

    def __post_init__(self):
        if not self.control_rate > 0:
            raise ScenarioError("control_rate must be positive")
        if self.integration_substeps < 1:
            raise ScenarioError("integration_substeps must be >= 1")
        if not self.t_end > 0:
            raise ScenarioError("t_end must be positive")
        for d in self.disturbances:
            if not 0 <= d.t <= self.t_end:
                raise ScenarioError(f"disturbance at t={d.t} outside [0, {self.t_end}]")
            if d.kind not in ("q", "qd"):
                raise ScenarioError("disturbance kind must be 'q' or 'qd'")
        self.q0 = np.asarray(self.q0, dtype=float)
        self.qd0 = np.zeros_like(self.q0) if self.qd0 is None else np.asarray(self.qd0, dtype=float)

    @property
    def dt(self) -> float:
        return 1.0 / self.control_rate


# --- episode log ------------------------------------------------------------------


def log_columns(n: int, m: int) -> list[str]:
    k = n + m
    cols = ["t"]
    cols += [f"q{i + 1}" for i in range(k)] + [f"qd{i + 1}" for i in range(k)] + [f"qdd{i + 1}" for i in range(k)]
    cols += [f"u{i + 1}" for i in range(n)]
    cols += [f"qa_ref{i + 1}" for i in range(n)] + [f"qad_ref{i + 1}" for i in range(n)]
    cols += [f"que{i + 1}" for i in range(m)] + [f"qued{i + 1}" for i in range(m)]
    cols += [f"ea{i + 1}" for i in range(n)] + [f"eu{i + 1}" for i in range(m)]
    cols += [f"ead{i + 1}" for i in range(n)] + [f"eud{i + 1}" for i in range(m)]
    cols += [f"sa{i + 1}" for i in range(n)] + [f"su{i + 1}" for i in range(m)]
    cols += [f"va{i + 1}" for i in range(n)] + [f"vu{i + 1}" for i in range(m)]
    cols += [f"pa{i + 1}" for i in range(n)] + [f"pa_ref{i + 1}" for i in range(n)]
    cols += ["ns_cmd", "bem_res", "bem_ok", "V"]
    return cols


@dataclass
class EpisodeLog:
    n: int
    m: int
    data: Array  # rows x columns, see log_columns
    diverged: bool = False
    reason: str = ""
    frames: list = field(default_factory=list, repr=False)

    @property
    def columns(self) -> list[str]:
        return log_columns(self.n, self.m)

    def col(self, name: str) -> Array:
        return self.data[:, self.columns.index(name)]

    def block(self, prefix: str, count: int) -> Array:
        idx = [self.columns.index(f"{prefix}{i + 1}") for i in range(count)]
        return self.data[:, idx]

    @property
    def t(self) -> Array:
        return self.col("t")

    @property
    def k(self) -> int:
        return self.n + self.m

    @property
    def q(self) -> Array:
        return self.block("q", self.k)

    @property
    def qd(self) -> Array:
        return self.block("qd", self.k)

    @property
    def qdd(self) -> Array:
        return self.block("qdd", self.k)

    @property
    def u(self) -> Array:
        return self.block("u", self.n)

    @property
    def e_a(self) -> Array:
        return self.block("ea", self.n)

    @property
    def e_u(self) -> Array:
        return self.block("eu", self.m)

    @property
    def error_vector(self) -> Array:
        """Rows of ``e = [e_a; e_u; ed_a; ed_u]``."""
        return np.hstack([self.e_a, self.e_u, self.block("ead", self.n), self.block("eud", self.m)])

    def __len__(self) -> int:
        return self.data.shape[0]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["# n", self.n, "m", self.m, "diverged", int(self.diverged), "reason", self.reason])
            w.writerow(self.columns)
            for row in self.data:
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path: str | Path) -> "EpisodeLog":
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            meta = next(r)
            header = next(r)
            rows = [[float(v) for v in row] for row in r]
        n, m = int(meta[1]), int(meta[3])
        if header != log_columns(n, m):
            raise ValueError(f"{path}: unexpected episode log header")
        data = np.array(rows, dtype=float).reshape(-1, len(header))
        return cls(n, m, data, bool(int(meta[5])), meta[7] if len(meta) > 7 else "")


def _frame_row(t, q, qd, qdd, frame: ControlFrame, p_lyap: Array | None) -> list[float]:
    n = len(frame.u)
    dec = frame.dec
    p_a = dec.v.T @ q[:n]
    p_ref = dec.v.T @ frame.q_a_ref
    e = np.concatenate([frame.e_a, frame.e_u, frame.ed_a, frame.ed_u])
    v_val = float(e @ p_lyap @ e) if p_lyap is not None else math.nan
    return [
        t, *q, *qd, *qdd, *frame.u, *frame.q_a_ref, *frame.qd_a_ref,
        *frame.bem.q_u_e, *frame.bem.q_u_e_dot, *frame.e_a, *frame.e_u, *frame.ed_a, *frame.ed_u,
        *frame.sigma_a, *frame.sigma_u, *frame.v_int, *frame.v_u_int, *p_a, *p_ref,
        frame.nullspace_command, frame.bem.residual_norm, float(frame.bem.converged), v_val,
    ]


def run_episode(sc: Scenario, keep_frames: bool = False) -> EpisodeLog:
    """Run control ticks with ZOH torque over RK4 substeps; stop early on divergence."""
    plant = sc.plant
    n, m = plant.n, plant.m
    rng = np.random.default_rng(sc.seed)
    noise = np.broadcast_to(np.asarray(sc.sensor_noise_std, dtype=float), (2 * (n + m),))
    dt = sc.dt
    h = dt / sc.integration_substeps
    n_ticks = int(round(sc.t_end * sc.control_rate)) + 1
    q, qd = sc.q0.copy(), sc.qd0.copy()
    pending = sorted(sc.disturbances, key=lambda d: d.t)
    rows, frames = [], []
    diverged, reason = False, ""
    qdd_meas = None
    for k in range(n_ticks):
        t = k * dt
        while pending and pending[0].t <= t + 0.5 * dt:
            d = pending.pop(0)
            (q if d.kind == "q" else qd)[d.index] += d.jump
        if np.any(noise > 0):
            z = rng.normal(0.0, 1.0, 2 * (n + m)) * noise
            q_meas, qd_meas = q + z[: n + m], qd + z[n + m :]
        else:
            q_meas, qd_meas = q, qd
        try:
            frame = sc.controller(t, q_meas, qd_meas, qdd_meas)
            u = frame.u
            qdd = plant.accel(q, qd, u)
        except (SingularDynamicsError, FloatingPointError, np.linalg.LinAlgError) as exc:
            diverged, reason = True, f"t={t:.4f}: {exc}"
            break
        qdd_meas = qdd
        rows.append(_frame_row(t, q, qd, qdd, frame, sc.lyapunov_p))
        if keep_frames:
            frames.append(frame)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qd))):
            diverged, reason = True, f"t={t:.4f}: non-finite state"
            break
        if np.max(np.abs(frame.e_a)) > sc.error_limit:
            diverged, reason = True, f"t={t:.4f}: actuated error above {sc.error_limit} rad"
            break
        if np.max(np.abs(frame.e_u)) > sc.fall_limit:
            diverged, reason = True, f"t={t:.4f}: balance error above {sc.fall_limit} rad"
            break
        if k == n_ticks - 1:
            break
        try:
            for _ in range(sc.integration_substeps):
                q, qd = rk4_step(plant, q, qd, u, h)
        except (DivergenceError, SingularDynamicsError) as exc:
            diverged, reason = True, f"t={t:.4f}: {exc}"
            break
    if diverged:
        log.warning("episode diverged: %s", reason)
    data = np.array(rows, dtype=float).reshape(-1, len(log_columns(n, m)))
    return EpisodeLog(n, m, data, diverged, reason, frames)


# --- excitation and data collection -------------------------------------------------


def linearize(model: RobotModel, q0: Array, u0: Array, eps: float = 1e-6) -> tuple[Array, Array]:
    """Finite-difference linearization of ``x = [q; qd]`` dynamics about rest at ``q0``."""
    k = model.dof
    x0 = np.concatenate([q0, np.zeros(k)])

    def f(x, u):
        return np.concatenate([x[k:], forward_dynamics(model, State(x[:k], x[k:], model.n), u)])

    a = np.empty((2 * k, 2 * k))
    for j in range(2 * k):
        e = np.zeros(2 * k)
        e[j] = eps
        a[:, j] = (f(x0 + e, u0) - f(x0 - e, u0)) / (2 * eps)
    b = np.empty((2 * k, model.n))
    for j in range(model.n):
        e = np.zeros(model.n)
        e[j] = eps
        b[:, j] = (f(x0, u0 + e) - f(x0, u0 - e)) / (2 * eps)
    return a, b


@dataclass
class ExcitationController:
    """Sum-of-sines target tracked by LQR state feedback on the true plant.

    Used only to generate training data: the feedback is computed from the
    exact plant linearization so the robot stays near the operating point
    while the targets and a sinusoidal feedforward excite the dynamics.
    With ``gravity`` set, the unactuated reference follows the static balance
    configuration ``G_u(q_a^ref, q_u) = 0`` of the current actuated target and
    the holding torque follows ``G_a`` there.
    """

    gain: Array
    q_op: Array
    u_op: Array
    targets: SumOfSines
    feedforward: SumOfSines | None = None
    gravity: Callable[[Array], Array] | None = None
    ramp: float = 0.0
    _qu_guess: Array | None = field(default=None, repr=False)

    @classmethod
    def lqr(cls, model: RobotModel, targets: SumOfSines, feedforward: SumOfSines | None = None,
            q_op: Array | None = None, q_weight: float | Sequence[float] = 1.0, r_weight: float = 1.0,
            dt: float | None = None, track_balance: bool = True, ramp: float = 0.0):
        """Continuous LQR, or discrete LQR on the zero-order-hold model when ``dt`` is given."""
        k = model.dof
        q_op = np.zeros(k) if q_op is None else np.asarray(q_op, dtype=float)
        # holding torque cancels static gravity at the operating point
        u_op = model.gravity(q_op)[: model.n]
        a, b = linearize(model, q_op, u_op)
        qw = np.diag(np.broadcast_to(np.asarray(q_weight, dtype=float), (2 * k,)))
        r = r_weight * np.eye(model.n)
        if dt is None:
            p = solve_continuous_are(a, b, qw, r)
            gain = (b.T @ p) / r_weight
        else:
            ad, bd, *_ = cont2discrete((a, b, np.eye(2 * k), np.zeros((2 * k, model.n))), dt)
            p = solve_discrete_are(ad, bd, qw * dt, r * dt)
            gain = np.linalg.solve(r * dt + bd.T @ p @ bd, bd.T @ p @ ad)
        return cls(gain, q_op, u_op, targets, feedforward, model.gravity if track_balance else None, ramp)

    def _reference_config(self, q_a: Array, qd_a: Array) -> tuple[Array, Array, Array]:
        n = len(self.u_op)
        if self.gravity is None:
            q = self.q_op.copy()
            q[:n] = q_a
            return q, np.concatenate([qd_a, np.zeros(len(q) - n)]), self.u_op
        guess = self.q_op[n:] if self._qu_guess is None else self._qu_guess

        def g_u(q_u):
            return self.gravity(np.concatenate([q_a, q_u]))[n:]

        q_u, _, ok, _ = fsolve(g_u, guess, full_output=True, xtol=1e-12)
        if ok != 1:
            q_u = guess
        self._qu_guess = q_u
        q = np.concatenate([q_a, q_u])
        # implicit-function velocity of the balance configuration
        jac = np.empty((len(q) - n, len(q)))
        for j in range(len(q)):
            h = 1e-6
            dq = np.zeros(len(q))
            dq[j] = h
            jac[:, j] = (self.gravity(q + dq)[n:] - self.gravity(q - dq)[n:]) / (2 * h)
        try:
            qd_u = -np.linalg.solve(jac[:, n:], jac[:, :n] @ qd_a)
        except np.linalg.LinAlgError:
            qd_u = np.zeros(len(q) - n)
        return q, np.concatenate([qd_a, qd_u]), self.gravity(q)[:n]

    def __call__(self, t: float, q: Array, qd: Array, qdd_meas=None) -> "ExcitationFrame":
        n = len(self.u_op)
        pos, vel, _ = self.targets(t)
        if t < self.ramp:
            # smoothstep envelope so the targets start from rest
            r = t / self.ramp
            env, denv = r * r * (3 - 2 * r), 6 * r * (1 - r) / self.ramp
            pos, vel = env * pos, env * vel + denv * pos
        q_ref, qd_ref, u_hold = self._reference_config(self.q_op[:n] + pos, vel)
        x_ref = np.concatenate([q_ref, qd_ref])
        u = u_hold - self.gain @ (np.concatenate([q, qd]) - x_ref)
        if self.feedforward is not None:
            u = u + min(1.0, t / self.ramp if self.ramp > 0 else 1.0) * self.feedforward(t)[0]
        return ExcitationFrame(u)


@dataclass
class ExcitationFrame:
    u: Array


@dataclass
class Dataset:
    t: Array
    q: Array
    qd: Array
    qdd: Array
    u: Array
    he: Array

    @property
    def n(self) -> int:
        return self.u.shape[1]

    @property
    def k(self) -> int:
        return self.q.shape[1]

    @property
    def inputs(self) -> Array:
        return np.hstack([self.q, self.qd, self.qdd])

    def __len__(self) -> int:
        return len(self.t)

    def header(self) -> list[str]:
        k, n = self.k, self.n
        return (["t"] + [f"q{i + 1}" for i in range(k)] + [f"qd{i + 1}" for i in range(k)]
                + [f"qdd{i + 1}" for i in range(k)] + [f"u{i + 1}" for i in range(n)]
                + [f"he{i + 1}" for i in range(k)])

    def to_csv(self, path: str | Path) -> None:
        data = np.hstack([self.t[:, None], self.q, self.qd, self.qdd, self.u, self.he])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for row in data:
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path: str | Path) -> "Dataset":
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            data = np.array([[float(v) for v in row] for row in r], dtype=float)
        k = sum(1 for h in header if h.startswith("qdd"))
        n = sum(1 for h in header if h.startswith("u"))
        data = data.reshape(-1, len(header))
        cut = np.cumsum([1, k, k, k, n, k])
        parts = np.split(data, cut[:-1], axis=1)
        if len(header) == cut[-2]:
            raise ValueError(f"{path}: residual columns he1..he{k} missing")
        return cls(parts[0][:, 0], parts[1], parts[2], parts[3], parts[4], parts[5])

    def with_targets(self, nominal: NominalModel) -> "Dataset":
        he = np.array([residual_target(nominal, *row) for row in zip(self.q, self.qd, self.qdd, self.u)])
        return Dataset(self.t, self.q, self.qd, self.qdd, self.u, he)


def collect_training_data(
    model: RobotModel,
    nominal: NominalModel,
    excitation: ExcitationController,
    t_end: float,
    rate: float,
    n_points: int | None,
    seed: int = 0,
    q0: Array | None = None,
    substeps: int = 4,
) -> Dataset:
    """Excite the true plant, record (q, qd, qdd, u, He) per tick, subsample N rows."""
    plant = TruePlant(model)
    k = model.dof
    q = np.zeros(k) if q0 is None else np.asarray(q0, dtype=float).copy()
    qd = np.zeros(k)
    dt = 1.0 / rate
    rows = []
    n_ticks = int(round(t_end * rate))
    for i in range(n_ticks):
        t = i * dt
        u = np.asarray(excitation(t, q, qd).u, dtype=float)
        try:
            qdd = plant.accel(q, qd, u)
            rows.append((t, q.copy(), qd.copy(), qdd, u))
            for _ in range(substeps):
                q, qd = rk4_step(plant, q, qd, u, dt / substeps)
        except (DivergenceError, SingularDynamicsError) as exc:
            log.warning("excitation diverged at t=%.3f (%s); keeping %d rows", t, exc, len(rows))
            break
    if not rows:
        raise DivergenceError("excitation produced no samples")
    t_arr = np.array([r[0] for r in rows])
    ds = Dataset(
        t_arr,
        np.array([r[1] for r in rows]),
        np.array([r[2] for r in rows]),
        np.array([r[3] for r in rows]),
        np.array([r[4] for r in rows]).reshape(len(rows), model.n),
        np.zeros((len(rows), k)),
    ).with_targets(nominal)
    if n_points is not None and n_points < len(ds):
        idx = np.sort(np.random.default_rng(seed).choice(len(ds), size=n_points, replace=False))
        ds = Dataset(ds.t[idx], ds.q[idx], ds.qd[idx], ds.qdd[idx], ds.u[idx], ds.he[idx])
    return ds
