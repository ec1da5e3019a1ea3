"""Rigid-body plant models and nominal models for underactuated balance robots.

Every plant is written in manipulator form

    D(q) qdd + C(q, qd) qd + G(q) + F(q, qd) = B u,   B = [I_n; 0]

with the first ``n`` coordinates actuated and the last ``m`` unactuated.
``F`` collects the non-conservative terms (viscous damping, motor back-EMF).
The Coriolis matrix is never written out by hand: it is built from the
mass matrix through Christoffel symbols evaluated by central differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

Array = np.ndarray

FD_REL_STEP = 1e-6


class ModelParameterError(ValueError):
    """Invalid physical parameter passed to a plant constructor."""


class NumericalDifferentiationError(ArithmeticError):
    """Finite-difference derivative of the mass matrix was not finite."""


class SingularDynamicsError(ArithmeticError):
    """The mass matrix could not be inverted."""

    def __init__(self, message: str, condition: float):
        super().__init__(f"{message} (cond={condition:.3e})")
        self.condition = condition


def _zero_forces(q: Array, qd: Array) -> Array:
    return np.zeros_like(q)


@dataclass(frozen=True)
class RobotModel:
    """Callable description of a plant with ``n`` actuated and ``m`` unactuated DOF."""

    name: str
    n: int
    m: int
    mass_matrix: Callable[[Array], Array]
    gravity: Callable[[Array], Array]
    potential: Callable[[Array], float]
    friction: Callable[[Array, Array], Array] = _zero_forces
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not (self.n >= self.m >= 1):
            raise ModelParameterError(f"need n >= m >= 1, got n={self.n}, m={self.m}")

    @property
    def dof(self) -> int:
        return self.n + self.m

    @property
    def input_matrix(self) -> Array:
        return np.vstack([np.eye(self.n), np.zeros((self.m, self.n))])

    def bias(self, q: Array, qd: Array) -> Array:
        """H = C(q, qd) qd + G(q) + F(q, qd)."""
        q = np.asarray(q, dtype=float)
        qd = np.asarray(qd, dtype=float)
        return christoffel_coriolis(self, q, qd) @ qd + self.gravity(q) + self.friction(q, qd)


@dataclass(frozen=True)
class NominalModel:
    """Hand-chosen model ``Dbar qdd + Hbar = B u`` that the GP corrects.

    ``bound_d`` and ``bound_h`` are the declared constants of the boundedness
    condition on the nominal inertia and bias.
    """

    name: str
    n: int
    m: int
    d_bar: Callable[[Array], Array]
    h_bar: Callable[[Array, Array], Array]
    bound_d: float = math.inf
    bound_h: float = math.inf

    @property
    def dof(self) -> int:
        return self.n + self.m


@dataclass(frozen=True)
class State:
    q: Array
    qdot: Array
    n: int

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        qd = np.asarray(self.qdot, dtype=float)
        if q.shape != qd.shape or q.ndim != 1:
            raise ValueError("q and qdot must be 1-D vectors of equal length")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qd))):
            raise ValueError("state has non-finite entries")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "qdot", qd)

    @property
    def q_a(self) -> Array:
        return self.q[: self.n]

    @property
    def q_u(self) -> Array:
        return self.q[self.n :]

    @property
    def qdot_a(self) -> Array:
        return self.qdot[: self.n]

    @property
    def qdot_u(self) -> Array:
        return self.qdot[self.n :]


def _mass_fn(model) -> Callable[[Array], Array]:
    if callable(model) and not hasattr(model, "mass_matrix") and not hasattr(model, "d_bar"):
        return model
    if hasattr(model, "mass_matrix"):
        return model.mass_matrix
    return model.d_bar


def mass_matrix_derivatives(model, q: Array) -> Array:
    """``T[k] = dD/dq_k`` by central differences, shape (K, K, K)."""
    mass = _mass_fn(model)
    q = np.asarray(q, dtype=float)
    k_dim = q.size
    out = np.empty((k_dim, k_dim, k_dim))
    for k in range(k_dim):
        h = FD_REL_STEP * max(1.0, abs(q[k]))
        qp = q.copy()
        qm = q.copy()
        qp[k] += h
        qm[k] -= h
        out[k] = (mass(qp) - mass(qm)) / (2.0 * h)
    if not np.isfinite(out).all():
        raise NumericalDifferentiationError("mass-matrix derivative is not finite")
    return out


def christoffel_coriolis(model, q: Array, qdot: Array) -> Array:
    """Coriolis matrix from Christoffel symbols of the first kind.

    ``C_ij = sum_k c_ijk qd_k`` with ``c_ijk = (d_k D_ij + d_j D_ik - d_i D_jk) / 2``.
    ``model`` can be a RobotModel, a NominalModel or a bare mass-matrix callable.
    """
    qdot = np.asarray(qdot, dtype=float)
    t = mass_matrix_derivatives(model, q)
    # t[k] is symmetric, so the last two Christoffel terms are one contraction and its transpose
    contracted = t @ qdot
    k_dim = qdot.size
    return 0.5 * ((qdot @ t.reshape(k_dim, -1)).reshape(k_dim, k_dim) + contracted.T - contracted)


def forward_dynamics(model: RobotModel, s: State, u: Array) -> Array:
    """qdd = D^-1 (B u - C qd - G - F)."""
    return accel(model, s.q, s.qdot, u)


def accel(model: RobotModel, q: Array, qd: Array, u: Array) -> Array:
    """Unvalidated ``forward_dynamics`` on raw arrays, for integrator inner loops."""
    u = np.asarray(u, dtype=float).reshape(model.n)
    d = model.mass_matrix(q)
    rhs = -model.bias(q, qd)
    rhs[: model.n] += u
    try:
        qdd = np.linalg.solve(d, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularDynamicsError("mass matrix solve failed", float(np.linalg.cond(d))) from exc
    if not np.isfinite(qdd).all():
        raise SingularDynamicsError("non-finite acceleration", float(np.linalg.cond(d)))
    return qdd


def total_energy(model: RobotModel, s: State) -> float:
    """Kinetic plus potential energy; potential is zero at q = 0."""
    qd = s.qdot
    return float(0.5 * qd @ model.mass_matrix(s.q) @ qd + model.potential(s.q))


def _require_positive(params: Mapping[str, float], keys) -> None:
    for key in keys:
        value = params[key]
        if not (value > 0 and math.isfinite(value)):
            raise ModelParameterError(f"parameter {key!r} must be positive, got {value!r}")


# Quanser SRV02 servo with the rotary-pendulum module (published manual values).
FURUTA_DEFAULTS: dict[str, float] = {
    "mp": 0.127,  # pendulum mass, kg
    "lp": 0.337,  # pendulum length, m
    "lr": 0.216,  # arm length, m
    "Jr": 9.98e-4,  # arm inertia, kg m^2
    "Jp": 0.0012,  # pendulum inertia about its centre, kg m^2
    "dr": 0.0024,  # arm viscous damping, N m s/rad
    "dp": 0.0024,  # pendulum viscous damping, N m s/rad
    "kg": 70.0,  # gear ratio
    "kt": 0.00768,  # motor torque constant, N m/A
    "km": 0.00768,  # back-EMF constant, V s/rad
    "Rm": 2.6,  # armature resistance, ohm
    "g": 9.81,
    "C": 1.0,  # overall model constant
    "kgkt": 0.0,  # coefficient of the pendulum-rate term in the arm row
}

THREE_LINK_DEFAULTS: dict[str, float] = {
    "m1": 0.7,
    "m2": 1.3,
    "m3": 0.3,
    "l1": 0.065,
    "l2": 0.23,
    "l3": 0.25,
    "J1": 0.0008,
    "J2": 0.005,
    "J3": 0.003,
    "g": 9.81,
}


def _merge(defaults: Mapping[str, float], params: Mapping[str, float] | None) -> dict[str, float]:
    merged = dict(defaults)
    if params:
        unknown = set(params) - set(defaults)
        if unknown:
            raise ModelParameterError(f"unknown parameters: {sorted(unknown)}")
        merged.update({k: float(v) for k, v in params.items()})
    return merged


def furuta_model(params: Mapping[str, float] | None = None) -> RobotModel:
    """Rotary (Furuta) pendulum: arm angle actuated, pendulum angle unactuated.

    The pendulum angle is zero when upright. The input is the motor command
    scaled by the constant ``C``.
    """
    p = _merge(FURUTA_DEFAULTS, params)
    _require_positive(p, ["mp", "lp", "lr", "Jr", "Jp", "kg", "kt", "km", "Rm", "g", "C"])
    if p["dr"] < 0 or p["dp"] < 0:
        raise ModelParameterError("damping coefficients must be nonnegative")
    c_ = p["C"]
    mp, lp, lr = p["mp"], p["lp"], p["lr"]
    a0 = mp * lr**2 + p["Jr"]
    a1 = 0.25 * mp * lp**2
    b = 0.5 * mp * lp * lr
    duu = c_ * (p["Jp"] + 0.25 * mp * lp**2)
    grav = 0.5 * mp * lp * p["g"]
    arm_damp = p["dr"] + p["kg"] ** 2 * p["kt"] * p["km"] / p["Rm"]

    def mass_matrix(q):
        s2 = math.sin(q[1])
        dau = -c_ * b * math.cos(q[1])
        return np.array([[c_ * (a0 + a1 * s2 * s2), dau], [dau, duu]])

    def gravity(q):
        return np.array([0.0, -c_ * grav * math.sin(q[1])])

    def potential(q):
        return c_ * grav * (math.cos(q[1]) - 1.0)

    def friction(q, qd):
        return np.array([c_ * arm_damp * qd[0] + p["kgkt"] * qd[1], c_ * p["dp"] * qd[1]])

    return RobotModel("furuta", 1, 1, mass_matrix, gravity, potential, friction, p)


def three_link_model(params: Mapping[str, float] | None = None) -> RobotModel:
    """3-link inverted pendulum: joints 1-2 actuated, joint 3 unactuated, frictionless.

    Upright pendulum corresponds to ``q2 + q3 = 0``. The link-3 term of the
    joint-2 gravity torque is the gradient of the same potential as the joint-3
    torque, so the model conserves energy when unforced.
    """
    p = _merge(THREE_LINK_DEFAULTS, params)
    _require_positive(p, list(THREE_LINK_DEFAULTS))
    m1, m2, m3 = p["m1"], p["m2"], p["m3"]
    l1, l2, l3 = p["l1"], p["l2"], p["l3"]
    j1, j2, j3 = p["J1"], p["J2"], p["J3"]
    g = p["g"]

    def mass_matrix(q):
        c2, s2 = math.cos(q[1]), math.sin(q[1])
        c3, s3 = math.cos(q[2]), math.sin(q[2])
        c23 = math.cos(q[1] + q[2])
        d11 = (
            (m3 * (l2**2 + 0.25 * l3**2) + 0.25 * m2 * l2**2 - 0.5 * m3 * l3**2 * c3**2 - m3 * l2 * l3 * s3) * c2**2
            + (0.5 * m3 * s3 * l3**2 - m3 * l2 * l3) * s2 * c3 * c2
            + 0.25 * m3 * c3**2 * l3**2
            + (0.25 * m1 + m2 + m3) * l1**2
            + j1
        )
        d12 = -(m3 * l2 + 0.5 * m2 * l2) * l1 * s2 - 0.5 * m3 * l1 * l3 * c23
        d13 = 0.5 * m3 * l1 * l3 * c23
        d22 = j2 + (m3 + 0.25 * m2) * l2**2 + 0.25 * m3 * l3**2 - m3 * l2 * l3 * s3
        d23 = (0.25 * l3 - 0.5 * l2 * s3) * m3 * l3
        d33 = j3 + 0.25 * m3 * l3**2
        return np.array([[d11, d12, d13], [d12, d22, d23], [d13, d23, d33]])

    def gravity(q):
        s23 = math.sin(q[1] + q[2])
        g2 = -(0.5 * m2 + m3) * math.cos(q[1]) * l2 * g - 0.5 * m3 * l3 * s23 * g
        g3 = -0.5 * m3 * l3 * s23 * g
        return np.array([0.0, g2, g3])

    def potential(q):
        return -(0.5 * m2 + m3) * l2 * g * math.sin(q[1]) + 0.5 * m3 * l3 * g * (math.cos(q[1] + q[2]) - 1.0)

    return RobotModel("three_link", 2, 1, mass_matrix, gravity, potential, _zero_forces, p)


ROBOTS: dict[str, Callable[..., RobotModel]] = {
    "furuta": furuta_model,
    "three_link": three_link_model,
}


# --- nominal models ---------------------------------------------------------


def furuta_nominal_varying() -> NominalModel:
    """Configuration-dependent Furuta nominal model."""

    def d_bar(q):
        c2 = math.cos(q[1])
        return np.array([[0.05, -0.02 * c2], [-0.02 * c2, 0.02]])

    def h_bar(q, qd):
        return np.array([0.0, -math.sin(q[1])])

    return NominalModel("furuta_varying", 1, 1, d_bar, h_bar, bound_d=0.06, bound_h=1.0)


def furuta_nominal_constant() -> NominalModel:
    """Constant-inertia Furuta nominal model with zero bias."""
    d = np.array([[0.02, 0.01], [0.01, 0.02]])

    def d_bar(q):
        return d.copy()

    def h_bar(q, qd):
        return np.zeros(2)

    return NominalModel("furuta_constant", 1, 1, d_bar, h_bar, bound_d=0.03, bound_h=0.0)


def three_link_nominal() -> NominalModel:
    """Trigonometric nominal model for the 3-link pendulum."""

    def d_bar(q):
        c2, c3 = math.cos(q[1]), math.cos(q[2])
        c2m3 = math.cos(q[1] - q[2])
        return np.array(
            [
                [0.15, 0.025 * c2, 0.025 * c3],
                [0.025 * c2, 0.15, 0.05 * c2m3],
                [0.025 * c3, 0.05 * c2m3, 0.1],
            ]
        )

    def h_bar(q, qd):
        return np.array([0.0, 0.2 * math.cos(q[1]), 0.1 * math.sin(q[2])])

    return NominalModel("three_link", 2, 1, d_bar, h_bar, bound_d=0.25, bound_h=math.hypot(0.2, 0.1))


def nominal_from_robot(model: RobotModel) -> NominalModel:
    """Use the true plant as its own nominal model (zero residual)."""
    return NominalModel(f"{model.name}_exact", model.n, model.m, model.mass_matrix, model.bias)


NOMINALS: dict[str, Callable[[], NominalModel]] = {
    "furuta_varying": furuta_nominal_varying,
    "furuta_constant": furuta_nominal_constant,
    "three_link": three_link_nominal,
}


def check_nominal_conditions(nominal: NominalModel, configs: Array, rank_tol: float = 1e-8) -> dict:
    """Evaluate the boundedness, rank and varying-kernel conditions on a grid.

    Returns a dict of booleans ``c1``, ``c2``, ``c3`` plus the extreme values
    observed. ``c3`` is vacuous (True) when ``n == m``.
    """
    n, m = nominal.n, nominal.m
    c1 = c2 = True
    max_norm = 0.0
    min_eig = math.inf
    kernels = []
    for q in np.atleast_2d(configs):
        d = nominal.d_bar(q)
        if not np.allclose(d, d.T, atol=1e-14):
            c1 = False
        eig = np.linalg.eigvalsh(0.5 * (d + d.T))
        min_eig = min(min_eig, float(eig[0]))
        max_norm = max(max_norm, float(np.linalg.norm(d, 2)))
        if eig[0] <= 0 or max_norm > nominal.bound_d:
            c1 = False
        if np.linalg.norm(nominal.h_bar(q, np.zeros_like(q))) > nominal.bound_h + 1e-12:
            c1 = False
        daa, duu, dua = d[:n, :n], d[n:, n:], d[n:, :n]
        if (
            np.linalg.matrix_rank(daa, tol=rank_tol) != n
            or np.linalg.matrix_rank(duu, tol=rank_tol) != m
            or np.linalg.matrix_rank(dua, tol=rank_tol) != m
        ):
            c2 = False
        if n > m:
            _, _, vt = np.linalg.svd(dua)
            kernels.append(vt[m:].T)
    kernel_variation = 0.0
    if kernels:
        ref = kernels[0]
        for vn in kernels[1:]:
            # distance between subspaces via projectors, sign-free
            kernel_variation = max(kernel_variation, float(np.linalg.norm(vn @ vn.T - ref @ ref.T)))
    c3 = True if n == m else kernel_variation > 1e-6
    return {
        "c1": c1,
        "c2": c2,
        "c3": c3,
        "max_norm": max_norm,
        "min_eig": min_eig,
        "kernel_variation": kernel_variation,
    }
