"""Independent reference computations used by the tests (sympy, closed forms)."""

from __future__ import annotations

import functools

import numpy as np
import sympy as sp


@functools.lru_cache(maxsize=None)
def furuta_lagrangian(p_items: tuple):
    """Euler-Lagrange equations of the rotary pendulum built from its kinematics.

    Arm of length lr rotates about the vertical; a slender pendulum of length lp
    hangs off the arm tip and swings in the plane normal to the arm, upright at 0.
    Returns lambdified ``(D(q), rhs(q, qd))`` with ``D qdd = rhs + B u``.
    """
    p = dict(p_items)
    q1, q2, w1, w2 = sp.symbols("q1 q2 w1 w2")
    t = sp.symbols("t")
    th1, th2 = sp.Function("th1")(t), sp.Function("th2")(t)
    c = p["C"]
    tip = sp.Matrix([p["lr"] * sp.cos(th1), p["lr"] * sp.sin(th1), 0])
    tangent = sp.Matrix([-sp.sin(th1), sp.cos(th1), 0])
    com = tip + p["lp"] / 2 * (-sp.sin(th2) * tangent + sp.cos(th2) * sp.Matrix([0, 0, 1]))
    vel = com.diff(t)
    kin = (sp.Rational(1, 2) * p["Jr"] * th1.diff(t) ** 2 + sp.Rational(1, 2) * p["mp"] * vel.dot(vel)
           + sp.Rational(1, 2) * p["Jp"] * th2.diff(t) ** 2)
    pot = p["mp"] * p["g"] * p["lp"] / 2 * (sp.cos(th2) - 1)
    lag = c * (kin - pot)
    eqs = [sp.diff(lag.diff(qi.diff(t)), t) - lag.diff(qi) for qi in (th1, th2)]
    subs = {th1.diff(t, 2): sp.Symbol("a1"), th2.diff(t, 2): sp.Symbol("a2")}
    eqs = [e.subs(subs) for e in eqs]
    subs = {th1.diff(t): w1, th2.diff(t): w2}
    eqs = [e.subs(subs).subs({th1: q1, th2: q2}) for e in eqs]
    a = sp.symbols("a1 a2")
    d = sp.Matrix([[sp.diff(e, ai) for ai in a] for e in eqs])
    rest = sp.Matrix([-e.subs({a[0]: 0, a[1]: 0}) for e in eqs])
    arm_damp = p["dr"] + p["kg"] ** 2 * p["kt"] * p["km"] / p["Rm"]
    rest -= sp.Matrix([c * arm_damp * w1 + p["kgkt"] * w2, c * p["dp"] * w2])
    args = (q1, q2, w1, w2)
    return sp.lambdify(args, sp.simplify(d), "numpy"), sp.lambdify(args, rest, "numpy")


def furuta_accel(params: dict, q, qd, u) -> np.ndarray:
    d_fn, r_fn = furuta_lagrangian(tuple(sorted(params.items())))
    d = np.array(d_fn(*q, *qd), dtype=float)
    rhs = np.array(r_fn(*q, *qd), dtype=float).ravel() + np.array([u[0], 0.0])
    return np.linalg.solve(d, rhs)


def furuta_mass(params: dict, q) -> np.ndarray:
    d_fn, _ = furuta_lagrangian(tuple(sorted(params.items())))
    return np.array(d_fn(q[0], q[1], 0.0, 0.0), dtype=float)


def three_link_mass_symbolic(p: dict):
    """Symbolic 3-link inertia matrix, entries as tabulated for the hardware."""
    q = sp.symbols("q1:4")
    m1, m2, m3, l1, l2, l3, j1, j2, j3 = (p[k] for k in ("m1", "m2", "m3", "l1", "l2", "l3", "J1", "J2", "J3"))
    c2, s2, c3, s3, c23 = sp.cos(q[1]), sp.sin(q[1]), sp.cos(q[2]), sp.sin(q[2]), sp.cos(q[1] + q[2])
    d11 = ((m3 * (l2**2 + l3**2 / 4) + m2 * l2**2 / 4 - m3 * l3**2 * c3**2 / 2 - m3 * l2 * l3 * s3) * c2**2
           + (m3 * s3 * l3**2 / 2 - m3 * l2 * l3) * s2 * c3 * c2 + m3 * c3**2 * l3**2 / 4
           + (m1 / 4 + m2 + m3) * l1**2 + j1)
    d12 = -(m3 * l2 + m2 * l2 / 2) * l1 * s2 - m3 * l1 * l3 * c23 / 2
    d13 = m3 * l1 * l3 * c23 / 2
    d22 = j2 + (m3 + m2 / 4) * l2**2 + m3 * l3**2 / 4 - m3 * l2 * l3 * s3
    d23 = (l3 / 4 - l2 * s3 / 2) * m3 * l3
    d33 = j3 + m3 * l3**2 / 4
    return q, sp.Matrix([[d11, d12, d13], [d12, d22, d23], [d13, d23, d33]])


@functools.lru_cache(maxsize=None)
def _three_link_cached(p_items: tuple):
    q, d_mat = three_link_mass_symbolic(dict(p_items))
    return sp.lambdify(q, d_mat, "numpy"), christoffel_symbolic(q, d_mat)


def three_link_mass(p: dict, q) -> np.ndarray:
    return np.array(_three_link_cached(tuple(sorted(p.items())))[0](*q), dtype=float)


def three_link_christoffel(p: dict):
    return _three_link_cached(tuple(sorted(p.items())))[1]


def christoffel_symbolic(q, d_mat):
    """Lambdified ``C(q, qd)`` from Christoffel symbols of the first kind."""
    k = len(q)
    qd = sp.symbols(f"w1:{k + 1}")
    c = sp.zeros(k, k)
    for i in range(k):
        for j in range(k):
            c[i, j] = sum(
                sp.Rational(1, 2) * (d_mat[i, j].diff(q[l]) + d_mat[i, l].diff(q[j]) - d_mat[j, l].diff(q[i])) * qd[l]
                for l in range(k)
            )
    fn = sp.lambdify((*q, *qd), c, "numpy")
    return lambda qv, qdv: np.array(fn(*qv, *qdv), dtype=float)


def trapezoid(y, x) -> float:
    y, x = np.asarray(y, dtype=float), np.asarray(x, dtype=float)
    return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(x)))
