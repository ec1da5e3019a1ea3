"""EIC-family balance controllers driven by a GP-corrected nominal model.

All three controllers share one cascade:

1. an actuated tracking command ``v_ext`` with variance-adapted PD gains,
2. the balance equilibrium manifold (BEM) ``q_u^e`` solved from the GP model,
3. an internal balance command ``v_u_int`` toward the BEM,
4. designed actuated accelerations that make the unactuated GP dynamics
   follow ``v_u_int``; the torque is read off the actuated GP dynamics.

The controllers differ only in how step 4 distributes the actuated
acceleration: EIC uses the pseudo-inverse of ``Dbar_ua``, PEIC reserves ``m``
actuated joints for balance, NEIC adds a command in ``ker(Dbar_ua)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import NominalModel
from .gp import GpModel

Array = np.ndarray

CONTROLLER_KINDS = ("eic", "peic", "neic")


class RankDeficiencyError(np.linalg.LinAlgError):
    pass


class PartitionError(ValueError):
    pass


class ControllerConfigError(ValueError):
    pass


def newton(fun, jac, x0: Array, tol: float, max_iter: int = 50) -> Array:
    """Damped Newton: halve each step until |f| decreases.

    The monotone decrease of |f| stops the overshoots plain Newton makes where
    the Jacobian is nearly singular (the GP model has such regions). A step that
    cannot reduce |f| at all means the GP mean's round-off floor is reached,
    which ends the iteration.
    """
    x = np.asarray(x0, dtype=float)
    f = fun(x)
    r = float(np.linalg.norm(f))
    for _ in range(max_iter):
        if r <= tol:
            break
        step = np.linalg.solve(jac(x), f)
        lam = 1.0
        for _ in range(30):
            cand = x - lam * step
            f_c = fun(cand)
            r_c = float(np.linalg.norm(f_c))
            if r_c < (1.0 - 1e-4 * lam) * r:
                break
            lam *= 0.5
        else:
            break
        x, f, r = cand, f_c, r_c
    return x


# --- GP-corrected model -------------------------------------------------------


class GpDynamics:
    """``Dbar qdd + Hbar + mu(q, qd, qdd) = B u``; without a GP, ``mu = 0``."""

    def __init__(self, nominal: NominalModel, gp: GpModel | None = None):
        if gp is not None and (gp.n, gp.m) != (nominal.n, nominal.m):
            raise ControllerConfigError("GP and nominal model partition sizes differ")
        self.nominal = nominal
        self.gp = gp
        self.n, self.m = nominal.n, nominal.m
        k = self.n + self.m
        self._a = list(range(self.n))
        self._u = list(range(self.n, k))

    def d_bar(self, q: Array) -> Array:
        return self.nominal.d_bar(q)

    def h_gp(self, q: Array, qd: Array, qdd: Array, part: str | None = None) -> Array:
        h = self.nominal.h_bar(q, qd)
        sel = {"a": slice(0, self.n), "u": slice(self.n, None), None: slice(None)}[part]
        h = h[sel]
        if self.gp is None:
            return h
        idx = {"a": self._a, "u": self._u, None: None}[part]
        return h + self.gp.mean(np.concatenate([q, qd, qdd]), idx)

    def h_gp_qdd_jac(self, q: Array, qd: Array, qdd: Array, part: str | None = None) -> Array:
        """d h_gp / d qdd (the nominal part does not depend on qdd)."""
        idx = {"a": self._a, "u": self._u, None: list(range(self.n + self.m))}[part]
        k = self.n + self.m
        if self.gp is None:
            return np.zeros((len(idx), k))
        return self.gp.mean_grad(np.concatenate([q, qd, qdd]), idx)[:, 2 * k :]

    def variance(self, q: Array, qd: Array, qdd: Array) -> Array:
        if self.gp is None:
            return np.zeros(self.n + self.m)
        return self.gp.variance(np.concatenate([q, qd, qdd]))

    def sigma_max_sq(self) -> Array:
        if self.gp is None:
            return np.zeros(self.n + self.m)
        return self.gp.sigma_max_sq()

    def accel(self, q: Array, qd: Array, u: Array, guess: Array | None = None, tol: float = 1e-13) -> Array:
        """Solve the GP model for the realized acceleration under torque ``u``."""
        d = self.d_bar(q)
        bu = np.zeros(self.n + self.m)
        bu[: self.n] = u
        qdd = np.zeros(self.n + self.m) if guess is None else np.array(guess, dtype=float)
        if self.gp is None:
            return np.linalg.solve(d, bu - self.nominal.h_bar(q, qd))
        return newton(lambda x: d @ x + self.h_gp(q, qd, x) - bu,
                      lambda x: d + self.h_gp_qdd_jac(q, qd, x), qdd, tol * (1.0 + np.linalg.norm(bu)))


# --- gains and references -------------------------------------------------------


def _diag_vec(v, size: int, name: str) -> Array:
    arr = np.asarray(v, dtype=float)
    arr = np.full(size, float(arr)) if arr.ndim == 0 else arr.ravel()
    if arr.shape != (size,):
        raise ControllerConfigError(f"{name} must have {size} diagonal entries")
    if not np.all(arr > 0):
        raise ControllerConfigError(f"base gain {name} must be positive")
    return arr


@dataclass(frozen=True)
class AdaptedGains:
    kp1: Array
    kd1: Array
    kp2: Array
    kd2: Array


@dataclass(frozen=True)
class GainSchedule:
    """Diagonal PD gains ``k + k_n * Sigma``, clamped per channel.

    ``upper`` optionally fixes the clamp ceilings as a mapping from gain name
    to diagonal; otherwise the ceiling is ``base + k_n * sigma_max^2``.
    """

    kp1: Array
    kd1: Array
    kp2: Array
    kd2: Array
    kn1: float = 0.0
    kn2: float = 0.0
    kn3: float = 0.0
    kn4: float = 0.0
    upper: dict | None = None

    @classmethod
    def build(cls, n: int, m: int, kp1, kd1, kp2, kd2, kn1=0.0, kn2=0.0, kn3=0.0, kn4=0.0, upper=None):
        for k in (kn1, kn2, kn3, kn4):
            if k < 0:
                raise ControllerConfigError("variance gains k_n must be nonnegative")
        return cls(
            _diag_vec(kp1, n, "kp1"),
            _diag_vec(kd1, n, "kd1"),
            _diag_vec(kp2, m, "kp2"),
            _diag_vec(kd2, m, "kd2"),
            float(kn1),
            float(kn2),
            float(kn3),
            float(kn4),
            upper,
        )

    def _one(self, name: str, base: Array, kn: float, sigma: Array, smax: Array) -> Array:
        hi = base + kn * smax if kn else base.copy()
        if self.upper and name in self.upper:
            hi = np.broadcast_to(np.asarray(self.upper[name], dtype=float), base.shape)
        return np.clip(base + kn * sigma, base, np.maximum(hi, base))

    def adapt(self, sigma_a: Array, sigma_u: Array, smax_a: Array | None = None, smax_u: Array | None = None) -> AdaptedGains:
        smax_a = np.full_like(self.kp1, np.inf) if smax_a is None else smax_a
        smax_u = np.full_like(self.kp2, np.inf) if smax_u is None else smax_u
        return AdaptedGains(
            self._one("kp1", self.kp1, self.kn1, sigma_a, smax_a),
            self._one("kd1", self.kd1, self.kn2, sigma_a, smax_a),
            self._one("kp2", self.kp2, self.kn3, sigma_u, smax_u),
            self._one("kd2", self.kd2, self.kn4, sigma_u, smax_u),
        )


@dataclass(frozen=True)
class SumOfSines:
    """Per-coordinate reference ``sum_k A_k sin(w_k t + phi_k)`` with analytic derivatives.

    ``terms[i]`` lists ``(amplitude, omega, phase)`` triples for coordinate ``i``.
    """

    terms: tuple

    def __call__(self, t: float) -> tuple[Array, Array, Array]:
        k = len(self.terms)
        pos, vel, acc = np.zeros(k), np.zeros(k), np.zeros(k)
        for i, coord in enumerate(self.terms):
            for amp, om, ph in coord:
                arg = om * t + ph
                pos[i] += amp * math.sin(arg)
                vel[i] += amp * om * math.cos(arg)
                acc[i] -= amp * om * om * math.sin(arg)
        return pos, vel, acc

    @property
    def dim(self) -> int:
        return len(self.terms)


def external_aux(g: AdaptedGains, q_a: Array, qd_a: Array, ref: tuple[Array, Array, Array]) -> Array:
    qd, qdd_d, qddd_d = ref
    return qddd_d - g.kp1 * (q_a - qd) - g.kd1 * (qd_a - qdd_d)


def internal_aux(g: AdaptedGains, q_u: Array, qd_u: Array, bem: "BemEstimate") -> Array:
    return bem.q_u_e_ddot - g.kp2 * (q_u - bem.q_u_e) - g.kd2 * (qd_u - bem.q_u_e_dot)


# --- null-space decomposition ---------------------------------------------------


@dataclass(frozen=True)
class NullSpaceDecomp:
    u_mat: Array
    lambda_m: Array
    v: Array

    @property
    def m(self) -> int:
        return len(self.lambda_m)

    @property
    def v_m(self) -> Array:
        return self.v[:, : self.m]

    @property
    def v_n(self) -> Array:
        return self.v[:, self.m :]

    def pinv(self) -> Array:
        return self.v_m @ (self.u_mat.T / self.lambda_m[:, None])

    def reconstruct(self) -> Array:
        return self.u_mat @ (self.lambda_m[:, None] * self.v_m.T)


def nullspace_decomp(d_ua: Array, prev: NullSpaceDecomp | None = None, rank_tol: float = 1e-8) -> NullSpaceDecomp:
    """Full SVD ``D_ua = U [Lambda 0] V^T`` with sign-continuous columns of V."""
    d_ua = np.atleast_2d(np.asarray(d_ua, dtype=float))
    m, n = d_ua.shape
    if m > n:
        raise ControllerConfigError("m must not exceed n")
    u_mat, s, vt = np.linalg.svd(d_ua)
    if s[0] == 0 or s[-1] <= rank_tol * s[0]:
        raise RankDeficiencyError(f"Dbar_ua rank deficient: singular values {s}")
    v = vt.T.copy()
    u_mat = u_mat.copy()
    for j in range(n):
        if prev is not None and prev.v.shape == v.shape:
            flip = float(v[:, j] @ prev.v[:, j]) < 0
        else:
            lead = int(np.argmax(np.abs(v[:, j]) > 1e-12))
            flip = v[lead, j] < 0
        if flip:
            v[:, j] *= -1
            if j < m:
                u_mat[:, j] *= -1
    return NullSpaceDecomp(u_mat, s, v)


def transform_coords(dec: NullSpaceDecomp, q_a: Array, qd_a: Array) -> tuple[Array, Array]:
    """``p_a = V^T q_a`` with V frozen at the current tick."""
    return dec.v.T @ q_a, dec.v.T @ qd_a


def default_partition(nominal: NominalModel, configs: Sequence[Array]) -> "PeicPartition":
    """Reserve the m actuated joints with the strongest mean |Dbar_ua| coupling."""
    n, m = nominal.n, nominal.m
    acc = np.zeros(n)
    for q in configs:
        acc += np.abs(nominal.d_bar(np.asarray(q))[n:, :n]).sum(0)
    au = sorted(np.argsort(-acc, kind="stable")[:m].tolist())
    return PeicPartition(tuple(i for i in range(n) if i not in au), tuple(au))


@dataclass(frozen=True)
class PeicPartition:
    idx_aa: tuple
    idx_au: tuple

    def validate(self, n: int, m: int) -> None:
        aa, au = list(self.idx_aa), list(self.idx_au)
        if len(au) != m or len(aa) != n - m or sorted(aa + au) != list(range(n)):
            raise PartitionError(f"partition {aa}/{au} does not split {n} actuated joints into {n - m}+{m}")


# --- BEM --------------------------------------------------------------------------


@dataclass
class BemEstimate:
    q_u_e: Array
    q_u_e_dot: Array
    q_u_e_ddot: Array
    residual_norm: float
    iterations: int
    converged: bool
    fallback: bool = False


def bem_residual(dyn: GpDynamics, q_a: Array, qd_a: Array, v_ext: Array, q_u: Array) -> Array:
    """Gamma_0: unactuated GP dynamics at rest in ``q_u`` under ``qdd_a = v_ext``."""
    m = dyn.m
    q = np.concatenate([q_a, q_u])
    qd = np.concatenate([qd_a, np.zeros(m)])
    qdd = np.concatenate([v_ext, np.zeros(m)])
    return dyn.d_bar(q)[dyn.n :, : dyn.n] @ v_ext + dyn.h_gp(q, qd, qdd, "u")


def bem_solve(
    dyn: GpDynamics,
    v_ext: Array,
    q_a: Array,
    qd_a: Array,
    guess: Array,
    tol: float = 1e-8,
    max_iter: int = 50,
) -> BemEstimate:
    """Levenberg–Marquardt on ``Gamma_0(q_u) = 0`` with a finite-difference Jacobian."""
    x = np.array(guess, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("BEM guess must be finite")
    m = len(x)
    f = bem_residual(dyn, q_a, qd_a, v_ext, x)
    best_x, best_r = x.copy(), float(np.linalg.norm(f))
    lam = 1e-12
    it = 0
    while it < max_iter and best_r > tol:
        it += 1
        jac = np.empty((m, m))
        for j in range(m):
            h = 1e-7 * max(1.0, abs(x[j]))
            e = np.zeros(m)
            e[j] = h
            jac[:, j] = (bem_residual(dyn, q_a, qd_a, v_ext, x + e) - bem_residual(dyn, q_a, qd_a, v_ext, x - e)) / (2 * h)
        jtj = jac.T @ jac
        scale = max(float(np.trace(jtj)) / m, 1e-300)
        improved = False
        for _ in range(30):
            step = np.linalg.solve(jtj + lam * scale * np.eye(m), -jac.T @ f)
            # keep iterates from wandering over a full revolution
            step = np.clip(step, -0.5, 0.5)
            cand = x + step
            f_c = bem_residual(dyn, q_a, qd_a, v_ext, cand)
            r_c = float(np.linalg.norm(f_c))
            if r_c < best_r:
                x, f, best_x, best_r = cand, f_c, cand.copy(), r_c
                lam = max(lam * 0.1, 1e-15)
                improved = True
                break
            lam *= 10.0
        if not improved:
            break
    zero = np.zeros(m)
    return BemEstimate(best_x, zero, zero.copy(), best_r, it, best_r <= tol)


def _lowpass_coeff(dt: float, cutoff_hz: float) -> float:
    tau = 1.0 / (2 * math.pi * cutoff_hz)
    return dt / (dt + tau)


# --- controller ---------------------------------------------------------------------


@dataclass
class ControlFrame:
    t: float
    tag: str
    v_ext: Array
    bem: BemEstimate
    v_u_int: Array
    v_int: Array  # commanded actuated acceleration
    qdd_cmd: Array  # full designed acceleration [qdd_a; qdd_u]
    u: Array
    gains: AdaptedGains
    sigma_a: Array
    sigma_u: Array
    e_a: Array
    ed_a: Array
    e_u: Array
    ed_u: Array
    q_a_ref: Array
    qd_a_ref: Array
    dec: NullSpaceDecomp
    nu_n: Array = field(default_factory=lambda: np.zeros(0))

    @property
    def nullspace_command(self) -> float:
        """Norm of the commanded actuated acceleration in ker(Dbar_ua)."""
        return float(np.linalg.norm(self.dec.v_n.T @ self.v_int))


class BalanceController:
    """Stateful per-episode EIC/PEIC/NEIC controller.

    ``qddot_source="designed"`` evaluates the GP and the ``qdd_u`` torque term
    at the accelerations the controller itself designs for the current tick;
    ``"previous"`` uses the last measured acceleration instead.
    """

    def __init__(
        self,
        dyn: GpDynamics,
        gains: GainSchedule,
        reference: SumOfSines,
        dt: float,
        kind: str = "eic",
        alpha: float = 1.0,
        partition: PeicPartition | None = None,
        bem_tol: float = 1e-8,
        bem_max_iter: int = 50,
        bem_cutoff_hz: float = 10.0,
        qddot_source: str = "designed",
        bem_feedforward: str = "none",
    ):
        if kind not in CONTROLLER_KINDS:
            raise ControllerConfigError(f"unknown controller {kind!r}")
        if alpha < 0:
            raise ControllerConfigError("alpha must be nonnegative")
        if qddot_source not in ("designed", "previous"):
            raise ControllerConfigError("qddot_source must be 'designed' or 'previous'")
        if reference.dim != dyn.n:
            raise ControllerConfigError("reference must have one entry per actuated joint")
        self.dyn = dyn
        self.n, self.m = dyn.n, dyn.m
        self.gains = gains
        self.reference = reference
        self.dt = float(dt)
        self.kind = kind
        self.alpha = float(alpha)
        if kind == "peic":
            partition = partition or PeicPartition(tuple(range(self.n - self.m)), tuple(range(self.n - self.m, self.n)))
            partition.validate(self.n, self.m)
        self.partition = partition
        self.bem_tol, self.bem_max_iter = bem_tol, bem_max_iter
        self._beta = _lowpass_coeff(self.dt, bem_cutoff_hz)
        self.qddot_source = qddot_source
        if bem_feedforward not in ("full", "velocity", "none"):
            raise ControllerConfigError("bem_feedforward must be full, velocity or none")
        self.bem_feedforward = bem_feedforward
        smax = dyn.sigma_max_sq()
        self._smax_a, self._smax_u = smax[: self.n], smax[self.n :]
        self.reset()

    def reset(self) -> None:
        self._prev_bem: BemEstimate | None = None
        self._prev_dec: NullSpaceDecomp | None = None
        self._prev_qdd = np.zeros(self.n + self.m)
        self._prev_h: Array | None = None

    @property
    def tag(self) -> str:
        return self.kind.upper()

    def _track_bem(self, est: BemEstimate) -> BemEstimate:
        prev = self._prev_bem
        if not est.converged and prev is not None:
            est = BemEstimate(prev.q_u_e.copy(), prev.q_u_e_dot, prev.q_u_e_ddot, est.residual_norm, est.iterations, False, True)
        if prev is None:
            return est
        b = self._beta
        raw_v = (est.q_u_e - prev.q_u_e) / self.dt
        vel = prev.q_u_e_dot + b * (raw_v - prev.q_u_e_dot)
        raw_a = (vel - prev.q_u_e_dot) / self.dt
        acc = prev.q_u_e_ddot + b * (raw_a - prev.q_u_e_ddot)
        return BemEstimate(est.q_u_e, vel, acc, est.residual_norm, est.iterations, est.converged, est.fallback)

    def _distribution(self, v_ext: Array, dec: NullSpaceDecomp, d: Array):
        """Return ``(a0, M, b_extra, nu_n)`` with ``qdd_a = a0 + M (H_u + Dbar_uu v_u + b_extra)``."""
        n, m = self.n, self.m
        if self.kind == "peic":
            aa, au = list(self.partition.idx_aa), list(self.partition.idx_au)
            blk = d[n:, :n]
            sub = dec if n == m and au == list(range(n)) else nullspace_decomp(blk[:, au])
            a0 = np.zeros(n)
            a0[aa] = v_ext[aa]
            mat = np.zeros((n, m))
            mat[au] = -sub.pinv()
            return a0, mat, blk[:, aa] @ v_ext[aa], np.zeros(0)
        mat = -dec.pinv()
        if self.kind == "neic":
            nu = self.alpha * (dec.v_n.T @ v_ext)
            return dec.v_n @ nu, mat, np.zeros(m), nu
        return np.zeros(n), mat, np.zeros(m), np.zeros(0)

    def _designed_accel(self, q, qd, d, v_u, a0, mat, b):
        dyn = self.dyn

        def qdd_of(h):
            return np.concatenate([a0 + mat @ (h + b), v_u])

        def resid(h):
            return h - dyn.h_gp(q, qd, qdd_of(h), "u")

        h = dyn.h_gp(q, qd, qdd_of(np.zeros(self.m) if self._prev_h is None else self._prev_h), "u")
        if dyn.gp is not None:
            h = newton(resid, lambda h: np.eye(self.m) - dyn.h_gp_qdd_jac(q, qd, qdd_of(h), "u")[:, : self.n] @ mat,
                       h, 1e-13 * (1.0 + np.linalg.norm(h)), max_iter=20)
        self._prev_h = h
        return qdd_of(h)

    def __call__(self, t: float, q: Array, qd: Array, qdd_meas: Array | None = None) -> ControlFrame:
        n, m, dyn = self.n, self.m, self.dyn
        q = np.asarray(q, dtype=float)
        qd = np.asarray(qd, dtype=float)
        q_a, q_u, qd_a, qd_u = q[:n], q[n:], qd[:n], qd[n:]
        ref = self.reference(t)

        qdd_query = self._prev_qdd if self.qddot_source == "designed" or qdd_meas is None else qdd_meas
        sig = dyn.variance(q, qd, qdd_query)
        sigma_a, sigma_u = sig[:n], sig[n:]
        g = self.gains.adapt(sigma_a, sigma_u, self._smax_a, self._smax_u)

        v_ext = external_aux(g, q_a, qd_a, ref)
        guess = q_u if self._prev_bem is None else self._prev_bem.q_u_e
        est = bem_solve(dyn, v_ext, q_a, qd_a, guess, self.bem_tol, self.bem_max_iter)
        bem = self._track_bem(est)
        self._prev_bem = bem
        ff = bem
        if self.bem_feedforward != "full":
            zero = np.zeros(m)
            ff = BemEstimate(bem.q_u_e, bem.q_u_e_dot if self.bem_feedforward == "velocity" else zero,
                             zero, bem.residual_norm, bem.iterations, bem.converged, bem.fallback)
        v_u = internal_aux(g, q_u, qd_u, ff)

        d = dyn.d_bar(q)
        dec = nullspace_decomp(d[n:, :n], self._prev_dec)
        self._prev_dec = dec
        a0, mat, b_extra, nu = self._distribution(v_ext, dec, d)
        b = d[n:, n:] @ v_u + b_extra

        if self.qddot_source == "designed":
            qdd_cmd = self._designed_accel(q, qd, d, v_u, a0, mat, b)
            u = d[:n, :] @ qdd_cmd + dyn.h_gp(q, qd, qdd_cmd, "a")
        else:
            qdd_prev = self._prev_qdd if qdd_meas is None else np.asarray(qdd_meas, dtype=float)
            h_gp = dyn.h_gp(q, qd, qdd_prev)
            qdd_a = a0 + mat @ (h_gp[n:] + b)
            qdd_cmd = np.concatenate([qdd_a, v_u])
            u = d[:n, :n] @ qdd_a + d[:n, n:] @ qdd_prev[n:] + h_gp[:n]
            self._prev_qdd = qdd_prev
        if self.qddot_source == "designed":
            self._prev_qdd = qdd_cmd
        if not np.all(np.isfinite(u)):
            raise FloatingPointError(f"non-finite torque at t={t}")

        return ControlFrame(
            t=t,
            tag=self.tag,
            v_ext=v_ext,
            bem=bem,
            v_u_int=v_u,
            v_int=qdd_cmd[:n],
            qdd_cmd=qdd_cmd,
            u=u,
            gains=g,
            sigma_a=sigma_a,
            sigma_u=sigma_u,
            e_a=q_a - ref[0],
            ed_a=qd_a - ref[1],
            e_u=q_u - bem.q_u_e,
            ed_u=qd_u - ff.q_u_e_dot,
            q_a_ref=ref[0],
            qd_a_ref=ref[1],
            dec=dec,
            nu_n=nu,
        )
