"""Post-hoc diagnostics: Lyapunov traces, tracking statistics, uncontrolled
motion in ker(Dbar_ua), and the GP-driven error-bound components."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .control import GainSchedule, nullspace_decomp
from .dynamics import NominalModel
from .gp import GpModel, error_bound_kappa
from .sim import EpisodeLog

Array = np.ndarray

STEADY_FRACTION = 0.2
ASSUMED_C = (0.01, 0.01, 0.01, 0.01)


class AnalysisError(ValueError):
    """Invalid analysis input (empty window, non-Hurwitz matrix, ...)."""


# --- Lyapunov machinery ---------------------------------------------------------


def lyapunov_solve(a0: Array, q_mat: Array) -> Array:
    """Solve ``A0^T P + P A0 + Q = 0`` by Kronecker vectorization."""
    a0 = np.asarray(a0, dtype=float)
    q_mat = np.asarray(q_mat, dtype=float)
    k = a0.shape[0]
    if a0.shape != (k, k) or q_mat.shape != (k, k):
        raise AnalysisError("A0 and Q must be square and of equal size")
    eig = np.linalg.eigvals(a0)
    worst = eig[np.argmax(eig.real)]
    if worst.real >= 0:
        raise AnalysisError(f"A0 is not Hurwitz: eigenvalue {worst:.6g} has nonnegative real part")
    eye = np.eye(k)
    # row-major vec: vec(A^T P) = (A^T kron I) vec(P), vec(P A) = (I kron A^T) vec(P)
    lhs = np.kron(a0.T, eye) + np.kron(eye, a0.T)
    p = np.linalg.solve(lhs, -q_mat.reshape(-1)).reshape(k, k)
    return 0.5 * (p + p.T)


def error_system_matrix(kp: Array, kd: Array) -> Array:
    """``[[0, I], [-diag(kp), -diag(kd)]]`` for the stacked error ``[e_q; ed_q]``."""
    kp = np.asarray(kp, dtype=float).ravel()
    kd = np.asarray(kd, dtype=float).ravel()
    k = kp.size
    return np.block([[np.zeros((k, k)), np.eye(k)], [-np.diag(kp), -np.diag(kd)]])


@dataclass(frozen=True)
class LyapunovSetup:
    a0: Array
    q_mat: Array
    p_mat: Array

    @classmethod
    def from_gains(cls, gains: GainSchedule, q_mat: Array | None = None) -> "LyapunovSetup":
        """Constant part of the error dynamics from the base gains; Q defaults to I."""
        kp = np.concatenate([gains.kp1, gains.kp2])
        kd = np.concatenate([gains.kd1, gains.kd2])
        a0 = error_system_matrix(kp, kd)
        q_mat = np.eye(a0.shape[0]) if q_mat is None else np.asarray(q_mat, dtype=float)
        return cls(a0, q_mat, lyapunov_solve(a0, q_mat))

    @property
    def residual(self) -> float:
        return float(np.abs(self.a0.T @ self.p_mat + self.p_mat @ self.a0 + self.q_mat).max())


@dataclass(frozen=True)
class LyapunovTrace:
    """V(t) with an exponential envelope ``scale * V(t0) * exp(-gamma (t - t0))`` fitted on ``fit_window``."""

    t: Array
    v: Array
    envelope: Array
    gamma: float
    fit_window: tuple[float, float]
    scale: float = 1.0
    floor: float = 0.0

    @property
    def under_envelope_fraction(self) -> float:
        """Share of fit-window ticks with ``V <= envelope`` (1% slack)."""
        sel = self._window()
        return float(np.mean(self.v[sel] <= 1.01 * self.envelope[sel] + 1e-300))

    @property
    def settled(self) -> bool:
        """V fell back to the pre-disturbance floor before the end of the fit window."""
        return bool(self.v[self._window()][-1] <= self.floor) if self.floor > 0 else True

    def _window(self) -> Array:
        lo, hi = self.fit_window
        return (self.t >= lo) & (self.t <= hi)


def lyapunov_values(errors: Array, p_mat: Array) -> Array:
    """``V = e^T P e`` for each row of ``errors``."""
    return np.einsum("ti,ij,tj->t", errors, p_mat, errors)


def fit_decay_rate(t: Array, v: Array) -> float:
    """Least-squares slope of ``-log V`` against time (V clamped at machine epsilon)."""
    if len(t) < 2:
        raise AnalysisError("need at least two samples to fit a decay rate")
    logv = np.log(np.maximum(v, np.finfo(float).eps))
    slope = np.polyfit(t, logv, 1)[0]
    return float(-slope)


def lyapunov_trace(
    log: EpisodeLog, setup: LyapunovSetup, disturbance: float | None = None, band_window: float = 5.0
) -> LyapunovTrace:
    """V(t) from the logged errors and an exponential envelope over its decaying transient.

    Without a disturbance the transient runs from the peak of V to the end of the
    log. With one, it runs from the post-disturbance peak until V returns to the
    floor set by the largest V in the ``band_window`` seconds before the jump
    (tracking never drives V to zero, so the decay is only meaningful above it).
    gamma is the least-squares rate of log V on that window; ``scale >= 1`` is the
    smallest envelope amplitude (relative to V at the peak) bounding V on it.
    """
    if len(log) < 2:
        raise AnalysisError("episode log has fewer than two ticks")
    t = log.t
    v = lyapunov_values(log.error_vector, setup.p_mat)
    floor = 0.0
    if disturbance is None:
        i0, i1 = int(np.argmax(v)), len(t) - 1
    else:
        pre = (t >= disturbance - band_window) & (t < disturbance)
        near = np.flatnonzero((t >= disturbance) & (t <= disturbance + band_window))
        if not pre.any() or near.size == 0:
            raise AnalysisError(f"no samples around the disturbance at t={disturbance}")
        floor = float(v[pre].max())
        i0 = int(near[np.argmax(v[near])])
        below = np.flatnonzero(v[i0:] <= floor)
        i1 = i0 + int(below[0]) if below.size else len(t) - 1
    if i1 - i0 < 2:
        raise AnalysisError("decaying transient shorter than two ticks")
    sel = slice(i0, i1 + 1)
    gamma = fit_decay_rate(t[sel], v[sel])
    decay = np.exp(-gamma * (t - t[i0]))
    v0 = max(float(v[i0]), np.finfo(float).tiny)
    scale = max(1.0, float(np.max(v[sel] / (v0 * decay[sel]))))
    return LyapunovTrace(t, v, scale * v0 * decay, gamma, (float(t[i0]), float(t[i1])), scale, floor)


# --- tracking statistics -----------------------------------------------------------


@dataclass(frozen=True)
class TrackingStats:
    labels: tuple[str, ...]
    mean: Array
    std: Array
    norm_mean: float
    norm_std: float
    effort: float
    window: tuple[float, float]
    tag: str = ""

    def row(self) -> list[str]:
        cells = [f"{m:.4f} +- {s:.4f}" for m, s in zip(self.mean, self.std)]
        cells.append(f"{self.norm_mean:.4f} +- {self.norm_std:.4f}")
        cells.append(f"{self.effort:.4f}")
        return cells

    def header(self) -> list[str]:
        return [f"|{lab}| (rad)" for lab in self.labels] + ["||e||", "int u^T u dt"]


def steady_window(log: EpisodeLog, fraction: float = STEADY_FRACTION) -> tuple[float, float]:
    t0, t1 = float(log.t[0]), float(log.t[-1])
    return t0 + fraction * (t1 - t0), t1


def tracking_stats(log: EpisodeLog, window: tuple[float, float] | None = None, tag: str = "") -> TrackingStats:
    """Per-joint |e| mean and std, ||e_q|| stats and the trapezoid effort over a window.

    The joint errors are the actuated tracking errors followed by the
    unactuated errors relative to the estimated balance manifold.
    """
    if len(log) == 0:
        raise AnalysisError("empty episode log")
    window = steady_window(log) if window is None else window
    t = log.t
    sel = (t >= window[0] - 1e-12) & (t <= window[1] + 1e-12)
    if sel.sum() < 2:
        raise AnalysisError(f"window {window} holds fewer than two samples")
    e_q = np.hstack([log.e_a, log.e_u])[sel]
    norms = np.linalg.norm(e_q, axis=1)
    uu = np.einsum("ti,ti->t", log.u[sel], log.u[sel])
    effort = float(np.trapezoid(uu, t[sel])) if hasattr(np, "trapezoid") else float(np.trapz(uu, t[sel]))
    labels = tuple(f"e{i + 1}" for i in range(e_q.shape[1]))
    return TrackingStats(
        labels, np.abs(e_q).mean(axis=0), np.abs(e_q).std(axis=0),
        float(norms.mean()), float(norms.std()), effort, (float(window[0]), float(window[1])), tag,
    )


def format_table(stats: Sequence[TrackingStats]) -> str:
    """Aligned plain-text table with one row per controller."""
    if not stats:
        return ""
    header = ["controller"] + stats[0].header()
    rows = [[s.tag or "-"] + s.row() for s in stats]
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
    return "\n".join(lines)


def write_stats_csv(path: str | Path, stats: Sequence[TrackingStats]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        labels = stats[0].labels if stats else ()
        w.writerow(["controller", *[f"{lab}_mean" for lab in labels], *[f"{lab}_std" for lab in labels],
                    "norm_mean", "norm_std", "effort", "window_start", "window_end"])
        for s in stats:
            w.writerow([s.tag, *map(repr, map(float, s.mean)), *map(repr, map(float, s.std)),
                        repr(s.norm_mean), repr(s.norm_std), repr(s.effort), repr(s.window[0]), repr(s.window[1])])


# --- uncontrolled motion -------------------------------------------------------------


@dataclass(frozen=True)
class UncontrolledMotion:
    t: Array
    nullspace_command: Array
    pan_error: Array
    notice: str = ""

    @property
    def empty(self) -> bool:
        return self.t.size == 0

    def max_command(self, until: float | None = None) -> float:
        sel = self.t <= (np.inf if until is None else until)
        return float(self.nullspace_command[sel].max()) if sel.any() else 0.0

    def first_exceed(self, threshold: float) -> float | None:
        idx = np.flatnonzero(self.pan_error > threshold)
        return float(self.t[idx[0]]) if idx.size else None


def uncontrolled_motion_metric(log: EpisodeLog) -> UncontrolledMotion:
    """``||V_n^T v_int||`` and ``||p_an - p_an^d||`` per tick, read from the log."""
    n, m = log.n, log.m
    if n == m:
        z = np.zeros(0)
        return UncontrolledMotion(z, z, z, "n == m: ker(Dbar_ua) is trivial, no uncontrolled motion")
    p = log.block("pa", n)[:, m:]
    p_ref = log.block("pa_ref", n)[:, m:]
    return UncontrolledMotion(log.t, log.col("ns_cmd"), np.linalg.norm(p - p_ref, axis=1))


def nullspace_command_from_states(nominal: NominalModel, log: EpisodeLog) -> Array:
    """Independent recomputation of ``||V_n^T v_int||`` from the logged states."""
    n = log.n
    q = log.q
    v_int = log.block("va", n)
    out = np.empty(len(log))
    prev = None
    for i in range(len(log)):
        dec = nullspace_decomp(nominal.d_bar(q[i])[n:, :n], prev)
        prev = dec
        out[i] = np.linalg.norm(dec.v_n.T @ v_int[i])
    return out


# --- error-bound components ---------------------------------------------------------------


@dataclass(frozen=True)
class BoundReport:
    eta_a: float
    eta_u: float
    d_a1: float
    d_a2: float
    d_u1: float
    d_u2: float
    sigma_1: float
    sigma_m: float
    sigma_a_max: float
    sigma_u_max: float
    kappa_a: float
    kappa_u: float
    l_a1: float
    l_u1: float
    l_a2: float
    l_u2: float
    d1: float
    d2: float
    c: tuple[float, float, float, float]
    lambda_min_q: float
    lambda_max_p: float
    lambda_max_q_sigma: float
    r1: float
    rkhs_is_surrogate: bool = True
    notes: list[str] = field(default_factory=list)

    @property
    def eta(self) -> float:
        return self.eta_a * self.eta_u

    def to_text(self) -> str:
        lines = [f"joint probability eta = eta_a * eta_u = {self.eta_a:g} * {self.eta_u:g} = {self.eta:g}"]
        for key, val in asdict(self).items():
            if key in ("eta_a", "eta_u", "notes"):
                continue
            lines.append(f"{key} = {val}")
        lines.append(f"c1..c4 = {self.c} (assumed, not measured)")
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines)


def block_norm_ranges(nominal: NominalModel, configs: Array) -> dict[str, float]:
    """Spectral-norm extremes of Dbar_aa, Dbar_uu and singular values of Dbar_ua over a grid."""
    n = nominal.n
    vals = {"d_a1": math.inf, "d_a2": 0.0, "d_u1": math.inf, "d_u2": 0.0, "sigma_1": 0.0, "sigma_m": math.inf}
    for q in np.atleast_2d(configs):
        d = nominal.d_bar(q)
        na = np.linalg.norm(d[:n, :n], 2)
        nu = np.linalg.norm(d[n:, n:], 2)
        sv = np.linalg.svd(d[n:, :n], compute_uv=False)
        vals["d_a1"] = min(vals["d_a1"], na)
        vals["d_a2"] = max(vals["d_a2"], na)
        vals["d_u1"] = min(vals["d_u1"], nu)
        vals["d_u2"] = max(vals["d_u2"], nu)
        vals["sigma_1"] = max(vals["sigma_1"], float(sv[0]))
        vals["sigma_m"] = min(vals["sigma_m"], float(sv[-1]))
    return vals


def q_sigma_bound(gains: GainSchedule, setup: LyapunovSetup, smax_a: Array, smax_u: Array) -> float:
    """Largest eigenvalue of ``(A - A0)^T P + P (A - A0)`` with gains at their variance ceilings."""
    g = gains.adapt(np.asarray(smax_a), np.asarray(smax_u), np.asarray(smax_a), np.asarray(smax_u))
    a = error_system_matrix(np.concatenate([g.kp1, g.kp2]), np.concatenate([g.kd1, g.kd2]))
    da = a - setup.a0
    qs = da.T @ setup.p_mat + setup.p_mat @ da
    return float(np.linalg.eigvalsh(0.5 * (qs + qs.T))[-1])


def gp_bound_report(
    gp: GpModel,
    nominal: NominalModel,
    gains: GainSchedule,
    configs: Array,
    eta_a: float = 0.95,
    eta_u: float = 0.95,
    c: Sequence[float] = ASSUMED_C,
    q_mat: Array | None = None,
) -> BoundReport:
    """Constants of the probabilistic perturbation bound and the error radius r1.

    ``c`` are the affine constants of the approximation residuals; they are
    assumptions supplied by the user, defaulting to 0.01 each.
    """
    c = tuple(float(x) for x in c)
    if len(c) != 4 or any(x < 0 for x in c):
        raise AnalysisError("c must hold four nonnegative constants")
    configs = np.atleast_2d(np.asarray(configs, dtype=float))
    if configs.size == 0:
        raise AnalysisError("configuration grid is empty")
    n = nominal.n
    b = block_norm_ranges(nominal, configs)
    kp = error_bound_kappa(gp, eta_a, eta_u)
    smax = np.sqrt(gp.sigma_max_sq())
    sa, su = float(np.max(smax[:n])), float(np.max(smax[n:]))
    ka, ku = float(np.linalg.norm(kp.kappa_a)), float(np.linalg.norm(kp.kappa_u))
    da1, du1, du2, s1, sm = b["d_a1"], b["d_u1"], b["d_u2"], b["sigma_1"], b["sigma_m"]
    l_a1 = sa * (du1 + sm) / (du1 * da1)
    l_u1 = su / du1
    l_u2 = su * (s1 + du1) / (s1 * du1)
    l_a2 = sa * (sm + du1) / (da1 * du1)
    d1 = c[1] + (1 + du2 / s1) * c[3]
    d2 = c[0] + du2 / s1 * c[2]
    setup = LyapunovSetup.from_gains(gains, q_mat)
    lam_q = float(np.linalg.eigvalsh(setup.q_mat)[0])
    lam_p = float(np.linalg.eigvalsh(setup.p_mat)[-1])
    smax_sq = gp.sigma_max_sq()
    lam_qs = q_sigma_bound(gains, setup, smax_sq[:n], smax_sq[n:])
    denom = lam_q - lam_qs - 2 * d2 * lam_p
    notes = ["RKHS norm replaced by the posterior-mean interpolant norm"]
    if denom > 0:
        r1 = 2 * d1 * lam_p / denom
    else:
        r1 = math.inf
        notes.append("gain condition lambda_min(Q) - lambda_max(Q_Sigma) - 2 d2 lambda_max(P) > 0 fails")
    return BoundReport(
        eta_a, eta_u, da1, b["d_a2"], du1, du2, s1, sm, sa, su, ka, ku,
        l_a1, l_u1, l_a2, l_u2, d1, d2, c, lam_q, lam_p, lam_qs, r1, kp.rkhs_is_surrogate, notes,
    )


# --- recovery -------------------------------------------------------------------------------


def recovery_time(log: EpisodeLog, t_dist: float, band_window: float = 5.0, margin: float = 1.0) -> float | None:
    """Seconds after ``t_dist`` until ``||e_a||`` stays within the pre-disturbance band.

    The band is ``margin`` times the maximum ``||e_a||`` over the ``band_window``
    seconds before the disturbance; returns None if the error never settles.
    """
    t = log.t
    err = np.linalg.norm(log.e_a, axis=1)
    pre = (t >= t_dist - band_window) & (t < t_dist)
    if not pre.any():
        raise AnalysisError("no samples before the disturbance")
    band = margin * err[pre].max()
    post = np.flatnonzero(t >= t_dist)
    if post.size == 0:
        return None
    outside = np.flatnonzero(err[post] > band)
    if outside.size == 0:
        return 0.0
    last = outside[-1]
    if last == post.size - 1:
        return None
    return float(t[post[last + 1]] - t_dist)
