"""Per-channel Gaussian-process regression of the residual dynamics.

A residual ``He = B u - Dbar qdd - Hbar`` is learned independently for every
generalized coordinate with a squared-exponential ARD kernel on the input
``x = [q; qd; qdd]``. Hyperparameters are fitted by minimising the negative
log marginal likelihood in log-parameter space.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.spatial.distance import cdist

from .dynamics import NominalModel

log = logging.getLogger(__name__)

Array = np.ndarray

MAX_JITTER_DOUBLINGS = 6
NEG_VARIANCE_TOL = 1e-10


class GpTrainingError(RuntimeError):
    pass


class NumericalConditioningError(ArithmeticError):
    pass


class GpConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class GpHyperparams:
    """Kernel weights ``w`` (inverse squared lengthscales), signal std, noise std."""

    w: Array
    sigma_f: float
    vartheta: float

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float).ravel()
        if not np.all(w > 0):
            raise GpConfigurationError("kernel weights must be positive")
        if not self.sigma_f > 0:
            raise GpConfigurationError("sigma_f must be positive")
        if not self.vartheta >= 0:
            raise GpConfigurationError("vartheta must be nonnegative")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "sigma_f", float(self.sigma_f))
        object.__setattr__(self, "vartheta", float(self.vartheta))

    @property
    def max_variance(self) -> float:
        return self.sigma_f**2 + self.vartheta**2

    def to_log(self, vartheta_floor: float) -> Array:
        return np.concatenate([np.log(self.w), [math.log(self.sigma_f), math.log(max(self.vartheta, vartheta_floor))]])

    @classmethod
    def from_log(cls, theta: Array) -> "GpHyperparams":
        theta = np.asarray(theta, dtype=float)
        return cls(np.exp(theta[:-2]), math.exp(theta[-2]), math.exp(theta[-1]))


def kernel_eval(h: GpHyperparams, x: Array, x2: Array, same_index: bool = False) -> float:
    x = np.asarray(x, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    if x.shape != h.w.shape or x2.shape != h.w.shape:
        raise GpConfigurationError(f"input dimension mismatch: {x.shape}, {x2.shape} vs w {h.w.shape}")
    d = x - x2
    val = h.sigma_f**2 * math.exp(-0.5 * float(d @ (h.w * d)))
    if same_index:
        val += h.vartheta**2
    return val


def gram(h: GpHyperparams, xa: Array, xb: Array | None = None) -> Array:
    """Noise-free kernel matrix; ``xb=None`` means ``xa`` against itself."""
    xa = np.atleast_2d(xa) * np.sqrt(h.w)
    xb = xa if xb is None else np.atleast_2d(xb) * np.sqrt(h.w)
    return h.sigma_f**2 * np.exp(-0.5 * cdist(xa, xb, "sqeuclidean"))


def _factor(k: Array) -> tuple[Array, float]:
    """Cholesky with the trace-scaled jitter policy; returns (L, jitter)."""
    n = k.shape[0]
    base = 1e-10 * float(np.trace(k)) / n
    if base <= 0:
        base = 1e-300
    jitter = base
    for _ in range(MAX_JITTER_DOUBLINGS + 1):
        try:
            return np.linalg.cholesky(k + jitter * np.eye(n)), jitter
        except np.linalg.LinAlgError:
            jitter *= 2.0
    raise GpTrainingError(f"Gram factorization failed after jitter {jitter / 2:.3e}")


@dataclass
class GpChannel:
    hyper: GpHyperparams
    alpha: Array
    chol: Array
    jitter: float


@dataclass(frozen=True)
class GpPrediction:
    mu: Array
    sigma: Array  # diagonal of per-channel variances
    n: int

    @property
    def mu_a(self) -> Array:
        return self.mu[: self.n]

    @property
    def mu_u(self) -> Array:
        return self.mu[self.n :]

    @property
    def sigma_a(self) -> Array:
        return self.sigma[: self.n]

    @property
    def sigma_u(self) -> Array:
        return self.sigma[self.n :]


@dataclass
class GpModel:
    """Independent GP per output coordinate, trained on shared inputs."""

    inputs: Array
    targets: Array
    channels: list[GpChannel]
    n: int
    m: int
    _w: Array = field(init=False, repr=False)
    _sf2: Array = field(init=False, repr=False)
    _alpha: Array = field(init=False, repr=False)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.targets = np.asarray(self.targets, dtype=float).reshape(self.inputs.shape[0], -1)
        if self.inputs.shape[0] < 1:
            raise GpConfigurationError("GP needs at least one training point")
        if len(self.channels) != self.n + self.m:
            raise GpConfigurationError("one channel per generalized coordinate expected")
        self._w = np.stack([c.hyper.w for c in self.channels])
        self._sf2 = np.array([c.hyper.sigma_f**2 for c in self.channels])
        self._alpha = np.stack([c.alpha for c in self.channels], axis=1)

    @property
    def n_inputs(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_points(self) -> int:
        return self.inputs.shape[0]

    def _kvec(self, x: Array, idx) -> Array:
        diff2 = (self.inputs - x) ** 2
        return self._sf2[idx] * np.exp(-0.5 * diff2 @ self._w[idx].T)

    def mean(self, x: Array, channels: Sequence[int] | slice | None = None) -> Array:
        """Posterior mean for the selected channels (all by default)."""
        idx = slice(None) if channels is None else channels
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_inputs,):
            raise GpConfigurationError(f"query must have shape ({self.n_inputs},)")
        k = self._kvec(x, idx)
        return np.einsum("ic,ic->c", k, self._alpha[:, idx])

    def mean_grad(self, x: Array, channels: Sequence[int] | slice | None = None) -> Array:
        """Jacobian of the posterior mean w.r.t. the query, shape (channels, inputs)."""
        idx = slice(None) if channels is None else channels
        x = np.asarray(x, dtype=float)
        diff = x - self.inputs  # (N, d)
        ka = self._kvec(x, idx) * self._alpha[:, idx]  # (N, C)
        return -(ka.T @ diff) * self._w[idx]

    def variance(self, x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        k = self._kvec(x, slice(None))
        out = np.empty(len(self.channels))
        for c, ch in enumerate(self.channels):
            v = solve_triangular(ch.chol, k[:, c], lower=True, check_finite=False)
            var = self._sf2[c] - float(v @ v)
            if var < -NEG_VARIANCE_TOL:
                raise NumericalConditioningError(f"negative predictive variance {var:.3e} in channel {c}")
            out[c] = max(var, 0.0)
        return out

    def predict(self, x_star: Array) -> GpPrediction:
        return GpPrediction(self.mean(x_star), self.variance(x_star), self.n)

    def sigma_max_sq(self) -> Array:
        """Per-channel prior variance bound ``sigma_f^2 + vartheta^2``."""
        return np.array([c.hyper.max_variance for c in self.channels])

    # --- persistence --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": "gpbalance-gp/1",
            "input_layout": "q[0:K], qdot[0:K], qddot[0:K]",
            "n": self.n,
            "m": self.m,
            "inputs": self.inputs.tolist(),
            "targets": self.targets.tolist(),
            "channels": [
                {
                    "w": c.hyper.w.tolist(),
                    "sigma_f": c.hyper.sigma_f,
                    "vartheta": c.hyper.vartheta,
                    "jitter": c.jitter,
                    "alpha": c.alpha.tolist(),
                }
                for c in self.channels
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GpModel":
        x = np.asarray(data["inputs"], dtype=float)
        channels = []
        for c in data["channels"]:
            hyper = GpHyperparams(np.asarray(c["w"]), c["sigma_f"], c["vartheta"])
            k = gram(hyper, x) + hyper.vartheta**2 * np.eye(len(x))
            chol = np.linalg.cholesky(k + c["jitter"] * np.eye(len(x)))
            channels.append(GpChannel(hyper, np.asarray(c["alpha"], dtype=float), chol, c["jitter"]))
        return cls(x, np.asarray(data["targets"], dtype=float), channels, data["n"], data["m"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "GpModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def gp_input(q: Array, qdot: Array, qddot: Array) -> Array:
    return np.concatenate([q, qdot, qddot])


def residual_target(nominal: NominalModel, q: Array, qdot: Array, qddot: Array, u: Array) -> Array:
    """He = B u - Dbar(q) qdd - Hbar(q, qd)."""
    q = np.asarray(q, dtype=float)
    he = -nominal.d_bar(q) @ np.asarray(qddot, dtype=float) - nominal.h_bar(q, np.asarray(qdot, dtype=float))
    he[: nominal.n] += np.asarray(u, dtype=float)
    return he


# --- training ----------------------------------------------------------------


def condition_channel(x: Array, y: Array, hyper: GpHyperparams) -> GpChannel:
    k = gram(hyper, x) + hyper.vartheta**2 * np.eye(len(x))
    chol, jitter = _factor(k)
    alpha = cho_solve((chol, True), y)
    return GpChannel(hyper, alpha, chol, jitter)


def condition(x: Array, y: Array, hypers: Sequence[GpHyperparams], n: int, m: int) -> GpModel:
    """Build a GP model from fixed hyperparameters (no optimisation)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).reshape(len(x), -1)
    chans = [condition_channel(x, y[:, c], h) for c, h in enumerate(hypers)]
    return GpModel(x, y, chans, n, m)


def nll_and_grad(theta: Array, x: Array, y: Array, with_grad: bool = True):
    """Negative log marginal likelihood and its gradient w.r.t. log-parameters.

    ``theta = [log w_1..log w_d, log sigma_f, log vartheta]``.
    """
    hyper = GpHyperparams.from_log(theta)
    n_pts = len(x)
    kf = gram(hyper, x)
    k = kf + hyper.vartheta**2 * np.eye(n_pts)
    chol, _ = _factor(k)
    alpha = cho_solve((chol, True), y)
    nll = 0.5 * float(y @ alpha) + float(np.log(np.diag(chol)).sum()) + 0.5 * n_pts * math.log(2 * math.pi)
    if not with_grad:
        return nll, None
    kinv = cho_solve((chol, True), np.eye(n_pts))
    wmat = kinv - np.outer(alpha, alpha)
    grad = np.empty_like(theta)
    s = wmat * kf
    rowsum = s.sum(1)
    # sum_ij S_ij (x_id - x_jd)^2 = 2 sum_i x_id^2 rowsum_i - 2 x_d^T S x_d
    sq = 2.0 * (rowsum @ x**2) - 2.0 * np.einsum("id,id->d", x, s @ x)
    grad[:-2] = -0.25 * hyper.w * sq
    grad[-2] = float((wmat * kf).sum())  # 0.5 tr(W * 2 Kf)
    grad[-1] = hyper.vartheta**2 * float(np.trace(wmat))  # 0.5 tr(W * 2 vt^2 I)
    return nll, grad


@dataclass(frozen=True)
class TrainingBounds:
    """Box bounds in log space; the ``*_rel`` caps scale with the data (None disables them).

    ``sigma_f_rel`` caps sigma_f at that multiple of std(y) and ``lengthscale_rel``
    caps each lengthscale at that multiple of the input range. Without them a
    channel can escape to a huge-amplitude, near-linear kernel whose posterior
    mean is a cancellation of enormous terms (and so numerically noisy).
    """

    w: tuple[float, float] = (1e-8, 1e8)
    sigma_f: tuple[float, float] = (1e-6, 1e6)
    vartheta_floor: float = 1e-4
    vartheta_max: float = 1e3
    sigma_f_rel: float | None = 10.0
    lengthscale_rel: float | None = 100.0

    def arrays(self, nx: int, x: Array | None = None, y: Array | None = None) -> tuple[Array, Array]:
        floor = max(self.vartheta_floor, 1e-12)
        lo = np.concatenate([np.full(nx, math.log(self.w[0])), [math.log(self.sigma_f[0]), math.log(floor)]])
        hi = np.concatenate([np.full(nx, math.log(self.w[1])), [math.log(self.sigma_f[1]), math.log(self.vartheta_max)]])
        if x is not None and self.lengthscale_rel is not None:
            span = np.ptp(x, axis=0)
            w_min = np.where(span > 0, 1.0 / (self.lengthscale_rel * np.where(span > 0, span, 1.0)) ** 2, self.w[0])
            lo[:nx] = np.minimum(np.maximum(lo[:nx], np.log(w_min)), hi[:nx])
        if y is not None and self.sigma_f_rel is not None and np.std(y) > 0:
            hi[nx] = max(min(hi[nx], math.log(self.sigma_f_rel * float(np.std(y)))), lo[nx])
        return lo, hi


def _descend(theta0: Array, x: Array, y: Array, lo: Array, hi: Array, max_iter: int, tol: float):
    """Projected gradient descent with Armijo backtracking in log space."""
    theta = np.clip(theta0, lo, hi)
    f, g = nll_and_grad(theta, x, y)
    if not math.isfinite(f):
        raise GpTrainingError("non-finite NLL at start")
    step = 1e-2
    for _ in range(max_iter):
        accepted = False
        while step > 1e-14:
            cand = np.clip(theta - step * g, lo, hi)
            delta = theta - cand
            if not np.any(delta):
                break
            try:
                f_c, _ = nll_and_grad(cand, x, y, with_grad=False)
            except GpTrainingError:
                f_c = math.inf
            if math.isfinite(f_c) and f_c <= f - 1e-4 * float(g @ delta):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        f_prev = f
        theta = cand
        f, g = nll_and_grad(theta, x, y)
        step *= 2.0
        if abs(f_prev - f) <= tol * (1.0 + abs(f)):
            break
    return theta, f


def _lbfgs(theta0, x, y, lo, hi, max_iter, tol):
    from scipy.optimize import minimize

    def fun(t):
        try:
            return nll_and_grad(t, x, y)
        except GpTrainingError:
            return math.inf, np.zeros_like(t)

    res = minimize(fun, np.clip(theta0, lo, hi), jac=True, method="L-BFGS-B",
                   bounds=list(zip(lo, hi)), options={"maxiter": max_iter, "ftol": tol})
    return res.x, float(res.fun)


def default_init(x: Array, y: Array, vartheta_floor: float) -> GpHyperparams:
    var = x.var(axis=0)
    w = 1.0 / np.where(var > 1e-12, var, 1.0)
    sf = float(y.std()) if y.std() > 0 else 1.0
    return GpHyperparams(w, sf, max(vartheta_floor, 0.01 * sf))


def train_channel(
    x: Array,
    y: Array,
    init: GpHyperparams | None = None,
    restarts: int = 5,
    max_iter: int = 500,
    bounds: TrainingBounds = TrainingBounds(),
    rng: np.random.Generator | None = None,
    method: str = "gd",
    tol: float = 1e-9,
) -> GpHyperparams:
    rng = np.random.default_rng(0) if rng is None else rng
    init = default_init(x, y, bounds.vartheta_floor) if init is None else init
    lo, hi = bounds.arrays(x.shape[1], x, y)
    theta_init = init.to_log(max(bounds.vartheta_floor, 1e-12))
    optimizer = {"gd": _descend, "lbfgs": _lbfgs}[method]
    best_theta, best_f = None, math.inf
    for r in range(max(1, restarts)):
        start = theta_init if r == 0 else theta_init + rng.normal(0.0, 1.0, theta_init.shape)
        try:
            theta, f = optimizer(start, x, y, lo, hi, max_iter, tol)
        except GpTrainingError as exc:
            log.debug("restart %d consumed: %s", r, exc)
            continue
        if math.isfinite(f) and f < best_f:
            best_theta, best_f = theta, f
    if best_theta is None:
        raise GpTrainingError("all restarts failed")
    return GpHyperparams.from_log(best_theta)


def train_gp(
    x: Array,
    y: Array,
    n: int,
    m: int,
    init: GpHyperparams | Sequence[GpHyperparams] | None = None,
    restarts: int = 5,
    max_iter: int = 500,
    bounds: TrainingBounds = TrainingBounds(),
    seed: int = 0,
    method: str = "gd",
    hyper_subset: int | None = None,
) -> GpModel:
    """Fit one GP per output column of ``y`` and condition on all of ``x``.

    With ``hyper_subset`` the hyperparameters are fitted on a seeded random
    subset of that size; the returned model still conditions on every point.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).reshape(len(x), -1)
    if len(x) < 2:
        raise GpConfigurationError("training needs N >= 2")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise GpConfigurationError("training data contains non-finite values")
    if y.shape[1] != n + m:
        raise GpConfigurationError(f"expected {n + m} target columns, got {y.shape[1]}")
    rng = np.random.default_rng(seed)
    if hyper_subset is not None and len(x) > hyper_subset:
        idx = np.sort(rng.choice(len(x), size=hyper_subset, replace=False))
    else:
        idx = np.arange(len(x))
    inits = list(init) if isinstance(init, (list, tuple)) else [init] * y.shape[1]
    hypers = []
    for c in range(y.shape[1]):
        h = train_channel(x[idx], y[idx, c], inits[c], restarts, max_iter, bounds, rng, method)
        log.info("channel %d: sigma_f=%.4g vartheta=%.4g", c, h.sigma_f, h.vartheta)
        hypers.append(h)
    return condition(x, y, hypers, n, m)


# --- error bound -------------------------------------------------------------


@dataclass(frozen=True)
class ErrorBoundParams:
    eta_a: float
    eta_u: float
    kappa_a: Array
    kappa_u: Array
    varsigma: Array
    rkhs_norm_sq: Array
    rkhs_is_surrogate: bool = True


def _kappa(rkhs_sq: float, varsigma: float, n_points: int, eta: float, n_channels: int) -> float:
    log_term = math.log((n_points + 1) / (1.0 - eta ** (1.0 / n_channels)))
    return math.sqrt(2.0 * rkhs_sq + 300.0 * varsigma * log_term**3)


def error_bound_kappa(gp: GpModel, eta: float, eta_u: float | None = None) -> ErrorBoundParams:
    """Probabilistic prediction-error scale per channel.

    The unknown RKHS norm of the residual is replaced by the norm of the
    posterior-mean interpolant, ``alpha^T Kf alpha``.
    """
    eta_u = eta if eta_u is None else eta_u
    for e in (eta, eta_u):
        if not 0.0 < e < 1.0:
            raise GpConfigurationError("eta must lie in (0, 1)")
    varsigma = np.empty(len(gp.channels))
    rkhs = np.empty(len(gp.channels))
    for c, ch in enumerate(gp.channels):
        if ch.hyper.vartheta == 0:
            raise GpConfigurationError("error bound undefined for vartheta = 0")
        kf = gram(ch.hyper, gp.inputs)
        varsigma[c] = 0.5 * float(np.log(np.abs(1.0 + kf / ch.hyper.vartheta**2)).max())
        rkhs[c] = float(ch.alpha @ kf @ ch.alpha)
    n_pts = gp.n_points
    n, m = gp.n, gp.m
    kappa_a = np.array([_kappa(rkhs[i], varsigma[i], n_pts, eta, n) for i in range(n)])
    kappa_u = np.array([_kappa(rkhs[n + j], varsigma[n + j], n_pts, eta_u, m) for j in range(m)])
    return ErrorBoundParams(eta, eta_u, kappa_a, kappa_u, varsigma, rkhs)
