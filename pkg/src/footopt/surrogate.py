"""Force surrogates: a synthetic peel/impact oracle and a GRU trained with DILATE.

The oracle stands in for a force-measurement rig and produces the training
data.  The learned side is a single-layer GRU written directly in numpy, with
hand-derived backpropagation through time, trained with Adam on the DILATE
loss (soft-DTW shape term plus a temporal-distortion term).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .exceptions import DomainError, OracleError, ShapeError, TrainingError, ValidationError
from .geometry import CompositeTrajectory, ControlPolygon, sample

SEQUENCE_LENGTH = 200
VALIDATION_FRACTION = 0.15


# -- synthetic oracle ------------------------------------------------------


@dataclass(frozen=True)
class OracleParams:
    peel_energy: float = 30.0  # J/m^2
    pad_width: float = 0.05  # m
    contact_stiffness: float = 800.0  # N/m
    impact_duration: float = 0.05  # s
    noise_sigma: float = 0.05  # N
    baseline: float = 5.85  # N, added to the impact peak
    seed: int = 0
    adhesive_length: float = 0.05  # m
    peel_regularizer: float = 0.2
    velocity_floor: float = 1e-6  # m/s
    contact_height: float = 0.002  # m above the surface counts as touchdown
    surface_height: float = 0.0

    def __post_init__(self):
        for name in ("peel_energy", "pad_width", "contact_stiffness", "impact_duration",
                     "adhesive_length", "peel_regularizer", "velocity_floor"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"oracle parameter {name} must be positive")
        if self.noise_sigma < 0 or self.baseline < 0 or self.contact_height < 0:
            raise ValidationError("noise_sigma, baseline and contact_height must be non-negative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown oracle field: {sorted(unknown)[0]}")
        return cls(**data)


@dataclass(frozen=True)
class ForceSeries:
    times: np.ndarray
    detachment_force: np.ndarray
    pre_pressure: np.ndarray

    def __post_init__(self):
        n = len(self.times)
        for name in ("times", "detachment_force", "pre_pressure"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise ValidationError(f"{name} must have length {n}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite values")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


def _peel_angles(vel, floor):
    """Peel angle per sample; stationary samples borrow the next moving direction."""
    vx, vz = vel[:, 0], vel[:, 2]
    theta = np.arctan2(vz, np.maximum(vx, floor))
    moving = np.hypot(vx, vz) > 0
    if not moving.any():
        return np.zeros_like(theta)
    nxt = np.flatnonzero(moving)
    # index of the next moving sample at or after each position
    pos = np.searchsorted(nxt, np.arange(len(theta)))
    pos = np.minimum(pos, len(nxt) - 1)
    return theta[nxt[pos]]


def detachment_force(traj, params):
    """Noise-free Kendall-style peel force over the detachment segment."""
    T1 = traj.durations[0]
    x = traj.position[:, 0]
    l_f = params.adhesive_length
    attached = np.maximum(0.0, l_f - (x - x[0]))
    theta = _peel_angles(traj.velocity, params.velocity_floor)
    kendall = params.pad_width * params.peel_energy / (1.0 - np.cos(theta) + params.peel_regularizer)
    active = (attached > 0) & (traj.times <= T1)
    # stays off once the strip has fully released
    active &= np.cumprod(active).astype(bool)
    return np.where(active, kendall * attached / l_f, 0.0)


def touchdown(traj, params):
    """Time and interpolated vertical speed of first contact after the apex."""
    z = traj.position[:, 2]
    vz = traj.velocity[:, 2]
    thr = params.surface_height + params.contact_height
    tol = 1e-12 * max(1.0, abs(thr))
    if z[-1] > thr + tol:
        raise OracleError(f"trajectory ends at z={z[-1]:.6g}, never returns to the surface")
    apex = int(np.argmax(z))
    below = np.flatnonzero(z[apex:] <= thr + tol)
    k = apex + int(below[0])
    if k == apex or z[k] == z[k - 1]:
        return float(traj.times[k]), float(vz[k])
    w = (z[k - 1] - thr) / (z[k - 1] - z[k])
    w = min(max(w, 0.0), 1.0)
    t = (1 - w) * traj.times[k - 1] + w * traj.times[k]
    return float(t), float((1 - w) * vz[k - 1] + w * vz[k])


def pre_pressure(traj, params):
    """Noise-free half-sine impact pulse starting at touchdown."""
    t_touch, vz = touchdown(traj, params)
    tau = params.impact_duration
    peak = params.contact_stiffness * abs(vz) * tau + params.baseline
    s = traj.times - t_touch
    inside = (s >= 0) & (s <= tau)
    return np.where(inside, peak * np.sin(np.pi * np.clip(s / tau, 0.0, 1.0)), 0.0)


def oracle_forces(traj, params=None, seed=None):
    """Synthetic detachment force and pre-pressure for one trajectory."""
    params = OracleParams() if params is None else params
    fd = detachment_force(traj, params)
    fp = pre_pressure(traj, params)
    if params.noise_sigma > 0:
        rng = np.random.default_rng(params.seed if seed is None else seed)
        fd = np.clip(fd + rng.normal(0.0, params.noise_sigma, fd.shape), 0.0, None)
        fp = np.clip(fp + rng.normal(0.0, params.noise_sigma, fp.shape), 0.0, None)
    return ForceSeries(traj.times, fd, fp)


# -- soft-DTW / DILATE -----------------------------------------------------


def _diagonals(n, m):
    out = []
    for d in range(2, n + m + 1):
        i = np.arange(max(1, d - m), min(n, d - 1) + 1)
        out.append((i, d - i))
    return out


def pairwise_sq(a, b):
    """Squared-Euclidean cost matrices for batches ``(B, n[, k])``, ``(B, m[, k])``."""
    if a.ndim == 2:
        a = a[..., None]
    if b.ndim == 2:
        b = b[..., None]
    return ((a[:, :, None, :] - b[:, None, :, :]) ** 2).sum(-1)


def _softdtw_forward(D, gamma):
    """Accumulated cost ``R (B, n+2, m+2)`` and predecessor weights ``W (B, 3, n+2, m+2)``.

    Predecessor order: diagonal, up ``(i-1, j)``, left ``(i, j-1)``.
    """
    B, n, m = D.shape
    R = np.full((B, n + 2, m + 2), np.inf)
    R[:, 0, 0] = 0.0
    W = np.zeros((B, 3, n + 2, m + 2))
    for i, j in _diagonals(n, m):
        r = np.stack([R[:, i - 1, j - 1], R[:, i - 1, j], R[:, i, j - 1]], axis=1)
        rmin = r.min(axis=1, keepdims=True)
        e = np.exp(-(r - rmin) / gamma)
        s = e.sum(axis=1, keepdims=True)
        R[:, i, j] = D[:, i - 1, j - 1] + rmin[:, 0] - gamma * np.log(s[:, 0])
        W[:, :, i, j] = e / s
    return R, W


def _alignment(W, n, m):
    """Expected alignment ``E = dR[n,m]/dD`` by the backward recursion."""
    B = W.shape[0]
    E = np.zeros((B, n + 2, m + 2))
    E[:, n, m] = 1.0
    for i, j in reversed(_diagonals(n, m)[:-1]):
        E[:, i, j] = (W[:, 0, i + 1, j + 1] * E[:, i + 1, j + 1]
                      + W[:, 1, i + 1, j] * E[:, i + 1, j]
                      + W[:, 2, i, j + 1] * E[:, i, j + 1])
    return E


def _alignment_directional(W, E, Z, gamma):
    """Directional derivative of ``E`` along cost perturbation ``Z (B, n, m)``.

    This is the Hessian of soft-DTW applied to ``Z``; with ``Z`` the
    time-distortion penalty it is the gradient of ``<E, Z>`` w.r.t. costs.
    """
    B, n, m = Z.shape
    diags = _diagonals(n, m)
    Rdot = np.zeros((B, n + 2, m + 2))
    for i, j in diags:
        Rdot[:, i, j] = (Z[:, i - 1, j - 1]
                         + W[:, 0, i, j] * Rdot[:, i - 1, j - 1]
                         + W[:, 1, i, j] * Rdot[:, i - 1, j]
                         + W[:, 2, i, j] * Rdot[:, i, j - 1])
    Zp = np.zeros((B, n + 2, m + 2))
    Zp[:, 1:n + 1, 1:m + 1] = Z
    base = (Rdot - Zp)[:, None]
    preds = np.zeros((B, 3, n + 2, m + 2))
    preds[:, 0, 1:, 1:] = Rdot[:, :-1, :-1]
    preds[:, 1, 1:, :] = Rdot[:, :-1, :]
    preds[:, 2, :, 1:] = Rdot[:, :, :-1]
    Wdot = W * (base - preds) / gamma
    Edot = np.zeros((B, n + 2, m + 2))
    for i, j in reversed(diags[:-1]):
        Edot[:, i, j] = (Wdot[:, 0, i + 1, j + 1] * E[:, i + 1, j + 1]
                         + W[:, 0, i + 1, j + 1] * Edot[:, i + 1, j + 1]
                         + Wdot[:, 1, i + 1, j] * E[:, i + 1, j]
                         + W[:, 1, i + 1, j] * Edot[:, i + 1, j]
                         + Wdot[:, 2, i, j + 1] * E[:, i, j + 1]
                         + W[:, 2, i, j + 1] * Edot[:, i, j + 1])
    return Edot[:, 1:n + 1, 1:m + 1]


@njit(cache=True)
def _softdtw_kernel(D, Zp, gamma, directional):
    """Compiled soft-DTW forward, alignment and (optionally) its directional derivative.

    Same recursions as the array versions above, run cell by cell.  Returns
    ``(value, E, Edot)`` with ``E``/``Edot`` of shape ``(B, n, m)``.
    """
    B, n, m = D.shape
    value = np.empty(B)
    E_out = np.zeros((B, n, m))
    Ed_out = np.zeros((B, n, m))
    R = np.empty((n + 2, m + 2))
    W = np.zeros((3, n + 2, m + 2))
    E = np.zeros((n + 2, m + 2))
    Rd = np.zeros((n + 2, m + 2))
    Ed = np.zeros((n + 2, m + 2))
    for b in range(B):
        R[:, :] = np.inf
        R[0, 0] = 0.0
        W[:, :, :] = 0.0
        for i in range(1, n + 1):
            for j in range(1, m + 1):
                r0, r1, r2 = R[i - 1, j - 1], R[i - 1, j], R[i, j - 1]
                rmin = min(r0, min(r1, r2))
                e0 = np.exp(-(r0 - rmin) / gamma)
                e1 = np.exp(-(r1 - rmin) / gamma)
                e2 = np.exp(-(r2 - rmin) / gamma)
                s = e0 + e1 + e2
                R[i, j] = D[b, i - 1, j - 1] + rmin - gamma * np.log(s)
                W[0, i, j], W[1, i, j], W[2, i, j] = e0 / s, e1 / s, e2 / s
        value[b] = R[n, m]
        E[:, :] = 0.0
        E[n, m] = 1.0
        for i in range(n, 0, -1):
            for j in range(m, 0, -1):
                if i == n and j == m:
                    continue
                E[i, j] = (W[0, i + 1, j + 1] * E[i + 1, j + 1] + W[1, i + 1, j] * E[i + 1, j]
                           + W[2, i, j + 1] * E[i, j + 1])
        E_out[b] = E[1:n + 1, 1:m + 1]
        if not directional:
            continue
        Rd[:, :] = 0.0
        for i in range(1, n + 1):
            for j in range(1, m + 1):
                Rd[i, j] = (Zp[i, j] + W[0, i, j] * Rd[i - 1, j - 1] + W[1, i, j] * Rd[i - 1, j]
                            + W[2, i, j] * Rd[i, j - 1])
        Ed[:, :] = 0.0
        for i in range(n, 0, -1):
            for j in range(m, 0, -1):
                if i == n and j == m:
                    continue
                acc = 0.0
                w = W[0, i + 1, j + 1]
                if w > 0.0:
                    wd = w * (Rd[i + 1, j + 1] - Zp[i + 1, j + 1] - Rd[i, j]) / gamma
                    acc += wd * E[i + 1, j + 1] + w * Ed[i + 1, j + 1]
                w = W[1, i + 1, j]
                if w > 0.0:
                    wd = w * (Rd[i + 1, j] - Zp[i + 1, j] - Rd[i, j]) / gamma
                    acc += wd * E[i + 1, j] + w * Ed[i + 1, j]
                w = W[2, i, j + 1]
                if w > 0.0:
                    wd = w * (Rd[i, j + 1] - Zp[i, j + 1] - Rd[i, j]) / gamma
                    acc += wd * E[i, j + 1] + w * Ed[i, j + 1]
                Ed[i, j] = acc
        Ed_out[b] = Ed[1:n + 1, 1:m + 1]
    return value, E_out, Ed_out


def softdtw_reference(D, gamma, Z=None):
    """Array (anti-diagonal) route: ``(value, E, Edot or None)``."""
    B, n, m = D.shape
    R, W = _softdtw_forward(D, gamma)
    E = _alignment(W, n, m)
    Ed = None if Z is None else _alignment_directional(W, E, np.broadcast_to(Z, D.shape), gamma)
    return R[:, n, m], E[:, 1:n + 1, 1:m + 1], Ed


def softdtw_compiled(D, gamma, Z=None):
    """Compiled route with the same contract as :func:`softdtw_reference`."""
    B, n, m = D.shape
    Zp = np.zeros((n + 2, m + 2))
    if Z is not None:
        Zp[1:n + 1, 1:m + 1] = Z
    value, E, Ed = _softdtw_kernel(np.ascontiguousarray(D, dtype=float), Zp, float(gamma), Z is not None)
    return value, E, (Ed if Z is not None else None)


def _check_gamma(gamma):
    if not gamma > 0:
        raise DomainError(f"gamma must be positive, got {gamma}")


def _as_batch(a):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or len(a) == 0:
        raise ShapeError("sequence must be non-empty with shape (n,) or (n, k)")
    return a[None]


def soft_dtw(a, b, gamma):
    """Soft-DTW discrepancy between two sequences under squared-Euclidean cost."""
    _check_gamma(gamma)
    A, Bq = _as_batch(a), _as_batch(b)
    if A.shape[2] != Bq.shape[2]:
        raise ShapeError("sequences must share their feature dimension")
    D = pairwise_sq(A, Bq)
    return float(softdtw_compiled(D, gamma)[0][0])


def time_penalty(n, m):
    """Squared index offset ``(i - j)^2`` normalised by ``n*m``."""
    i = np.arange(n)[:, None]
    j = np.arange(m)[None, :]
    return ((i - j) ** 2).astype(float) / (n * m)


def dilate_batch(pred, target, alpha=0.5, gamma=0.01, grad=True):
    """DILATE loss for ``(B, n)`` predictions against ``(B, n)`` targets.

    Returns ``(loss, shape, temporal, dloss_dpred)``; the first three have
    shape ``(B,)`` and the gradient is ``None`` unless requested.
    """
    _check_gamma(gamma)
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must lie in [0, 1], got {alpha}")
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape or pred.ndim != 2:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} must match")
    B, n = pred.shape
    D = (pred[:, :, None] - target[:, None, :]) ** 2
    Omega = time_penalty(n, n)
    need_dir = grad and alpha < 1.0
    shape, E, Ed = softdtw_compiled(D, gamma, Omega if need_dir else None)
    temporal = np.einsum("bij,ij->b", E, Omega)
    loss = alpha * shape + (1.0 - alpha) * temporal
    if not grad:
        return loss, shape, temporal, None
    G = alpha * E if Ed is None else alpha * E + (1.0 - alpha) * Ed
    dpred = 2.0 * np.einsum("bij,bij->bi", G, pred[:, :, None] - target[:, None, :])
    return loss, shape, temporal, dpred


def dilate_terms(pred, target, alpha=0.5, gamma=0.01):
    """``(loss, shape, temporal)`` for a single pair of equal-length sequences."""
    p = np.asarray(pred, dtype=float).reshape(1, -1)
    t = np.asarray(target, dtype=float).reshape(1, -1)
    if p.shape != t.shape:
        raise ShapeError(f"lengths differ: {p.shape[1]} vs {t.shape[1]}")
    loss, shape, temporal, _ = dilate_batch(p, t, alpha, gamma, grad=False)
    return float(loss[0]), float(shape[0]), float(temporal[0])


def dilate_loss(pred, target, alpha=0.5, gamma=0.01):
    return dilate_terms(pred, target, alpha, gamma)[0]


def mse_batch(pred, target, grad=True):
    err = pred - target
    loss = np.mean(err**2, axis=1)
    return loss, loss, np.zeros_like(loss), (2.0 * err / pred.shape[1]) if grad else None


# -- GRU -------------------------------------------------------------------


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x, axis):
        mean = np.mean(x, axis=axis)
        std = np.std(x, axis=axis)
        std = np.where(std > 1e-12, std, 1.0)
        return cls(np.atleast_1d(mean), np.atleast_1d(std))

    def transform(self, x):
        return (x - self.mean) / self.std

    def inverse(self, x):
        return x * self.std + self.mean


@dataclass
class GruModel:
    """Single-layer GRU with a per-step linear readout.

    Gate blocks are stacked as (update, reset, candidate) along the last axis
    of ``W`` (input weights), ``U`` (recurrent weights) and ``b``.
    """

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray
    Wo: np.ndarray
    bo: np.ndarray
    x_norm: Normalizer | None = None
    y_norm: Normalizer | None = None
    n_steps: int = SEQUENCE_LENGTH

    PARAMS = ("W", "U", "b", "Wo", "bo")

    def __post_init__(self):
        d, h3 = self.W.shape
        H = h3 // 3
        if h3 != 3 * H or self.U.shape != (H, 3 * H) or self.b.shape != (3 * H,):
            raise ShapeError("inconsistent gate weight shapes")
        if self.Wo.shape[0] != H or self.bo.shape != (self.Wo.shape[1],):
            raise ShapeError("inconsistent readout shapes")

    @property
    def input_size(self):
        return self.W.shape[0]

    @property
    def hidden_size(self):
        return self.U.shape[0]

    @property
    def output_size(self):
        return self.Wo.shape[1]

    @classmethod
    def init(cls, input_size, hidden_size, output_size, rng):
        k = 1.0 / math.sqrt(hidden_size)
        u = lambda *s: rng.uniform(-k, k, s)  # noqa: E731
        return cls(u(input_size, 3 * hidden_size), u(hidden_size, 3 * hidden_size),
                   u(3 * hidden_size), u(hidden_size, output_size), u(output_size))

    @classmethod
    def zeros(cls, input_size, hidden_size, output_size):
        z = np.zeros
        return cls(z((input_size, 3 * hidden_size)), z((hidden_size, 3 * hidden_size)),
                   z(3 * hidden_size), z((hidden_size, output_size)), z(output_size))

    def params(self):
        return [getattr(self, p) for p in self.PARAMS]

    def to_dict(self):
        out = {p: getattr(self, p).tolist() for p in self.PARAMS}
        out["shapes"] = {p: list(getattr(self, p).shape) for p in self.PARAMS}
        out["n_steps"] = self.n_steps
        for name in ("x_norm", "y_norm"):
            nm = getattr(self, name)
            out[name] = None if nm is None else {"mean": nm.mean.tolist(), "std": nm.std.tolist()}
        return out

    @classmethod
    def from_dict(cls, data):
        try:
            arrs = {p: np.asarray(data[p], dtype=float).reshape(data["shapes"][p]) for p in cls.PARAMS}
            norms = {}
            for name in ("x_norm", "y_norm"):
                nm = data.get(name)
                norms[name] = None if nm is None else Normalizer(
                    np.asarray(nm["mean"], dtype=float), np.asarray(nm["std"], dtype=float))
                if nm is not None and not (np.all(np.isfinite(norms[name].mean))
                                           and np.all(np.isfinite(norms[name].std))):
                    raise ValidationError(f"non-finite {name} statistics")
            return cls(**arrs, **norms, n_steps=int(data.get("n_steps", SEQUENCE_LENGTH)))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"malformed checkpoint: {exc}") from exc


def gru_forward(model, x, return_cache=False):
    """Run the GRU over ``x`` of shape ``(T, d)`` or ``(B, T, d)``.

    Returns outputs of shape ``(T, k)`` / ``(B, T, k)``.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1] < 1:
        raise ShapeError(f"input must be (T, d) or (B, T, d) with T >= 1, got {x.shape}")
    if x.shape[2] != model.input_size:
        raise ShapeError(f"input dimension {x.shape[2]} != model input size {model.input_size}")
    Bn, T, _ = x.shape
    H = model.hidden_size
    Uz, Ur, Uh = model.U[:, :H], model.U[:, H:2 * H], model.U[:, 2 * H:]
    xw = x @ model.W + model.b  # (B, T, 3H)
    h = np.zeros((Bn, H))
    hs = np.zeros((Bn, T + 1, H))
    zs = np.zeros((Bn, T, H))
    rs = np.zeros((Bn, T, H))
    cs = np.zeros((Bn, T, H))
    for t in range(T):
        z = _sigmoid(xw[:, t, :H] + h @ Uz)
        r = _sigmoid(xw[:, t, H:2 * H] + h @ Ur)
        c = np.tanh(xw[:, t, 2 * H:] + (r * h) @ Uh)
        h = (1.0 - z) * h + z * c
        hs[:, t + 1], zs[:, t], rs[:, t], cs[:, t] = h, z, r, c
    y = hs[:, 1:] @ model.Wo + model.bo
    y = y[0] if single else y
    if return_cache:
        return y, (x, hs, zs, rs, cs)
    return y


def gru_backward(model, cache, dy):
    """Gradients of a loss w.r.t. every parameter, given ``dL/dy (B, T, k)``."""
    x, hs, zs, rs, cs = cache
    Bn, T, _ = x.shape
    H = model.hidden_size
    Uz, Ur, Uh = model.U[:, :H], model.U[:, H:2 * H], model.U[:, 2 * H:]
    dWo = np.einsum("bth,btk->hk", hs[:, 1:], dy)
    dbo = dy.sum(axis=(0, 1))
    dh_out = dy @ model.Wo.T  # (B, T, H)
    da = np.zeros((Bn, T, 3 * H))
    dU = np.zeros_like(model.U)
    dh = np.zeros((Bn, H))
    for t in reversed(range(T)):
        hp, z, r, c = hs[:, t], zs[:, t], rs[:, t], cs[:, t]
        dh = dh + dh_out[:, t]
        dz = dh * (c - hp)
        dc = dh * z
        dhp = dh * (1.0 - z)
        dac = dc * (1.0 - c * c)
        drh = dac @ Uh.T
        dr = drh * hp
        dhp += drh * r
        daz = dz * z * (1.0 - z)
        dar = dr * r * (1.0 - r)
        dhp += daz @ Uz.T + dar @ Ur.T
        dU[:, :H] += hp.T @ daz
        dU[:, H:2 * H] += hp.T @ dar
        dU[:, 2 * H:] += (r * hp).T @ dac
        da[:, t, :H], da[:, t, H:2 * H], da[:, t, 2 * H:] = daz, dar, dac
        dh = dhp
    dW = np.einsum("btd,btg->dg", x, da)
    db = da.sum(axis=(0, 1))
    return [dW, dU, db, dWo, dbo]


class Adam:
    def __init__(self, params, lr=5e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- training --------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 5e-3
    lr_decay: float = 0.97
    hidden_size: int = 64
    alpha: float = 0.5
    gamma: float = 0.01
    loss: str = "dilate"
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.hidden_size < 1:
            raise ValidationError("epochs, batch_size and hidden_size must be positive")
        if self.loss not in ("dilate", "mse"):
            raise ValidationError(f"unknown loss {self.loss!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError("alpha must lie in [0, 1]")
        if not self.gamma > 0 or not self.learning_rate > 0:
            raise ValidationError("gamma and learning_rate must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown training field: {sorted(unknown)[0]}")
        return cls(**data)


def _batch_loss(cfg, pred, target, grad=True):
    if cfg.loss == "mse":
        return mse_batch(pred, target, grad)
    return dilate_batch(pred, target, cfg.alpha, cfg.gamma, grad)


def evaluate_loss(model, X, y, cfg, batch_size=64):
    """Mean per-item loss in normalised target space."""
    losses = []
    for s in range(0, len(X), batch_size):
        xb = model.x_norm.transform(X[s:s + batch_size])
        yb = model.y_norm.transform(y[s:s + batch_size])
        pred = gru_forward(model, xb)[..., 0]
        losses.append(_batch_loss(cfg, pred, yb, grad=False)[0])
    return float(np.mean(np.concatenate(losses)))


def fit_gru(X, y, cfg, X_val=None, y_val=None, callback=None):
    """Train one GRU on features ``X (N, T, d)`` and targets ``y (N, T)``.

    Returns ``(model, history)``; ``history`` holds per-epoch mean training
    loss and, when validation data is given, validation loss plus the
    untrained model's validation loss under ``initial_val_loss``.
    ``callback(epoch, history)`` returning true stops training early.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 3 or y.shape != X.shape[:2]:
        raise ShapeError(f"features {X.shape} and targets {y.shape} do not align")
    rng = np.random.default_rng(cfg.seed)
    model = GruModel.init(X.shape[2], cfg.hidden_size, 1, rng)
    model.x_norm = Normalizer.fit(X, axis=(0, 1))
    model.y_norm = Normalizer.fit(y, axis=None)
    model.n_steps = X.shape[1]
    Xn = model.x_norm.transform(X)
    yn = model.y_norm.transform(y)
    opt = Adam(model.params(), cfg.learning_rate)
    history = {"epoch": [], "train_loss": [], "val_loss": []}
    has_val = X_val is not None and len(X_val)
    if has_val:
        X_val, y_val = np.asarray(X_val, float), np.asarray(y_val, float)
        history["initial_val_loss"] = evaluate_loss(model, X_val, y_val, cfg)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(X))
        batch_losses = []
        for s in range(0, len(X), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            out, cache = gru_forward(model, Xn[idx], return_cache=True)
            loss, _, _, dpred = _batch_loss(cfg, out[..., 0], yn[idx])
            if not np.all(np.isfinite(loss)):
                raise TrainingError(f"non-finite loss at epoch {epoch}", epoch)
            grads = gru_backward(model, cache, dpred[..., None] / len(idx))
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if not math.isfinite(norm):
                raise TrainingError(f"non-finite gradient at epoch {epoch}", epoch)
            if cfg.clip_norm and norm > cfg.clip_norm:
                grads = [g * (cfg.clip_norm / norm) for g in grads]
            opt.step(model.params(), grads)
            batch_losses.append(loss)
        history["epoch"].append(epoch)
        history["train_loss"].append(float(np.mean(np.concatenate(batch_losses))))
        if has_val:
            val = evaluate_loss(model, X_val, y_val, cfg)
            if not math.isfinite(val):
                raise TrainingError(f"non-finite validation loss at epoch {epoch}", epoch)
            history["val_loss"].append(val)
        opt.lr *= cfg.lr_decay
        if callback is not None and callback(epoch, history):
            break
    return model, history


def resample(series, n):
    """Linear resampling of ``(T, ...)`` along the first axis to ``n`` points."""
    series = np.asarray(series, dtype=float)
    T = len(series)
    if T == n:
        return series
    src = np.linspace(0.0, 1.0, T)
    dst = np.linspace(0.0, 1.0, n)
    flat = series.reshape(T, -1)
    out = np.stack([np.interp(dst, src, flat[:, k]) for k in range(flat.shape[1])], axis=1)
    return out.reshape((n,) + series.shape[1:])


def predict(model, trajectory):
    """Denormalised force prediction with one value per trajectory sample."""
    if model.x_norm is None or model.y_norm is None:
        raise NotFittedError("model has no normalisation statistics")
    feats = trajectory.features if isinstance(trajectory, CompositeTrajectory) else np.asarray(trajectory)
    n = len(feats)
    if n != model.n_steps:
        warnings.warn(f"resampling {n}-step input to the {model.n_steps}-step training grid",
                      RuntimeWarning, stacklevel=2)
        feats = resample(feats, model.n_steps)
    out = model.y_norm.inverse(gru_forward(model, model.x_norm.transform(feats))[:, 0])
    return resample(out, n) if n != model.n_steps else out


def predict_batch(model, X):
    """Predictions for features ``(N, T, d)`` already on the training grid."""
    X = np.asarray(X, dtype=float)
    if X.shape[1] != model.n_steps:
        raise ShapeError(f"batch must be on the {model.n_steps}-step training grid")
    return model.y_norm.inverse(gru_forward(model, model.x_norm.transform(X))[..., 0])


# -- dataset ---------------------------------------------------------------


@dataclass
class DatasetItem:
    polygon: ControlPolygon
    trajectory: CompositeTrajectory
    forces: ForceSeries

    def to_json(self):
        return json.dumps({
            "polygon": self.polygon.to_dict(),
            "times": self.trajectory.times.tolist(),
            "features": self.trajectory.features.tolist(),
            "detachment_force": self.forces.detachment_force.tolist(),
            "pre_pressure": self.forces.pre_pressure.tolist(),
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line):
        try:
            data = json.loads(line)
            poly = ControlPolygon.from_dict(data["polygon"])
            traj = sample(poly, len(data["times"]))
            forces = ForceSeries(np.asarray(data["times"]), np.asarray(data["detachment_force"]),
                                 np.asarray(data["pre_pressure"]))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ValidationError(f"malformed dataset line: {exc}") from exc
        return cls(poly, traj, forces)


def split_indices(n, validation_fraction=VALIDATION_FRACTION, seed=0):
    if n < 2:
        raise ValidationError("need at least 2 items to split")
    n_val = min(max(1, int(round(validation_fraction * n))), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


@dataclass
class Dataset:
    items: list
    train_idx: np.ndarray = field(default=None)
    val_idx: np.ndarray = field(default=None)
    validation_fraction: float = VALIDATION_FRACTION
    seed: int = 0

    def __post_init__(self):
        if self.train_idx is None:
            self.train_idx, self.val_idx = split_indices(len(self.items), self.validation_fraction, self.seed)

    def __len__(self):
        return len(self.items)

    def arrays(self, which="all"):
        """``(X, y_detach, y_prepressure)`` stacked over the chosen split."""
        idx = {"all": np.arange(len(self.items)), "train": self.train_idx, "val": self.val_idx}[which]
        X = np.stack([self.items[k].trajectory.features for k in idx])
        fd = np.stack([self.items[k].forces.detachment_force for k in idx])
        fp = np.stack([self.items[k].forces.pre_pressure for k in idx])
        return X, fd, fp

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for item in self.items:
                fh.write(item.to_json() + "\n")

    @classmethod
    def read_jsonl(cls, path, **kw):
        with open(path) as fh:
            items = [DatasetItem.from_json(line) for line in fh if line.strip()]
        return cls(items, **kw)


def generate_dataset(polygons, params=None, n_steps=SEQUENCE_LENGTH, seed=0, **kw):
    """Drive every polygon through the oracle; each item gets its own noise stream."""
    params = OracleParams() if params is None else params
    seeds = np.random.SeedSequence(seed).spawn(len(polygons))
    items = []
    for poly, ss in zip(polygons, seeds):
        traj = sample(poly, n_steps)
        items.append(DatasetItem(poly, traj, oracle_forces(traj, params, np.random.default_rng(ss))))
    return Dataset(items, seed=seed, **kw)


def train(dataset, cfg=None):
    """Train the detachment and pre-pressure models; returns ``(fd, fp, history)``."""
    cfg = TrainConfig() if cfg is None else cfg
    if len(dataset) < 20:
        raise ValidationError(f"need at least 20 items to train, got {len(dataset)}")
    Xt, fdt, fpt = dataset.arrays("train")
    Xv, fdv, fpv = dataset.arrays("val")
    fd, hd = fit_gru(Xt, fdt, cfg, Xv, fdv)
    fp, hp = fit_gru(Xt, fpt, cfg, Xv, fpv)
    return fd, fp, {"detachment": hd, "pre_pressure": hp}


def save_checkpoint(model, path, config=None):
    payload = {"model": model.to_dict(), "config": None if config is None else config.to_dict()}
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_checkpoint(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"checkpoint is not valid JSON: {exc}") from exc
    if not isinstance(data, dict) or "model" not in data:
        raise ValidationError("checkpoint has no model section")
    return GruModel.from_dict(data["model"])


# -- estimator -------------------------------------------------------------


class GruForceRegressor(RegressorMixin, BaseEstimator):
    """Sequence-to-sequence force regressor with the sklearn estimator API.

    ``fit(X, y)`` takes features ``(N, T, 6)`` and force series ``(N, T)``;
    ``predict(X)`` returns ``(N, T)``.  If ``validation_fraction`` is positive
    a seeded hold-out is carved out and its loss tracked in ``history_``.
    """

    def __init__(self, hidden_size=64, epochs=50, batch_size=32, learning_rate=5e-3, lr_decay=0.97,
                 alpha=0.5, gamma=0.01, loss="dilate", clip_norm=5.0, validation_fraction=0.0,
                 seed=0):
        self.hidden_size = hidden_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.alpha = alpha
        self.gamma = gamma
        self.loss = loss
        self.clip_norm = clip_norm
        self.validation_fraction = validation_fraction
        self.seed = seed

    def _config(self):
        return TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.lr_decay,
                           self.hidden_size, self.alpha, self.gamma, self.loss, self.clip_norm, self.seed)

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if X.ndim != 3 or y.shape != X.shape[:2]:
            raise ShapeError(f"expected X (N, T, d) and y (N, T), got {X.shape} and {y.shape}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValidationError("inputs contain non-finite values")
        cfg = self._config()
        if self.validation_fraction > 0:
            tr, va = split_indices(len(X), self.validation_fraction, self.seed)
            self.model_, self.history_ = fit_gru(X[tr], y[tr], cfg, X[va], y[va])
        else:
            self.model_, self.history_ = fit_gru(X, y, cfg)
        self.n_features_in_ = X.shape[2]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = np.asarray(X, dtype=float)
        if X.ndim == 2:
            return predict(self.model_, X)
        if X.shape[1] == self.model_.n_steps:
            return predict_batch(self.model_, X)
        return np.stack([predict(self.model_, x) for x in X])

    def score(self, X, y, sample_weight=None):
        """Negative mean training-objective loss (higher is better)."""
        check_is_fitted(self, "model_")
        return -evaluate_loss(self.model_, np.asarray(X, float), np.asarray(y, float), self._config())

    def __call__(self, trajectory):
        check_is_fitted(self, "model_")
        return predict(self.model_, trajectory)
