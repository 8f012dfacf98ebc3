"""Lorentz (hyperboloid) model primitives with curvature surrogate ``K``.

Points are arrays whose last axis holds ``[time, space_1, ..., space_n]`` and
satisfy ``<x, x>_L = -K`` with ``time > 0``. Tangent vectors share the same
layout. Every function accepts numpy arrays or :class:`~latte.autograd.Tensor`
objects; with plain arrays in, plain arrays come out, and with any Tensor in,
a Tensor comes out so gradients flow.
"""

from __future__ import annotations

import functools
import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor, as_tensor

DEFAULT_K = 1.0


def _has_tensor(values) -> bool:
    for v in values:
        if isinstance(v, Tensor):
            return True
        if isinstance(v, (list, tuple)) and any(isinstance(e, Tensor) for e in v):
            return True
    return False


def dual(fn):
    """Return ndarray results for ndarray inputs and Tensor results otherwise."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        out = fn(*args, **kwargs)
        if _has_tensor(args) or _has_tensor(kwargs.values()):
            return out
        if isinstance(out, Tensor):
            return out.data
        return out

    return wrapper


def check_curvature(K) -> float:
    K = float(K)
    if not (math.isfinite(K) and K > 0):
        raise ValueError(f"curvature K must be positive and finite, got {K}")
    return K


def time_part(x: Tensor) -> Tensor:
    return x[..., :1]


def space_part(x: Tensor) -> Tensor:
    return x[..., 1:]


def origin(dim: int, K: float = DEFAULT_K, dtype=np.float64) -> np.ndarray:
    """The hyperboloid origin ``(sqrt(K), 0, ..., 0)`` with ``dim`` space components."""
    o = np.zeros(dim + 1, dtype=dtype)
    o[0] = math.sqrt(check_curvature(K))
    return o


def _inner(x: Tensor, y: Tensor, keepdims: bool = False) -> Tensor:
    prod = x * y
    out = prod[..., 1:].sum(axis=-1, keepdims=True) - prod[..., :1]
    return out if keepdims else out[..., 0]


@dual
def lorentz_inner(x, y, keepdims: bool = False):
    """``-x_t y_t + x_s . y_s`` over the last axis."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape[-1] != y.shape[-1]:
        raise ValueError(f"ambient dimension mismatch: {x.shape[-1]} vs {y.shape[-1]}")
    if x.shape[-1] < 2:
        raise ValueError("ambient dimension must be at least 2")
    return _inner(x, y, keepdims)


@dual
def lift_to_manifold(space, K: float = DEFAULT_K):
    """Attach the time component ``sqrt(K + |space|^2)``."""
    K = check_curvature(K)
    space = as_tensor(space)
    if not np.all(np.isfinite(space.data)):
        raise ValueError("lift_to_manifold received non-finite input")
    t = ag.sqrt(ag.square(space).sum(axis=-1, keepdims=True) + K)
    return ag.concat([t, space], axis=-1)


def _lift(space: Tensor, K: float) -> Tensor:
    # unchecked variant for internal hot paths
    t = ag.sqrt(ag.square(space).sum(axis=-1, keepdims=True) + K)
    return ag.concat([t, space], axis=-1)


@dual
def exp_map(x, v, K: float = DEFAULT_K, check: bool = True):
    """``cosh(a) x + sinh(a) v / a`` with ``a = |v|_L / sqrt(K)``."""
    K = check_curvature(K)
    x, v = as_tensor(x), as_tensor(v)
    if check:
        tang = np.abs(_inner(x.detach(), v.detach()).data)
        scale = np.maximum(1.0, np.abs(x.data).max(axis=-1) * np.abs(v.data).max(axis=-1))
        if np.any(tang > 1e-6 * scale):
            raise ValueError("v is not tangent at x")
    s = _inner(v, v, keepdims=True) * (1.0 / K)
    return ag.cosh_sqrt(s) * x + ag.sinhc_sqrt(s) * v


@dual
def log_map(x, y, K: float = DEFAULT_K):
    """``acosh(b) / sqrt(b^2 - 1) (y - b x)`` with ``b = -<x, y>_L / K``."""
    K = check_curvature(K)
    x, y = as_tensor(x), as_tensor(y)
    beta = _inner(x, y, keepdims=True) * (-1.0 / K)
    return ag.acosh_ratio(beta) * (y - beta * x)


@dual
def expmap0(v_space, K: float = DEFAULT_K):
    """Exponential map at the origin for a tangent vector given by its space part."""
    K = check_curvature(K)
    v = as_tensor(v_space)
    s = ag.square(v).sum(axis=-1, keepdims=True) * (1.0 / K)
    return ag.concat([ag.cosh_sqrt(s) * math.sqrt(K), ag.sinhc_sqrt(s) * v], axis=-1)


@dual
def logmap0(y, K: float = DEFAULT_K):
    """Space part of the logarithmic map at the origin (its time part is zero)."""
    K = check_curvature(K)
    y = as_tensor(y)
    beta = y[..., :1] * (1.0 / math.sqrt(K))
    return ag.acosh_ratio(beta) * y[..., 1:]


@dual
def geodesic_distance(x, y, K: float = DEFAULT_K):
    """``sqrt(K) acosh(-<x, y>_L / K)``, argument clamped to at least 1."""
    K = check_curvature(K)
    x, y = as_tensor(x), as_tensor(y)
    return ag.acosh_clamped(_inner(x, y) * (-1.0 / K)) * math.sqrt(K)


@dual
def squared_lorentz_distance(x, y, K: float = DEFAULT_K):
    """``-2K - 2 <x, y>_L``."""
    K = check_curvature(K)
    x, y = as_tensor(x), as_tensor(y)
    return _inner(x, y) * -2.0 - 2.0 * K


@dual
def lorentz_centroid(points, weights=None, K: float = DEFAULT_K):
    """Weighted centroid ``sqrt(K) s / sqrt(|<s, s>_L|)`` with ``s = sum_i w_i x_i``.

    ``points`` is (..., m, n+1); ``weights`` broadcasts against (..., m) and
    defaults to uniform.
    """
    K = check_curvature(K)
    points = as_tensor(points)
    if points.ndim < 2 or points.shape[-2] < 1:
        raise ValueError("centroid needs at least one point")
    if weights is None:
        s = points.sum(axis=-2)
    else:
        weights = as_tensor(weights, dtype=points.dtype)
        if np.any(weights.data < 0):
            raise ValueError("centroid weights must be nonnegative")
        if np.any(np.all(weights.data == 0, axis=-1)):
            raise ValueError("centroid weights are all zero")
        s = (points * weights[..., None]).sum(axis=-2)
    sq = _inner(s, s, keepdims=True)
    if np.any(np.abs(sq.data) < 1e-12):
        raise ValueError("degenerate centroid: weighted sum has vanishing Lorentz norm")
    return s * (math.sqrt(K) / 1.0) / ag.sqrt(ag.tabs(sq))


@dual
def lorentz_concat(points, K: float = DEFAULT_K):
    """Concatenate space parts and recompute the time part on the hyperboloid.

    ``points`` is a sequence of arrays (each (..., n_i + 1)).
    """
    K = check_curvature(K)
    pts = [as_tensor(p) for p in points]
    if not pts:
        raise ValueError("lorentz_concat needs at least one point")
    for i, p in enumerate(pts):
        # a point built for another curvature fails the constraint for this K
        scale = np.maximum(K, p.data[..., 0] ** 2)
        if np.any(manifold_residual(p.data, K) > 1e-4 * scale):
            raise ValueError(f"input {i} does not lie on the manifold of curvature K={K}")
    if len(pts) == 1:
        return pts[0]
    return _lift(ag.concat([p[..., 1:] for p in pts], axis=-1), K)


@dual
def lorentz_boost(x, v, xi, check: bool = True):
    """Pure boost of ``x`` along the unit space direction ``v`` with rapidity ``xi``.

    ``v`` has shape (..., n) and ``xi`` broadcasts against the batch shape.
    """
    x, v, xi = as_tensor(x), as_tensor(v), as_tensor(xi, dtype=as_tensor(x).dtype)
    if check:
        norms = np.linalg.norm(v.data, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("boost direction must be a unit vector")
    xt = x[..., :1]
    xs = x[..., 1:]
    xi = xi[..., None] if xi.ndim else xi
    ch = ag.cosh(xi)
    sh = ag.sinh(xi)
    proj = (xs * v).sum(axis=-1, keepdims=True)
    t_new = xt * ch + proj * sh
    s_new = xs + v * (proj * (ch - 1.0) + xt * sh)
    return ag.concat([t_new, s_new], axis=-1)


def wrapped_normal_sample(
    std: float,
    K: float = DEFAULT_K,
    dim: int = 2,
    rng: np.random.Generator | int | None = None,
    size: int | tuple[int, ...] | None = None,
) -> np.ndarray:
    """Gaussian tangent vector at the origin pushed through the exponential map.

    The tangent at the origin is already the parallel transport target, so this
    is the wrapped normal centred at the origin.
    """
    if std < 0:
        raise ValueError("std must be nonnegative")
    K = check_curvature(K)
    rng = np.random.default_rng(rng)
    shape = (dim,) if size is None else tuple(np.atleast_1d(size)) + (dim,)
    v = rng.standard_normal(shape) * std
    return expmap0(v, K)


def manifold_residual(x, K: float = DEFAULT_K) -> np.ndarray:
    """``|<x, x>_L + K|`` per point."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.abs(-x[..., 0] ** 2 + np.sum(x[..., 1:] ** 2, axis=-1) + K)
