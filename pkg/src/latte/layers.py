"""Hyperbolic building blocks and subject adapters.

Batched point tensors keep the ambient axis last; sequences are laid out
(N, L, 1 + n). Subject ids are passed per sample as an integer array. An id
missing from an adapter bank means "unseen subject": its adapter contribution
is exactly zero.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import _kernels
from . import autograd as ag
from .autograd import Parameter, Tensor, as_tensor
from .geometry import _inner, _lift, expmap0, check_curvature, lorentz_boost, wrapped_normal_sample
from .nn import BatchNorm, Linear, Module, uniform_init


# ---------------------------------------------------------------------------
# functional forms
# ---------------------------------------------------------------------------


def lorentz_fc(x, W, b=None, K: float = 1.0, activation=None) -> Tensor:
    """Linear map on the space part followed by a time re-lift."""
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] - 1 != W.shape[1]:
        raise ValueError(f"LFC expects {W.shape[1]} space dims, got {x.shape[-1] - 1}")
    space = ag.matmul(x[..., 1:], ag.transpose(W, (1, 0)))
    if b is not None:
        space = space + b
    if activation is not None:
        space = activation(space)
    return _lift(space, K)


def lora_linear(x, W_shared, Q=None, R=None, alpha: float = 1.0) -> Tensor:
    """``(W_shared + alpha Q R^T) x`` computed without materializing the product.

    ``x`` is (..., J). Missing factors (unseen subject) leave the shared map.
    """
    x, W_shared = as_tensor(x), as_tensor(W_shared)
    y = ag.matmul(x[..., None, :], ag.transpose(W_shared, (1, 0)))[..., 0, :]
    if Q is None or R is None:
        return y
    low = ag.matmul(ag.matmul(x[..., None, :], as_tensor(R)), ag.transpose(as_tensor(Q), (1, 0)))
    return y + low[..., 0, :] * alpha


def hyper_pool(
    points,
    k: int,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    mode: str = "max",
    K: float = 1.0,
) -> Tensor:
    """Pool a sequence of points (N, L, 1+n) along L.

    ``max`` selects, per window, the point farthest from the origin (largest
    ``acosh(x_t / sqrt(K))``); no transformation is applied to it. ``avg``
    returns the uniform Lorentz centroid of the window's real (non-padding)
    points.
    """
    points = as_tensor(points)
    if points.ndim != 3:
        raise ValueError("hyper_pool expects (N, L, 1+n) points")
    n, length, _ = points.shape
    span = dilation * (k - 1) + 1
    n_out = (length + 2 * padding - span) // stride + 1
    if n_out < 1:
        raise ValueError("pooling window produces no output")
    # every window must cover at least one real position
    for o in (0, n_out - 1):
        pos = o * stride + np.arange(k) * dilation - padding
        if not np.any((pos >= 0) & (pos < length)):
            raise ValueError("empty effective pooling window")
    if mode == "max":
        scores = np.arccosh(np.maximum(points.data[..., 0] / math.sqrt(K), 1.0))
        index = _kernels.window_argmax(np.ascontiguousarray(scores, dtype=np.float64), k, stride, padding, dilation)
        return ag.take_rows(points, index)
    if mode == "avg":
        chan_first = ag.transpose(points, (0, 2, 1))
        cols = ag.unfold1d(chan_first, k, padding=padding, dilation=dilation)  # (N, T', 1+n, k)
        if stride > 1:
            cols = cols[:, ::stride]
        s = cols.sum(axis=-1)
        sq = _inner(s, s, keepdims=True)
        return s * math.sqrt(K) / ag.sqrt(ag.tabs(sq))
    raise ValueError(f"unknown pooling mode {mode!r}")


def prototype_logits(z, prototypes, K: float = 1.0) -> Tensor:
    """Negative squared Lorentz distance from each z (B, 1+d) to each prototype (C, 1+d)."""
    z, prototypes = as_tensor(z), as_tensor(prototypes)
    if z.shape[-1] != prototypes.shape[-1]:
        raise ValueError("prototype dimension mismatch")
    zs, zt = z[..., 1:], z[..., :1]
    ps, pt = prototypes[..., 1:], prototypes[..., :1]
    inner = ag.matmul(zs, ag.transpose(ps, (1, 0))) - ag.matmul(zt, ag.transpose(pt, (1, 0)))
    return inner * 2.0 + 2.0 * K


def predict(logits) -> np.ndarray:
    """Argmax with ties broken toward the lowest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=-1)


# ---------------------------------------------------------------------------
# subject adapters
# ---------------------------------------------------------------------------


class LoraBank(Module):
    """Per-subject low-rank factors ``Q`` (I x r) and ``R`` (J x r), keyed by subject id.

    ``R`` starts at zero, so every adapter is the zero map at initialization.
    """

    def __init__(
        self,
        subjects: Sequence[int],
        out_features: int,
        in_features: int,
        rank: int,
        rng: np.random.Generator,
        q_init: str = "normal",
        q_std: float = 0.02,
        dtype=np.float64,
        name: str = "",
    ):
        super().__init__()
        self.out_features = out_features
        self.in_features = in_features
        self.rank = rank
        self.q_init = q_init
        self.q_std = q_std
        self.dtype = dtype
        self.name = name
        self.Q: dict[int, Parameter] = {}
        self.R: dict[int, Parameter] = {}
        for s in subjects:
            self.add_subject(int(s), rng)

    def add_subject(self, subject: int, rng: np.random.Generator) -> None:
        if self.q_init == "normal":
            q = rng.normal(0.0, self.q_std, size=(self.out_features, self.rank))
        else:
            q = uniform_init(rng, (self.out_features, self.rank), self.in_features, np.float64)
        self.Q[subject] = Parameter(q.astype(self.dtype), name=f"{self.name}Q")
        self.R[subject] = Parameter(np.zeros((self.in_features, self.rank), dtype=self.dtype), name=f"{self.name}R")

    @property
    def subjects(self) -> list[int]:
        return sorted(self.Q)

    def gather(self, subjects: np.ndarray):
        """Stack factors per sample. Returns ``(Q, R, mask)`` or ``None`` if no id is known."""
        subjects = np.asarray(subjects).reshape(-1)
        known = np.array([int(s) in self.Q for s in subjects], dtype=bool)
        if not known.any():
            return None
        uniq = sorted({int(s) for s, k in zip(subjects, known) if k})
        pos = {s: i for i, s in enumerate(uniq)}
        idx = np.array([pos.get(int(s), 0) for s in subjects])
        Qs = ag.stack([self.Q[s] for s in uniq])[idx]
        Rs = ag.stack([self.R[s] for s in uniq])[idx]
        return Qs, Rs, known

    def delta(self, x: Tensor, subjects: np.ndarray) -> Tensor | None:
        """Adapter contribution ``Q_s R_s^T x`` for x of shape (B, ..., J)."""
        got = self.gather(subjects)
        if got is None:
            return None
        Qs, Rs, known = got
        b = x.shape[0]
        flat = x.reshape(b, -1, self.in_features)
        low = ag.matmul(ag.matmul(flat, Rs), ag.transpose(Qs, (0, 2, 1)))
        if not known.all():
            low = low * known.astype(x.dtype)[:, None, None]
        return low.reshape(x.shape[:-1] + (self.out_features,))

    def dense(self, subject: int) -> np.ndarray:
        return self.Q[subject].data @ self.R[subject].data.T


class LoraLinear(Module):
    """``y = (W_shared + alpha Q_s R_s^T) x + b`` over the last axis."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        subjects: Sequence[int] | None,
        rank: int,
        rng: np.random.Generator,
        bias: bool = True,
        q_init: str = "normal",
        q_std: float = 0.02,
        freeze_shared: bool = False,
        alpha: float | None = None,
        dtype=np.float64,
        name: str = "",
    ):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(
            uniform_init(rng, (out_features, in_features), in_features, dtype),
            name=f"{name}weight",
            trainable=not freeze_shared,
        )
        self.bias = (
            Parameter(np.zeros(out_features, dtype=dtype), name=f"{name}bias", trainable=not freeze_shared)
            if bias
            else None
        )
        # learnable adapter scale only when requested
        self.alpha = Parameter(np.array([alpha], dtype=dtype), name=f"{name}alpha") if alpha is not None else None
        self.bank = (
            LoraBank(subjects, out_features, in_features, rank, rng, q_init, q_std, dtype, f"{name}lora.")
            if subjects is not None
            else None
        )

    def adapter_delta(self, x: Tensor, subjects) -> Tensor | None:
        if self.bank is None:
            return None
        d = self.bank.delta(x, subjects)
        if d is not None and self.alpha is not None:
            d = d * self.alpha
        return d

    def __call__(self, x, subjects=None) -> Tensor:
        x = as_tensor(x)
        y = ag.matmul(x, ag.transpose(self.weight, (1, 0)))
        if self.bias is not None:
            y = y + self.bias
        if subjects is not None:
            d = self.adapter_delta(x, subjects)
            if d is not None:
                y = y + d
        return y


class BoostBank(Module):
    """Per-subject compositions of ``r`` Lorentz boosts (LB-LoRA).

    Magnitudes start at zero, so every adapter is the identity at
    initialization. Directions are normalized on use.
    """

    def __init__(
        self,
        subjects: Sequence[int],
        dim: int,
        n_boosts: int,
        rng: np.random.Generator,
        scale: float = 0.1,
        dtype=np.float64,
        name: str = "",
    ):
        super().__init__()
        self.dim = dim
        self.n_boosts = n_boosts
        self.scale = scale
        self.dtype = dtype
        self.name = name
        self.directions: dict[int, Parameter] = {}
        self.magnitudes: dict[int, Parameter] = {}
        for s in subjects:
            self.add_subject(int(s), rng)

    def add_subject(self, subject: int, rng: np.random.Generator) -> None:
        v = rng.standard_normal((self.n_boosts, self.dim)).astype(self.dtype)
        self.directions[subject] = Parameter(v, name=f"{self.name}directions")
        self.magnitudes[subject] = Parameter(np.zeros(self.n_boosts, dtype=self.dtype), name=f"{self.name}magnitudes")

    @property
    def subjects(self) -> list[int]:
        return sorted(self.directions)

    def __call__(self, h, subjects) -> Tensor:
        """Apply ``boost_r o ... o boost_1`` to points h (B, ..., 1+dim)."""
        h = as_tensor(h)
        subjects = np.asarray(subjects).reshape(-1)
        known = np.array([int(s) in self.directions for s in subjects], dtype=bool)
        if not known.any():
            return h
        uniq = sorted({int(s) for s, k in zip(subjects, known) if k})
        for s in uniq:
            if np.any(np.linalg.norm(self.directions[s].data, axis=-1) == 0):
                raise ValueError(f"zero-norm boost direction for subject {s}")
        pos = {s: i for i, s in enumerate(uniq)}
        idx = np.array([pos.get(int(s), 0) for s in subjects])
        V = ag.stack([self.directions[s] for s in uniq])[idx]  # (B, r, n)
        mu = ag.stack([self.magnitudes[s] for s in uniq])[idx]  # (B, r)
        V = V / ag.sqrt(ag.square(V).sum(axis=-1, keepdims=True))
        xi = mu * self.scale
        if not known.all():
            xi = xi * known.astype(h.dtype)[:, None]
        extra = h.ndim - 2
        out = h
        for i in range(self.n_boosts):
            v = V[:, i]
            x_i = xi[:, i]
            for _ in range(extra):
                v = v[:, None]
                x_i = x_i[:, None]
            out = lorentz_boost(out, v, x_i, check=False)
        return out


def lb_lora(h, directions, magnitudes, scale: float = 0.1) -> Tensor:
    """Single-subject LB-LoRA: sequentially boost ``h`` by each normalized direction."""
    h = as_tensor(h)
    directions, magnitudes = as_tensor(directions), as_tensor(magnitudes)
    norms = np.linalg.norm(directions.data, axis=-1)
    if np.any(norms == 0):
        raise ValueError("zero-norm boost direction")
    V = directions / ag.sqrt(ag.square(directions).sum(axis=-1, keepdims=True))
    out = h
    for i in range(directions.shape[0]):
        out = lorentz_boost(out, V[i], magnitudes[i] * scale, check=False)
    return out


# ---------------------------------------------------------------------------
# hyperbolic layers
# ---------------------------------------------------------------------------


class LorentzFC(Module):
    def __init__(
        self,
        in_space: int,
        out_space: int,
        rng,
        K: float = 1.0,
        bias: bool = True,
        activation=None,
        dtype=np.float64,
        name: str = "",
    ):
        super().__init__()
        self.K = check_curvature(K)
        self.activation = activation
        self.weight = Parameter(uniform_init(rng, (out_space, in_space), in_space, dtype), name=f"{name}weight")
        self.bias = Parameter(np.zeros(out_space, dtype=dtype), name=f"{name}bias") if bias else None

    def __call__(self, x) -> Tensor:
        return lorentz_fc(x, self.weight, self.bias, self.K, self.activation)


class HyperConv(Module):
    """``lift(ReLU(BN(Conv1D_k(space))))`` along the sequence axis, 'same' padding."""

    def __init__(self, in_ch: int, out_ch: int, k: int, rng, K: float = 1.0, dtype=np.float64, name: str = ""):
        super().__init__()
        if k % 2 == 0:
            raise ValueError("HyperConv uses odd kernel sizes for symmetric 'same' padding")
        self.k = k
        self.K = K
        self.in_ch = in_ch
        self.weight = Parameter(uniform_init(rng, (out_ch, in_ch * k), in_ch * k, dtype), name=f"{name}weight")
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype), name=f"{name}bias")
        self.bn = BatchNorm(out_ch, dtype=dtype, name=f"{name}bn.")

    def euclidean(self, space: Tensor) -> Tensor:
        """Conv + BN + ReLU on a space sequence (N, L, C_in) -> (N, L, C_out)."""
        n, length, c = space.shape
        if c != self.in_ch:
            raise ValueError(f"expected {self.in_ch} channels, got {c}")
        if self.k == 1:
            cols = space
        else:
            cols = ag.unfold1d(ag.transpose(space, (0, 2, 1)), self.k, padding=self.k // 2)
            cols = cols.reshape(n, length, c * self.k)
        y = ag.matmul(cols, ag.transpose(self.weight, (1, 0))) + self.bias
        return ag.relu(self.bn(y))

    def __call__(self, points: Tensor) -> Tensor:
        return _lift(self.euclidean(points[..., 1:]), self.K)


class HyperInceptionBlock(Module):
    """Bottleneck, three kernel branches, one pooling branch, joined by Lorentz concatenation."""

    def __init__(
        self,
        in_dim: int,
        bottleneck: int,
        filters: int,
        kernels: Sequence[int],
        pool_mode: str,
        rng,
        K: float = 1.0,
        pool_k: int = 3,
        dtype=np.float64,
        name: str = "",
    ):
        super().__init__()
        if in_dim < bottleneck:
            raise ValueError("channel count must be at least the bottleneck dimension")
        self.K = K
        self.pool_mode = pool_mode
        self.pool_k = pool_k
        self.bottleneck = HyperConv(in_dim, bottleneck, 1, rng, K, dtype, f"{name}bottleneck.")
        self.branches = [HyperConv(bottleneck, filters, k, rng, K, dtype, f"{name}branch{k}.") for k in kernels]
        self.pool_conv = HyperConv(bottleneck, filters, 1, rng, K, dtype, f"{name}pool.")
        self.out_dim = filters * (len(kernels) + 1)

    def __call__(self, points: Tensor, return_parts: bool = False):
        z0 = self.bottleneck(points)
        parts = [br(z0) for br in self.branches]
        pooled = hyper_pool(z0, self.pool_k, 1, self.pool_k // 2, 1, self.pool_mode, self.K)
        parts.append(self.pool_conv(pooled))
        out = _lift(ag.concat([p[..., 1:] for p in parts], axis=-1), self.K)
        if return_parts:
            return out, [z0] + parts
        return out


class TangentLayerNorm(Module):
    """Standardize the space part across features, apply (gamma, beta), re-lift."""

    def __init__(self, dim: int, K: float = 1.0, eps: float = 1e-5, dtype=np.float64, name: str = ""):
        super().__init__()
        self.K = K
        self.eps = eps
        self.gamma = Parameter(np.ones(dim, dtype=dtype), name=f"{name}gamma")
        self.beta = Parameter(np.zeros(dim, dtype=dtype), name=f"{name}beta")

    def __call__(self, x) -> Tensor:
        return tangent_layernorm(x, self.gamma, self.beta, self.K, self.eps)


def tangent_layernorm(x, gamma, beta, K: float = 1.0, eps: float = 1e-5) -> Tensor:
    x = as_tensor(x)
    s = x[..., 1:]
    mu = s.mean(axis=-1, keepdims=True)
    c = s - mu
    var = ag.square(c).mean(axis=-1, keepdims=True)
    return _lift(c / ag.sqrt(var + eps) * gamma + beta, K)


class LorentzAttention(Module):
    """Multi-head attention with weights ``softmax(-(lambda / tau) d_L^2(q, k))``.

    Values are averaged with the weighted Lorentz centroid; heads are joined
    by Lorentz concatenation and mixed by an output LFC.
    """

    def __init__(self, dim: int, heads: int, rng, K: float = 1.0, dtype=np.float64, name: str = ""):
        super().__init__()
        if dim % heads:
            raise ValueError(f"{heads} heads do not divide dimension {dim}")
        self.dim = dim
        self.heads = heads
        self.K = K
        self.head_dim = dim // heads
        self.tau = math.sqrt(self.head_dim)
        self.q = LorentzFC(dim, dim, rng, K, dtype=dtype, name=f"{name}q.")
        self.k = LorentzFC(dim, dim, rng, K, dtype=dtype, name=f"{name}k.")
        self.v = LorentzFC(dim, dim, rng, K, dtype=dtype, name=f"{name}v.")
        self.o = LorentzFC(dim, dim, rng, K, dtype=dtype, name=f"{name}o.")
        self.log_lambda = Parameter(np.zeros(1, dtype=dtype), name=f"{name}log_lambda")

    def _split(self, x: Tensor) -> Tensor:
        b, w, _ = x.shape
        s = x[..., 1:].reshape(b, w, self.heads, self.head_dim)
        return _lift(ag.transpose(s, (0, 2, 1, 3)), self.K)  # (B, h, w, 1+dh)

    def weights(self, x) -> Tensor:
        q = self._split(self.q(x))
        k = self._split(self.k(x))
        return self._weights(q, k)

    def _weights(self, q: Tensor, k: Tensor) -> Tensor:
        kt = ag.transpose(k, (0, 1, 3, 2))
        inner = ag.matmul(q[..., 1:], kt[..., 1:, :]) - ag.matmul(q[..., :1], kt[..., :1, :])
        sqdist = inner * -2.0 - 2.0 * self.K
        lam = ag.exp(self.log_lambda)
        return ag.softmax(sqdist * lam * (-1.0 / self.tau), axis=-1)

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.ndim != 3:
            raise ValueError("attention expects (B, w, 1+dim) tokens")
        q = self._split(self.q(x))
        k = self._split(self.k(x))
        v = self._split(self.v(x))
        alpha = self._weights(q, k)  # (B, h, w, w)
        s = ag.matmul(alpha, v)
        sq = _inner(s, s, keepdims=True)
        heads = s * math.sqrt(self.K) / ag.sqrt(ag.tabs(sq))
        b, _, w, _ = heads.shape
        merged = ag.transpose(heads[..., 1:], (0, 2, 1, 3)).reshape(b, w, self.dim)
        return self.o(_lift(merged, self.K))


class RandomProjectionDecoder(Module):
    """Frozen random LFC plus a subject adapter.

    ``mode="lora"``: ``space' = W s + alpha Q_s R_s^T s``; ``mode="boost"``:
    ``LB-LoRA(lift(W s))``. ``W`` never receives gradient.
    """

    def __init__(
        self,
        in_space: int,
        out_space: int,
        subjects: Sequence[int] | None,
        rank: int,
        rng,
        K: float = 1.0,
        mode: str = "lora",
        n_boosts: int = 2,
        boost_scale: float = 0.1,
        dtype=np.float64,
        name: str = "",
    ):
        super().__init__()
        self.K = K
        self.mode = mode
        lora_subjects = subjects if mode == "lora" else None
        self.fc = LoraLinear(
            in_space,
            out_space,
            lora_subjects,
            rank,
            rng,
            bias=False,
            q_init="uniform",
            freeze_shared=True,
            alpha=1.0,
            dtype=dtype,
            name=f"{name}fc.",
        )
        self.boosts = (
            BoostBank(subjects, out_space, n_boosts, rng, boost_scale, dtype, f"{name}boost.")
            if mode == "boost" and subjects is not None
            else None
        )
        if mode not in ("lora", "boost"):
            raise ValueError(f"unknown adapter mode {mode!r}")

    def __call__(self, z, subjects=None) -> Tensor:
        z = as_tensor(z)
        out = _lift(self.fc(z[..., 1:], subjects), self.K)
        if self.boosts is not None and subjects is not None:
            out = self.boosts(out, subjects)
        return out


class PrototypeDecoder(Module):
    def __init__(
        self,
        classes: int,
        dim: int,
        rng,
        K: float = 1.0,
        std: float = 1.0,
        trainable: bool = False,
        dtype=np.float64,
    ):
        super().__init__()
        self.K = K
        protos = wrapped_normal_sample(std, K, dim, rng, size=classes)
        self.prototypes = Parameter(protos.astype(dtype), name="prototypes", trainable=trainable)

    def __call__(self, z) -> Tensor:
        protos = self.prototypes
        if protos.trainable:
            # keep trainable prototypes on the manifold by re-lifting their space part
            protos = _lift(protos[..., 1:], self.K)
        return prototype_logits(z, protos, self.K)
