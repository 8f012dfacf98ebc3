"""The full forward pass and the Euclidean pretraining decoder."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor, as_tensor
from .geometry import _lift, check_curvature, expmap0, logmap0, lorentz_centroid
from .layers import (
    BoostBank,
    HyperInceptionBlock,
    LoraBank,
    LoraLinear,
    LorentzAttention,
    PrototypeDecoder,
    RandomProjectionDecoder,
    TangentLayerNorm,
)
from .nn import BatchNorm, Linear, Module, uniform_init

# Algorithm order of the classification pipeline.
STAGES = (
    "processor",
    "projection",
    "patching",
    "baseline_block",
    "inception_block",
    "difference",
    "patch_pool",
    "layernorm",
    "attention",
    "centroid_unpatch",
    "predecoder",
    "prototype_decoder",
)


class StageError(RuntimeError):
    """An error raised inside one pipeline stage, prefixed with the stage name."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage


@dataclass
class LatteConfig:
    channels: int = 22
    timesteps: int = 438
    classes: int = 4
    windows: int = 1
    components: int = 32
    stf_kernel: int = 9
    bottleneck: int = 32
    filters: int = 32
    kernels: tuple[int, ...] = (9, 19, 39)
    pool_k: int = 3
    heads: int = 4
    latent_dim: int = 32
    proc_rank: int = 4
    dec_rank: int = 8
    n_boosts: int = 2
    boost_scale: float = 0.1
    predecoder: str = "lora"
    use_adapters: bool = True
    prototype_std: float = 1.0
    train_prototypes: bool = False
    q_std: float = 0.02
    K: float = 1.0
    dtype: str = "float32"
    decoder_hidden: int = 64
    decoder_channels: int = 8

    def __post_init__(self):
        self.kernels = tuple(int(k) for k in self.kernels)
        self.validate()

    @property
    def processed_length(self) -> int:
        return self.timesteps - self.stf_kernel + 1

    @property
    def encoder_dim(self) -> int:
        return self.filters * (len(self.kernels) + 1)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def validate(self) -> None:
        positive = (
            "channels timesteps classes windows components stf_kernel bottleneck filters "
            "pool_k heads latent_dim proc_rank dec_rank n_boosts decoder_hidden decoder_channels"
        )
        for name in positive.split():
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        check_curvature(self.K)
        if self.processed_length < 1:
            raise ValueError("stf_kernel longer than the input")
        if self.windows > self.processed_length:
            raise ValueError(f"windows={self.windows} exceeds processed length {self.processed_length}")
        if self.components < self.bottleneck:
            raise ValueError("components must be at least the bottleneck dimension")
        if self.encoder_dim % self.heads:
            raise ValueError(f"heads={self.heads} does not divide encoder dim {self.encoder_dim}")
        if self.predecoder not in ("lora", "boost"):
            raise ValueError("predecoder must be 'lora' or 'boost'")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "LatteConfig":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in kinds:
                raise KeyError(key)
            values[key] = _parse_value(kinds[key], raw)
        return cls(**values)


def _parse_value(kind: str, raw: str):
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind.startswith("tuple"):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return raw


def patch_offsets(length: int, windows: int) -> tuple[int, np.ndarray]:
    """Window length ``L = ceil(T / w)`` and offsets ``floor((i - 1) (T - L) / max(w - 1, 1))``."""
    if windows < 1:
        raise ValueError("windows must be at least 1")
    if windows > length:
        raise ValueError(f"windows={windows} exceeds sequence length {length}")
    L = -(-length // windows)
    denom = max(windows - 1, 1)
    offsets = np.array([(i * (length - L)) // denom for i in range(windows)], dtype=np.int64)
    return L, offsets


def patch_indices(length: int, windows: int) -> np.ndarray:
    """(w, L) matrix of 0-based time indices covered by each patch."""
    L, offsets = patch_offsets(length, windows)
    return offsets[:, None] + np.arange(L)[None, :]


def patching(z, windows: int) -> Tensor:
    """Slice (B, T, d) into (B, w, L, d) evenly spread windows."""
    z = as_tensor(z)
    idx = patch_indices(z.shape[1], windows)
    return z[:, idx]


def centroid_unpatch(tokens, K: float = 1.0) -> Tensor:
    """Uniform Lorentz centroid over the token axis (-2)."""
    return lorentz_centroid(as_tensor(tokens), None, K)


def lorentz_difference(a, b, K: float = 1.0) -> Tensor:
    """``exp_o(log_o(a) - log_o(b))``: an on-manifold reading of ``a - b``."""
    return expmap0(logmap0(a, K) - logmap0(b, K), K)


class LatteModel(Module):
    """Processor -> projection -> patching -> dual-branch encoder -> attention
    -> centroid unpatch -> random-projection decoder -> prototype decoder."""

    def __init__(self, config: LatteConfig, subjects: Sequence[int] = (), seed: int = 0):
        super().__init__()
        self.config = config
        cfg = config
        dt = cfg.np_dtype
        K = cfg.K
        rng = np.random.default_rng(seed)
        subj = [int(s) for s in subjects] if cfg.use_adapters else None
        M = cfg.components
        self.sca = LoraLinear(cfg.channels, M, subj, cfg.proc_rank, rng, q_std=cfg.q_std, dtype=dt, name="sca.")
        self.sca_bn = BatchNorm(M, dtype=dt, name="sca_bn.")
        self.stf = LoraLinear(M * cfg.stf_kernel, M, subj, cfg.proc_rank, rng, q_std=cfg.q_std, dtype=dt, name="stf.")
        self.stf_bn = BatchNorm(M, dtype=dt, name="stf_bn.")
        self.baseline = HyperInceptionBlock(
            M, cfg.bottleneck, cfg.filters, cfg.kernels, "avg", rng, K, cfg.pool_k, dt, "baseline."
        )
        self.inception = HyperInceptionBlock(
            M, cfg.bottleneck, cfg.filters, cfg.kernels, "max", rng, K, cfg.pool_k, dt, "inception."
        )
        D = cfg.encoder_dim
        self.norm = TangentLayerNorm(D, K, dtype=dt, name="norm.")
        self.attention = LorentzAttention(D, cfg.heads, rng, K, dtype=dt, name="attention.")
        self.predecoder = RandomProjectionDecoder(
            D,
            cfg.latent_dim,
            subj,
            cfg.dec_rank,
            rng,
            K,
            cfg.predecoder,
            cfg.n_boosts,
            cfg.boost_scale,
            dt,
            "predecoder.",
        )
        self.decoder = PrototypeDecoder(
            cfg.classes, cfg.latent_dim, rng, K, cfg.prototype_std, cfg.train_prototypes, dt
        )
        self._rng = rng

    # -- subject bookkeeping ----------------------------------------------
    def banks(self) -> list[tuple[str, Module]]:
        return [(n, m) for n, m in self.named_modules() if isinstance(m, (LoraBank, BoostBank))]

    @property
    def subjects(self) -> list[int]:
        ids: set[int] = set()
        for _, bank in self.banks():
            ids.update(bank.subjects)
        return sorted(ids)

    def add_subject(self, subject: int, rng: np.random.Generator | None = None) -> None:
        """Allocate a fresh identity adapter for ``subject`` in every bank."""
        rng = rng if rng is not None else self._rng
        for _, bank in self.banks():
            if subject not in bank.subjects:
                bank.add_subject(int(subject), rng)

    def subject_parameters(self, subject: int) -> dict[str, Parameter]:
        out = {}
        for prefix, bank in self.banks():
            if isinstance(bank, LoraBank) and subject in bank.Q:
                out[f"{prefix}Q"] = bank.Q[subject]
                out[f"{prefix}R"] = bank.R[subject]
            elif isinstance(bank, BoostBank) and subject in bank.directions:
                out[f"{prefix}directions"] = bank.directions[subject]
                out[f"{prefix}magnitudes"] = bank.magnitudes[subject]
        return out

    def shared_parameters(self) -> dict[str, Parameter]:
        """Every parameter that is not subject-specific (frozen ones included)."""
        bank_ids = set()
        for _, bank in self.banks():
            bank_ids.update(id(p) for p in bank.parameters())
        return {n: p for n, p in self.named_parameters() if id(p) not in bank_ids}

    def parameter_counts(self) -> dict[str, int]:
        shared = self.shared_parameters()
        trainable_shared = sum(p.data.size for p in shared.values() if p.trainable)
        frozen = sum(p.data.size for p in shared.values() if not p.trainable)
        specific = sum(p.data.size for s in self.subjects for p in self.subject_parameters(s).values())
        return {
            "shared_trainable": trainable_shared,
            "frozen": frozen,
            "subject_specific": specific,
            "total": trainable_shared + frozen + specific,
        }

    def _check_subjects(self, subjects: np.ndarray) -> None:
        if self.training and self.config.use_adapters:
            known = set(self.subjects)
            missing = sorted({int(s) for s in subjects} - known)
            if missing:
                raise ValueError(f"subject ids {missing} have no adapter during training")

    # -- stages -------------------------------------------------------------
    def processor(self, x, subjects) -> Tensor:
        """(B, C, T) EEG -> (B, T', components) Euclidean features."""
        cfg = self.config
        x = as_tensor(x, dtype=cfg.np_dtype)
        if x.ndim != 3 or x.shape[1:] != (cfg.channels, cfg.timesteps):
            raise ValueError(f"expected input (B, {cfg.channels}, {cfg.timesteps}), got {x.shape}")
        self._check_subjects(np.asarray(subjects))
        h = self.sca(ag.transpose(x, (0, 2, 1)), subjects)  # (B, T, M)
        h = self.sca_bn(h)
        cols = ag.unfold1d(ag.transpose(h, (0, 2, 1)), cfg.stf_kernel)  # (B, T', M, F)
        b, t_out = cols.shape[:2]
        h = self.stf(cols.reshape(b, t_out, -1), subjects)
        return self.stf_bn(h)

    def embed_patches(self, x, subjects) -> Tensor:
        """Processor, hyperbolic projection and patching: (B*w, L, 1+components)."""
        z = _lift(self.processor(x, subjects), self.config.K)
        p = patching(z, self.config.windows)
        b, w, L, d = p.shape
        return p.reshape(b * w, L, d)

    def encode(self, patches: Tensor, batch: int, trace: dict | None = None) -> Tensor:
        """Dual-branch encoder + layernorm + attention on (B*w, L, 1+n) patches -> (B, w, 1+D)."""
        K = self.config.K
        z_base = self._stage("baseline_block", trace, lambda: self.baseline(patches))
        z_inc = self._stage("inception_block", trace, lambda: self.inception(patches))
        diff = self._stage("difference", trace, lambda: lorentz_difference(z_base, z_inc, K))
        tokens = self._stage("patch_pool", trace, lambda: lorentz_centroid(diff, None, K))
        tokens = tokens.reshape(batch, -1, tokens.shape[-1])
        tokens = self._stage("layernorm", trace, lambda: self.norm(tokens))
        return self._stage("attention", trace, lambda: self.attention(tokens))

    def _stage(self, name: str, trace: dict | None, fn):
        try:
            out = fn()
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        if trace is not None:
            trace[name] = out
        return out

    def forward(self, x, subjects, trace: dict | None = None) -> Tensor:
        """Class logits (B, classes). ``trace`` collects each stage's output in order."""
        cfg = self.config
        x = as_tensor(x, dtype=cfg.np_dtype)
        subjects = np.asarray(subjects, dtype=np.int64).reshape(-1)
        if len(subjects) != x.shape[0]:
            raise ValueError("one subject id per sample is required")
        feats = self._stage("processor", trace, lambda: self.processor(x, subjects))
        z = self._stage("projection", trace, lambda: _lift(feats, cfg.K))
        p = self._stage("patching", trace, lambda: patching(z, cfg.windows))
        b, w, L, d = p.shape
        tokens = self.encode(p.reshape(b * w, L, d), b, trace)
        pooled = self._stage("centroid_unpatch", trace, lambda: centroid_unpatch(tokens, cfg.K))
        out = self._stage("predecoder", trace, lambda: self.predecoder(pooled, subjects))
        return self._stage("prototype_decoder", trace, lambda: self.decoder(out))

    __call__ = forward

    def predict(self, x, subjects, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode logits and argmax predictions, without recording a graph."""
        was = self.training
        self.eval()
        outs = []
        try:
            with ag.no_grad():
                for i in range(0, len(x), batch_size):
                    outs.append(self.forward(x[i : i + batch_size], subjects[i : i + batch_size]).data)
        finally:
            self.train(was)
        logits = np.concatenate(outs) if outs else np.zeros((0, self.config.classes))
        return logits, np.argmax(logits, axis=-1)

    # -- pretraining path ---------------------------------------------------
    def pretrain_features(self, x, subjects) -> Tensor:
        """Processor -> projection -> patching -> max-pool inception block: (B, w*L, 1+D)."""
        x = as_tensor(x, dtype=self.config.np_dtype)
        b = x.shape[0]
        patches = self.embed_patches(x, subjects)
        out = self.inception(patches)
        return out.reshape(b, -1, out.shape[-1])

    def pretrained_state(self) -> dict[str, np.ndarray]:
        """Shared processor weights and the inception block, the subset consumed after pretraining."""
        keep = ("sca.", "sca_bn.", "stf.", "stf_bn.", "inception.")
        state = {}
        for name, p in self.shared_parameters().items():
            if name.startswith(keep):
                state[name] = p.data.copy()
        for name, arr, _, _ in self.named_buffers():
            if name.startswith(keep):
                state[name] = arr.copy()
        return state

    def load_pretrained(self, state: dict[str, np.ndarray]) -> None:
        """Load processor weights, put the pretrained block into the baseline branch,
        and clone it into the task branch."""
        params = dict(self.named_parameters())
        buffers = {n: (m, k) for n, _, m, k in self.named_buffers()}
        for name, arr in state.items():
            targets = [name]
            if name.startswith("inception."):
                targets = ["baseline." + name[len("inception.") :], name]
            for t in targets:
                if t in params:
                    if params[t].data.shape != arr.shape:
                        raise ValueError(f"shape mismatch for {t}")
                    params[t].data = arr.astype(params[t].data.dtype, copy=True)
                elif t in buffers:
                    m, k = buffers[t]
                    m.buffers[k] = arr.astype(m.buffers[k].dtype, copy=True)
                else:
                    raise KeyError(f"unknown pretrained entry {t}")


class PretrainDecoder(Module):
    """Log map at the origin, MLP to T*C, reshape, then a (3, 5) and a (1, 1) convolution."""

    def __init__(self, config: LatteConfig, seed: int = 0):
        super().__init__()
        cfg = config
        dt = cfg.np_dtype
        rng = np.random.default_rng(seed + 7919)
        L, _ = patch_offsets(cfg.processed_length, cfg.windows)
        self.in_features = cfg.windows * L * cfg.encoder_dim
        self.config = cfg
        self.K = cfg.K
        self.fc1 = Linear(self.in_features, cfg.decoder_hidden, rng, dtype=dt, name="fc1.")
        self.fc2 = Linear(cfg.decoder_hidden, cfg.timesteps * cfg.channels, rng, dtype=dt, name="fc2.")
        h = cfg.decoder_channels
        self.conv1_weight = Parameter(uniform_init(rng, (h, 15), 15, dt), name="conv1.weight")
        self.conv1_bias = Parameter(np.zeros(h, dtype=dt), name="conv1.bias")
        self.conv2_weight = Parameter(uniform_init(rng, (1, h), h, dt), name="conv2.weight")
        self.conv2_bias = Parameter(np.zeros(1, dtype=dt), name="conv2.bias")

    def __call__(self, z) -> Tensor:
        """(B, tokens, 1+D) points -> (B, C, T) reconstruction."""
        z = as_tensor(z)
        cfg = self.config
        b = z.shape[0]
        flat = logmap0(z, self.K).reshape(b, -1)
        if flat.shape[1] != self.in_features:
            raise ValueError(f"decoder expects {self.in_features} features, got {flat.shape[1]}")
        h = ag.relu(self.fc1(flat))
        h = self.fc2(h).reshape(b, 1, cfg.timesteps, cfg.channels)
        cols = ag.unfold2d(h, 3, 5, 1, 2)  # (B, T, C, 1, 3, 5)
        cols = cols.reshape(b, cfg.timesteps, cfg.channels, 15)
        h = ag.relu(ag.matmul(cols, ag.transpose(self.conv1_weight, (1, 0))) + self.conv1_bias)
        y = ag.matmul(h, ag.transpose(self.conv2_weight, (1, 0))) + self.conv2_bias  # (B, T, C, 1)
        return ag.transpose(y[..., 0], (0, 2, 1))
