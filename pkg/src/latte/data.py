"""EEG trial containers, the EEGC binary format, a synthetic multi-subject
generator and the train/val/test split schemes."""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import expm

from .checkpoint import (
    FormatError,
    TruncatedError,
    close_container,
    finish_crc,
    open_container,
)

EEGC_MAGIC = b"EEGC"
EEGC_VERSION = 1
TASKS = ("mi", "ssvep", "ern", "synthetic")

# Reference shapes of the public datasets the architecture was designed for.
# Converting raw recordings into EEGC is out of scope; a converter only needs
# to emit trials with these shapes.
DATASET_SHAPES = {
    "mi": dict(channels=22, timesteps=438, subjects=9, classes=4),
    "ssvep": dict(channels=8, timesteps=128, subjects=11, classes=5),
    "ern": dict(channels=56, timesteps=160, subjects=16, classes=2),
}


@dataclass
class EEGTrial:
    samples: np.ndarray  # (C, T) float32
    label: int
    subject: int
    session: int


@dataclass
class DatasetMeta:
    channels: int
    timesteps: int
    classes: int
    subjects: int
    sessions: int
    task: str = "synthetic"

    def validate(self) -> None:
        for name in ("channels", "timesteps", "classes", "subjects", "sessions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.task not in TASKS:
            raise ValueError(f"unknown task tag {self.task!r}")


@dataclass
class Dataset:
    """Column-oriented trial set: arrays are cheaper to batch than trial objects."""

    x: np.ndarray  # (N, C, T) float32
    y: np.ndarray  # (N,) int64
    subject: np.ndarray
    session: np.ndarray
    meta: DatasetMeta

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.subject[idx], self.session[idx], self.meta)

    def trials(self) -> list[EEGTrial]:
        return [
            EEGTrial(self.x[i], int(self.y[i]), int(self.subject[i]), int(self.session[i]))
            for i in range(len(self))
        ]

    @classmethod
    def from_trials(cls, trials: Sequence[EEGTrial], meta: DatasetMeta) -> "Dataset":
        C, T = meta.channels, meta.timesteps
        x = np.zeros((len(trials), C, T), dtype=np.float32)
        for i, t in enumerate(trials):
            x[i] = t.samples
        return cls(
            x,
            np.array([t.label for t in trials], dtype=np.int64),
            np.array([t.subject for t in trials], dtype=np.int64),
            np.array([t.session for t in trials], dtype=np.int64),
            meta,
        )

    def check(self) -> None:
        m = self.meta
        m.validate()
        if self.x.shape[1:] != (m.channels, m.timesteps):
            raise ValueError(f"samples {self.x.shape[1:]} do not match meta ({m.channels}, {m.timesteps})")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("non-finite samples")
        if len(self) and (self.y.min() < 0 or self.y.max() >= m.classes):
            raise ValueError("label outside [0, classes)")
        if len(self) and (self.subject.min() < 0 or self.session.min() < 0):
            raise ValueError("ids must be nonnegative")


# -- EEGC container ------------------------------------------------------------


def dumps_eegc(ds: Dataset) -> bytes:
    ds.check()
    m = ds.meta
    buf = io.BytesIO()
    buf.write(EEGC_MAGIC)
    buf.write(struct.pack("<I", EEGC_VERSION))
    buf.write(struct.pack("<5I", m.channels, m.timesteps, m.classes, m.subjects, m.sessions))
    tag = m.task.encode("ascii")
    buf.write(struct.pack("<I", len(tag)))
    buf.write(tag)
    buf.write(struct.pack("<I", len(ds)))
    for i in range(len(ds)):
        buf.write(struct.pack("<3I", ds.subject[i], ds.session[i], ds.y[i]))
        buf.write(np.ascontiguousarray(ds.x[i], dtype="<f4").tobytes())
    return finish_crc(buf)


def loads_eegc(data: bytes) -> Dataset:
    r = open_container(bytes(data), EEGC_MAGIC, EEGC_VERSION)
    C, T, classes, subjects, sessions = r.unpack("<5I")
    try:
        task = r.text().encode("utf-8").decode("ascii")
    except UnicodeEncodeError:
        raise FormatError("task tag is not ascii") from None
    n = r.u32()
    rec = 12 + 4 * C * T
    # size check up front so a huge bogus count cannot allocate memory
    remaining = len(r.data) - r.pos - 4
    if n * rec > remaining:
        raise TruncatedError(f"{n} trials need {n * rec} bytes, {max(remaining, 0)} present")
    x = np.empty((n, C, T), dtype=np.float32)
    ids = np.empty((n, 3), dtype=np.int64)
    for i in range(n):
        ids[i] = r.unpack("<3I")
        x[i] = np.frombuffer(r.take(4 * C * T), dtype="<f4").reshape(C, T)
    close_container(r)
    meta = DatasetMeta(C, T, classes, subjects, sessions, task)
    ds = Dataset(x, ids[:, 2].copy(), ids[:, 0].copy(), ids[:, 1].copy(), meta)
    try:
        ds.check()
    except ValueError as exc:
        raise FormatError(f"inconsistent contents: {exc}") from None
    return ds


def save_eegc(trials, meta: DatasetMeta | None, path) -> None:
    """Write a Dataset, or a list of EEGTrial plus meta, to ``path``."""
    ds = trials if isinstance(trials, Dataset) else Dataset.from_trials(trials, meta)
    if meta is not None:
        ds.meta = meta
    Path(path).write_bytes(dumps_eegc(ds))


def load_eegc(path) -> Dataset:
    return loads_eegc(Path(path).read_bytes())


# -- synthetic generator -----------------------------------------------------------


@dataclass
class SynthSpec:
    subjects: int = 3
    classes: int = 2
    trials: int = 200  # per subject
    channels: int = 8
    timesteps: int = 128
    snr: float = 1.0  # linear signal-to-noise power ratio; inf disables noise
    shift: float = 0.5  # 0 = identical subjects, 1 = fully subject-specific mixing
    seed: int = 0
    sessions: int = 2
    sources: int = 4
    class_weights: tuple[float, ...] | None = None
    task: str = "synthetic"


def _template(rng: np.random.Generator, T: int, n_waves: int = 3) -> np.ndarray:
    t = np.arange(T) / T
    out = np.zeros(T)
    for _ in range(n_waves):
        f = rng.uniform(1.0, 8.0)
        out += rng.normal() * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    out -= out.mean()
    return out / (np.std(out) + 1e-12)


def _label_counts(n: int, classes: int, weights) -> np.ndarray:
    if weights is None:
        weights = np.ones(classes)
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != classes or np.any(w < 0) or w.sum() == 0:
        raise ValueError("class_weights must be nonnegative, one per class")
    raw = w / w.sum() * n
    counts = np.floor(raw).astype(int)
    # largest remainders get the leftover trials
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return counts


def _rotation(rng: np.random.Generator, n: int, angle: float) -> np.ndarray:
    """Random rotation of R^n whose largest principal angle is ``angle``.

    For n = 2 this is the plane rotation by ``angle``.
    """
    if n < 2 or angle == 0:
        return np.eye(n)
    g = rng.standard_normal((n, n))
    omega = g - g.T
    if n == 2:
        omega = np.array([[0.0, -1.0], [1.0, 0.0]])
    omega *= angle / np.max(np.abs(np.linalg.eigvals(omega)))
    return expm(omega)


def synth_generate(spec: SynthSpec) -> Dataset:
    """Shared class templates seen through subject-specific mixing and gain, plus noise.

    Class ``c`` drives latent source ``c`` with a waveform shared by every
    class and subject, so classes differ only in their spatial signature;
    the remaining sources carry class-independent background waveforms.
    Subject ``s`` (of ``S``) rotates the class sources by the angle
    ``shift * (pi / 2) * s / (S - 1)`` before the common forward mixing
    ``A_0``, and scales everything by ``g_s = 1 + shift * u_s`` with
    ``u_s ~ U(-0.5, 0.5)``. Trials carry a random polarity and amplitude,
    so a class signature is a line through the origin; at ``shift = 1`` the
    first and last subjects swap class signatures exactly, which no readout
    blind to subject identity can undo. White Gaussian noise is added at the
    requested SNR; with ``snr = inf`` trials are noiseless and jitter-free.
    """
    for name in ("subjects", "classes", "trials", "channels", "timesteps", "sessions", "sources"):
        if getattr(spec, name) < 1:
            raise ValueError(f"{name} must be at least 1")
    if not 0.0 <= spec.shift <= 1.0:
        raise ValueError("shift must lie in [0, 1]")
    if not spec.snr > 0:
        raise ValueError("snr must be positive")
    rng = np.random.default_rng(spec.seed)
    C, T = spec.channels, spec.timesteps
    S = max(spec.sources, spec.classes)
    wave = _template(rng, T)
    background = np.stack([_template(rng, T) for _ in range(S - spec.classes)]) if S > spec.classes else None
    A0 = rng.standard_normal((C, S)) / math.sqrt(S)
    mixings, gains = [], []
    for s in range(spec.subjects):
        frac = s / (spec.subjects - 1) if spec.subjects > 1 else 0.0
        rot = np.eye(S)
        rot[: spec.classes, : spec.classes] = _rotation(rng, spec.classes, spec.shift * frac * math.pi / 2)
        mixings.append(A0 @ rot)
        gains.append(1.0 + spec.shift * rng.uniform(-0.5, 0.5))
    counts = _label_counts(spec.trials, spec.classes, spec.class_weights)
    noiseless = math.isinf(spec.snr)
    xs, ys, subs, sess = [], [], [], []
    for s in range(spec.subjects):
        labels = np.repeat(np.arange(spec.classes), counts)
        labels = labels[rng.permutation(len(labels))]
        n = len(labels)
        if noiseless:
            amp = np.ones(n)
        else:
            amp = rng.choice([-1.0, 1.0], size=n) * (1.0 + 0.2 * rng.standard_normal(n))
        A = gains[s] * mixings[s]
        clean = (A[:, labels].T * amp[:, None])[:, :, None] * wave[None, None, :]
        if background is not None:
            clean = clean + 0.5 * np.einsum("ck,kt->ct", A[:, spec.classes :], background)[None]
        if noiseless:
            noisy = clean
        else:
            power = np.mean(clean**2)
            noisy = clean + rng.standard_normal(clean.shape) * math.sqrt(power / spec.snr)
        xs.append(noisy.astype(np.float32))
        ys.append(labels)
        subs.append(np.full(n, s))
        # trials are spread over sessions in contiguous blocks
        sess.append(1 + (np.arange(n) * spec.sessions) // n)
    meta = DatasetMeta(C, T, spec.classes, spec.subjects, spec.sessions, spec.task)
    return Dataset(
        np.concatenate(xs),
        np.concatenate(ys).astype(np.int64),
        np.concatenate(subs).astype(np.int64),
        np.concatenate(sess).astype(np.int64),
        meta,
    )


SYNTH_PRESETS = {
    "desk": SynthSpec(),
    "ern_like": SynthSpec(classes=2, class_weights=(0.7, 0.3), task="ern"),
}


# -- splits -----------------------------------------------------------------------


@dataclass
class SplitScheme:
    kind: str = "instance_wise"  # or session_wise
    val_fraction: float = 1.0 / 8.0
    train_sessions: tuple[int, ...] = (1,)
    test_sessions: tuple[int, ...] | None = None  # None = every non-train session

    def __post_init__(self):
        if self.kind not in ("instance_wise", "session_wise"):
            raise ValueError(f"unknown split kind {self.kind!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")

    @classmethod
    def for_task(cls, task: str) -> "SplitScheme":
        if task == "mi":
            return cls("instance_wise", 1.0 / 8.0, (1,), (2,))
        if task in ("ssvep", "ern"):
            return cls("session_wise", 1.0 / 4.0, (1, 2, 3, 4), None)
        return cls("instance_wise", 1.0 / 8.0, (1,), (2,))


def _stratified_val(labels: np.ndarray, frac: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask selecting ``round(frac * n)`` trials, spread across labels."""
    n = len(labels)
    target = int(round(frac * n))
    mask = np.zeros(n, dtype=bool)
    if target == 0:
        return mask
    classes = np.unique(labels)
    groups = [np.flatnonzero(labels == c) for c in classes]
    raw = np.array([len(g) * frac for g in groups])
    take = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - take), kind="stable")[: target - take.sum()]:
        take[i] += 1
    for g, k in zip(groups, take):
        mask[rng.choice(g, size=min(k, len(g)), replace=False)] = True
    return mask


def split_dataset(ds: Dataset, scheme: SplitScheme, seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Train / validation / test partition, with validation drawn per subject and stratified by label."""
    rng = np.random.default_rng(seed)
    train_sessions = set(scheme.train_sessions)
    present = set(np.unique(ds.session).tolist())
    missing = train_sessions - present
    if scheme.kind == "session_wise" and missing:
        raise ValueError(f"sessions {sorted(missing)} required by the split are absent")
    if scheme.kind == "instance_wise" and not train_sessions & present:
        raise ValueError("no trials in the training session")
    in_train = np.isin(ds.session, list(train_sessions))
    if scheme.test_sessions is None:
        in_test = ~in_train
    else:
        in_test = np.isin(ds.session, list(scheme.test_sessions)) & ~in_train
    val = np.zeros(len(ds), dtype=bool)
    for s in np.unique(ds.subject):
        idx = np.flatnonzero(in_train & (ds.subject == s))
        val[idx[_stratified_val(ds.y[idx], scheme.val_fraction, rng)]] = True
    train = in_train & ~val
    return ds.subset(np.flatnonzero(train)), ds.subset(np.flatnonzero(val)), ds.subset(np.flatnonzero(in_test))
