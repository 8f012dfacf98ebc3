"""Binary "LATC" checkpoints: shared weights, per-subject adapter banks, prototypes.

Layout (little endian)::

    b"LATC" | u32 version | f64 K
    u32 len | config text (key = value lines)
    u32 len | metadata text (key = value lines)
    u32 n   | n records                       shared parameters and buffers
    u32 m   | m x (u32 subject | u32 n | n records)
    u8 prototypes trainable | 1 record
    u32 crc32 of every preceding byte

    record: u32 name len | name | u8 dtype (1 = f32, 2 = f64) | u32 ndim | u32 dims | payload
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"LATC"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class FormatError(ValueError):
    """Base class for malformed binary files."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


@dataclass
class ModelCheckpoint:
    K: float
    config_text: str
    shared: dict[str, np.ndarray]
    banks: dict[int, dict[str, np.ndarray]]
    prototypes: np.ndarray
    prototypes_trainable: bool = False
    metadata: dict[str, str] = field(default_factory=dict)
    version: int = VERSION


class Reader:
    """Bounds-checked cursor over a byte string."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise TruncatedError(f"needed {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def u8(self) -> int:
        return self.unpack("<B")[0]

    def u32(self) -> int:
        return self.unpack("<I")[0]

    def f64(self) -> float:
        return self.unpack("<d")[0]

    def text(self) -> str:
        raw = self.take(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid text block: {exc}") from None


def open_container(data: bytes, magic: bytes, supported: int) -> Reader:
    """Check magic and version; return a reader positioned after the header."""
    if data[: len(magic)] != magic:
        if len(data) < len(magic) and magic.startswith(data):
            raise TruncatedError("file shorter than its magic number")
        raise BadMagicError(f"expected magic {magic!r}, got {data[: len(magic)]!r}")
    r = Reader(data)
    r.take(len(magic))
    version = r.u32()
    if version != supported:
        raise VersionError(f"unsupported version {version} (expected {supported})")
    return r


def close_container(r: Reader) -> None:
    """Verify that exactly the CRC32 trailer remains and that it matches.

    The body is parsed before this runs, so a short file surfaces as
    :class:`TruncatedError` and a damaged one as :class:`ChecksumError`.
    """
    body_end = r.pos
    stored = r.u32()
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} unexpected trailing bytes")
    if zlib.crc32(r.data[:body_end]) & 0xFFFFFFFF != stored:
        raise ChecksumError("CRC32 mismatch")


def finish_crc(buf: io.BytesIO) -> bytes:
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def _write_text(buf: io.BytesIO, text: str) -> None:
    raw = text.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _write_record(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    tag = _TAGS.get(arr.dtype)
    if tag is None:
        raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<BI", tag, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())


def _read_record(r: Reader) -> tuple[str, np.ndarray]:
    name = r.text()
    tag, ndim = r.unpack("<BI")
    if tag not in _DTYPES:
        raise FormatError(f"record {name!r}: unknown dtype tag {tag}")
    if ndim > 32:
        raise FormatError(f"record {name!r}: implausible rank {ndim}")
    dims = r.unpack(f"<{ndim}I")
    dt = _DTYPES[tag]
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    payload = r.take(count * dt.itemsize)
    arr = np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    return name, arr


def _kv_text(d: dict[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in sorted(d.items()))


def _parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def dumps(ckpt: ModelCheckpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<Id", ckpt.version, float(ckpt.K)))
    _write_text(buf, ckpt.config_text)
    _write_text(buf, _kv_text(ckpt.metadata))
    buf.write(struct.pack("<I", len(ckpt.shared)))
    for name in sorted(ckpt.shared):
        _write_record(buf, name, ckpt.shared[name])
    buf.write(struct.pack("<I", len(ckpt.banks)))
    for sid in sorted(ckpt.banks):
        recs = ckpt.banks[sid]
        buf.write(struct.pack("<II", int(sid), len(recs)))
        for name in sorted(recs):
            _write_record(buf, name, recs[name])
    buf.write(struct.pack("<B", int(ckpt.prototypes_trainable)))
    _write_record(buf, "prototypes", ckpt.prototypes)
    return finish_crc(buf)


def loads(data: bytes) -> ModelCheckpoint:
    r = open_container(bytes(data), MAGIC, VERSION)
    K = r.f64()
    config_text = r.text()
    metadata = _parse_kv(r.text())
    shared = {}
    for _ in range(r.u32()):
        name, arr = _read_record(r)
        shared[name] = arr
    banks: dict[int, dict[str, np.ndarray]] = {}
    for _ in range(r.u32()):
        sid, n = r.unpack("<II")
        if sid in banks:
            raise FormatError(f"duplicate subject bank {sid}")
        banks[sid] = dict(_read_record(r) for _ in range(n))
    trainable = bool(r.u8())
    _, protos = _read_record(r)
    close_container(r)
    return ModelCheckpoint(K, config_text, shared, banks, protos, trainable, metadata, VERSION)


def save(path, ckpt: ModelCheckpoint) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load(path) -> ModelCheckpoint:
    return loads(Path(path).read_bytes())


# -- model conversion --------------------------------------------------------


def from_model(model, metadata: dict | None = None) -> ModelCheckpoint:
    shared = {n: p.data.copy() for n, p in model.shared_parameters().items() if n != "decoder.prototypes"}
    for n, arr, _, _ in model.named_buffers():
        shared[f"buffer:{n}"] = arr.copy()
    banks = {}
    for sid in model.subjects:
        banks[sid] = {n: p.data.copy() for n, p in model.subject_parameters(sid).items()}
    protos = model.decoder.prototypes
    meta = {k: str(v) for k, v in (metadata or {}).items()}
    return ModelCheckpoint(model.config.K, model.config.to_text(), shared, banks, protos.data.copy(), protos.trainable, meta)


def to_model(ckpt: ModelCheckpoint, seed: int = 0):
    """Rebuild a model and copy every stored tensor into it."""
    from .model import LatteConfig, LatteModel

    cfg = LatteConfig.from_text(ckpt.config_text)
    if cfg.K != ckpt.K:
        raise FormatError("header curvature disagrees with the stored config")
    model = LatteModel(cfg, subjects=sorted(ckpt.banks) if cfg.use_adapters else (), seed=seed)
    params = dict(model.shared_parameters())
    buffers = {n: (m, k) for n, _, m, k in model.named_buffers()}
    for name, arr in ckpt.shared.items():
        if name.startswith("buffer:"):
            key = name[len("buffer:") :]
            if key not in buffers:
                raise FormatError(f"unknown buffer {key!r}")
            m, k = buffers[key]
            _assign_buffer(m, k, arr)
        else:
            if name not in params:
                raise FormatError(f"unknown parameter {name!r}")
            _assign(params[name], arr, name)
    for sid, recs in ckpt.banks.items():
        slots = model.subject_parameters(sid)
        for name, arr in recs.items():
            if name not in slots:
                raise FormatError(f"unknown adapter {name!r} for subject {sid}")
            _assign(slots[name], arr, name)
    _assign(model.decoder.prototypes, ckpt.prototypes, "prototypes")
    model.decoder.prototypes.trainable = ckpt.prototypes_trainable
    model.decoder.prototypes.requires_grad = ckpt.prototypes_trainable
    return model


def _assign(param, arr: np.ndarray, name: str) -> None:
    if param.data.shape != arr.shape:
        raise FormatError(f"{name}: stored shape {arr.shape} does not match {param.data.shape}")
    param.data = arr.astype(param.data.dtype, copy=True)


def _assign_buffer(module, key: str, arr: np.ndarray) -> None:
    if module.buffers[key].shape != arr.shape:
        raise FormatError(f"buffer {key}: shape mismatch")
    module.buffers[key] = arr.astype(module.buffers[key].dtype, copy=True)


def save_model(path, model, metadata: dict | None = None) -> None:
    save(path, from_model(model, metadata))


def load_model(path, seed: int = 0):
    return to_model(load(path), seed)
