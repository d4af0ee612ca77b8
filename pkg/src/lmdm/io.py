"""Binary file formats: latent streams and parameter checkpoints.

All integers are 32-bit little-endian and all samples are float32
little-endian.

Latent stream::

    b"LMLT" | version | channels | frames | frames x channels floats (frame-major)

Checkpoint::

    b"LMDC" | version | n_config_fields | config values ... | n_blobs |
    repeated: name_len | name (utf-8) | ndim | dims ... | floats (row-major)

Optimizer state and step counters are stored as extra blobs with a
``state/`` name prefix so training can resume bitwise.
"""

from __future__ import annotations

import struct
from dataclasses import fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

LATENT_MAGIC = b"LMLT"
CHECKPOINT_MAGIC = b"LMDC"
VERSION = 1
_U32 = struct.Struct("<I")
_F32 = np.dtype("<f4")


class _Reader:
    """Cursor over a byte buffer that reports offsets on failure."""

    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int, label: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.what} truncated reading {label}: expected {self.pos + n} "
                              f"bytes, file has {len(self.buf)}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, label: str) -> int:
        return _U32.unpack(self.take(4, label))[0]

    def magic(self, expected: bytes):
        got = self.take(len(expected), "magic")
        if got != expected:
            raise FormatError(f"{self.what}: bad magic {got!r}, expected {expected!r}", 0)

    def version(self):
        at = self.pos
        v = self.u32("version")
        if v != VERSION:
            raise FormatError(f"{self.what}: unsupported version {v}", at)

    def floats(self, count: int, label: str) -> np.ndarray:
        raw = self.take(4 * count, label)
        return np.frombuffer(raw, dtype=_F32).astype(np.float32)


# --------------------------------------------------------------------------
# latent streams


def encode_latents(seq) -> bytes:
    x = np.asarray(seq, dtype=np.float32)
    if x.ndim != 2:
        raise ValueError(f"latent sequence must be (C, frames), got shape {x.shape}")
    c, t = x.shape
    return (LATENT_MAGIC + _U32.pack(VERSION) + _U32.pack(c) + _U32.pack(t)
            + np.ascontiguousarray(x.T, dtype=_F32).tobytes())


def decode_latents(buf: bytes, channels: int | None = None) -> np.ndarray:
    r = _Reader(buf, "latent stream")
    r.magic(LATENT_MAGIC)
    r.version()
    c = r.u32("channel count")
    t = r.u32("frame count")
    if channels is not None and c != channels:
        raise ConfigError(f"latent stream has {c} channels, model expects {channels}")
    data = r.floats(c * t, "frames")
    if r.pos != len(buf):
        raise FormatError(f"latent stream has {len(buf) - r.pos} trailing bytes", r.pos)
    return data.reshape(t, c).T.copy()


def save_latents(path, seq) -> Path:
    path = Path(path)
    path.write_bytes(encode_latents(seq))
    return path


def load_latents(path, channels: int | None = None) -> np.ndarray:
    """``(C, frames)`` float32; ``channels`` checks against a model config."""
    return decode_latents(Path(path).read_bytes(), channels)


# --------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(config, arrays: dict) -> bytes:
    vals = [int(getattr(config, f.name)) for f in fields(config)]
    out = [CHECKPOINT_MAGIC, _U32.pack(VERSION), _U32.pack(len(vals))]
    out += [_U32.pack(v) for v in vals]
    out.append(_U32.pack(len(arrays)))
    for name, arr in arrays.items():
        a = np.asarray(getattr(arr, "data", arr), dtype=np.float32)
        nb = name.encode("utf-8")
        out += [_U32.pack(len(nb)), nb, _U32.pack(a.ndim)]
        out += [_U32.pack(d) for d in a.shape]
        out.append(np.ascontiguousarray(a, dtype=_F32).tobytes())
    return b"".join(out)


def decode_checkpoint(buf: bytes, config_cls):
    """Return ``(config, {name: float32 array})``."""
    r = _Reader(buf, "checkpoint")
    r.magic(CHECKPOINT_MAGIC)
    r.version()
    names = [f.name for f in fields(config_cls)]
    at = r.pos
    n_fields = r.u32("config field count")
    if n_fields != len(names):
        raise FormatError(f"checkpoint has {n_fields} config fields, expected {len(names)}", at)
    config = config_cls(**{n: r.u32(f"config field {n}") for n in names})
    n_blobs = r.u32("blob count")
    arrays = {}
    for _ in range(n_blobs):
        name = r.take(r.u32("name length"), "name").decode("utf-8")
        ndim = r.u32(f"{name} rank")
        shape = tuple(r.u32(f"{name} dim") for _ in range(ndim))
        arrays[name] = r.floats(int(np.prod(shape, dtype=np.int64)), name).reshape(shape)
    if r.pos != len(buf):
        raise FormatError(f"checkpoint has {len(buf) - r.pos} trailing bytes", r.pos)
    return config, arrays


def save_checkpoint(path, model, extra: dict | None = None) -> Path:
    """Write model parameters plus optional ``state/`` blobs."""
    arrays = {n: p.data for n, p in model.params.items()}
    for name, arr in (extra or {}).items():
        arrays["state/" + name] = arr
    path = Path(path)
    path.write_bytes(encode_checkpoint(model.config, arrays))
    return path


def load_checkpoint(path):
    """Return ``(DiT, state dict)``; parameters come back grad-enabled."""
    from . import tensor as T
    from .dit import DiT, ModelConfig

    config, arrays = decode_checkpoint(Path(path).read_bytes(), ModelConfig)
    params = {n: T.parameter(a) for n, a in arrays.items() if not n.startswith("state/")}
    state = {n[len("state/"):]: a for n, a in arrays.items() if n.startswith("state/")}
    return DiT(config, params), state
