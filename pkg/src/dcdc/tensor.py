"""Dense tensor helpers, deterministic RNG and the binary tensor file format.

Tensors are plain row-major ``numpy.ndarray`` objects.  Every operation in the
library returns fresh arrays; nothing is modified in place once returned.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"DCDC"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class TensorFormatError(ValueError):
    """Raised for malformed binary tensor files."""


class NonFiniteError(FloatingPointError):
    pass


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    """Validation hook: raise if ``x`` holds NaN or Inf."""
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NonFiniteError(f"{what}: {bad} non-finite value(s)")
    return x


def flat_index(index: tuple[int, ...], shape: tuple[int, ...]) -> int:
    """Row-major flat offset of ``index`` inside ``shape``."""
    flat = 0
    for i, n in zip(index, shape):
        flat = flat * n + i
    return flat


# --------------------------------------------------------------------------
# RNG
# --------------------------------------------------------------------------

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class Rng:
    """SplitMix64 generator.

    The state advances by the golden-ratio increment and each output is the
    state passed through the SplitMix64 finalizer (xor-shift 30/27/31 with
    two odd multipliers).  Being counter based, blocks of values are produced
    with vectorized uint64 arithmetic, and the integer stream is identical on
    every platform.
    """

    def __init__(self, seed: int = 0):
        self.state = int(seed) & _MASK64

    def next_u64(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64)
            z = np.uint64(self.state) + steps * _GAMMA
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * 0x9E3779B97F4A7C15) & _MASK64
        return z

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (low + (high - low) * u).reshape(shape)

    def normal(self, shape=(), std: float = 1.0) -> np.ndarray:
        """Box-Muller normals; two uniforms per output value."""
        n = int(np.prod(shape, dtype=np.int64))
        u = self.uniform((2, n))
        r = np.sqrt(-2.0 * np.log1p(-u[0]))
        return (std * r * np.cos(2.0 * np.pi * u[1])).reshape(shape)

    def integers(self, high: int, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        return (self.next_u64(n) % np.uint64(high)).astype(np.int64).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform((n,)), kind="stable")

    def spawn(self, key: int) -> "Rng":
        """Independent child stream, e.g. one per generated sample."""
        seed = int(Rng(self.state ^ (int(key) * 0xD1B54A32D192ED03 & _MASK64)).next_u64(1)[0])
        return Rng(seed)


@dataclass(frozen=True)
class KernelOffsets:
    """Centered offsets of a k x k window plus the input-channel index set."""

    k: int
    in_channels: int = 1
    offsets: tuple = field(init=False)

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"kernel size must be odd and positive, got {self.k}")
        r = self.k // 2
        object.__setattr__(
            self, "offsets", tuple((-r + i, -r + j) for i in range(self.k) for j in range(self.k))
        )

    @property
    def channels(self) -> range:
        return range(self.in_channels)


# --------------------------------------------------------------------------
# elementary ops
# --------------------------------------------------------------------------


def pad_zero(x: np.ndarray, p: int) -> np.ndarray:
    if p < 0:
        raise ValueError("padding must be non-negative")
    if p == 0:
        return x.copy()
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    out[:, :, p:p + h, p:p + w] = x
    return out


def crop(x: np.ndarray, p: int) -> np.ndarray:
    """Inverse of :func:`pad_zero`."""
    if p == 0:
        return x.copy()
    return x[:, :, p:-p, p:-p].copy()


def batched_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``out[g] = a[g] @ b[g]`` for stacks of matrices.

    In float64 (and complex) mode the reduction runs in ascending order of
    the inner index with one rounding per multiply and per add, so the result
    is bit-identical to the textbook triple loop.  float32 (training
    precision) is handed to BLAS.
    """
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    g, m, k = a.shape
    n = b.shape[2]
    dtype = np.result_type(a, b)
    if dtype == np.float32:
        return np.matmul(a, b)
    out = np.zeros((g, m, n), dtype=dtype)
    tmp = np.empty_like(out)
    for kk in range(k):
        np.multiply(a[:, :, kk, None], b[:, None, kk, :], out=tmp)
        out += tmp
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return batched_matmul(a[None], b[None])[0]


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    # numpy reduces a contiguous axis pairwise; error stays O(log n * eps)
    b, c, h, w = x.shape
    flat = np.ascontiguousarray(x).reshape(b, c, h * w)
    return (flat.sum(axis=2) / (h * w)).reshape(b, c, 1, 1)


def global_avg_pool_vjp(x_shape: tuple, dy: np.ndarray) -> np.ndarray:
    b, c, h, w = x_shape
    return np.broadcast_to(dy.reshape(b, c, 1, 1) / (h * w), x_shape).copy()


# --------------------------------------------------------------------------
# binary tensor format
# --------------------------------------------------------------------------


def encode_tensor(t: np.ndarray) -> bytes:
    """Serialize: magic | version u32 | dtype u8 | ndim u32 | dims u32*ndim | payload."""
    dt = np.dtype(t.dtype).newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise TensorFormatError(f"unsupported dtype {t.dtype}")
    header = MAGIC + struct.pack("<IBI", FORMAT_VERSION, _DTYPE_CODES[dt], t.ndim)
    header += struct.pack(f"<{t.ndim}I", *t.shape)
    return header + np.ascontiguousarray(t, dtype=dt).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor record at ``offset``; returns (tensor, next offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise TensorFormatError("bad magic")
    if len(buf) < offset + 13:
        raise TensorFormatError("truncated header")
    version, code, ndim = struct.unpack_from("<IBI", buf, offset + 4)
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if code not in _CODE_DTYPES:
        raise TensorFormatError(f"unsupported dtype code {code}")
    pos = offset + 13
    if len(buf) < pos + 4 * ndim:
        raise TensorFormatError("truncated header")
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    dt = _CODE_DTYPES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(buf) < pos + nbytes:
        raise TensorFormatError("truncated payload")
    data = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos)
    return data.reshape(dims).astype(dt.newbyteorder("="), copy=True), pos + nbytes


def write_tensor(path: str | os.PathLike, t: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode_tensor(t))


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    t, end = decode_tensor(buf)
    if end != len(buf):
        raise TensorFormatError("trailing bytes after payload")
    return t
