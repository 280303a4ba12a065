"""Dense float32 kernels, the PCG32 generator, and the SATN tensor file format.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float32. Products and
statistics accumulate in float64 and round back to float32 on return.
"""

from __future__ import annotations

import hashlib
import os
import struct
from typing import Sequence, Tuple

import numpy as np

from attnshare.errors import ShapeError, ValidationError

STD_EPS = 1e-6

# pcg32 (XSH-RR 64/32), O'Neill 2014. Constants from the reference pcg_basic.c.
PCG_MULT = 6364136223846793005
PCG_DEFAULT_STREAM = 54
_MASK64 = (1 << 64) - 1

SATN_MAGIC = b"SATN"
SATN_VERSION = 1


def as_matrix(a, *, name: str = "matrix", check_finite: bool = True) -> np.ndarray:
    m = np.ascontiguousarray(a, dtype=np.float32)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if check_finite and not np.all(np.isfinite(m)):
        raise ValidationError(f"{name} contains NaN or Inf")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, name="a", check_finite=False)
    b = as_matrix(b, name="b", check_finite=False)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)


def row_softmax(a, scale: float = 1.0) -> np.ndarray:
    """Softmax of ``a / scale`` along each row, stabilized by the row max."""
    if not scale > 0:
        raise ValidationError(f"softmax scale must be positive, got {scale}")
    a = as_matrix(a, name="logits")
    z = a.astype(np.float64) / scale
    z -= z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z.astype(np.float32)


def channel_stats(a) -> Tuple[np.ndarray, np.ndarray]:
    """Per-column population mean and std (float64), std floored at ``STD_EPS``."""
    a = as_matrix(a, check_finite=False)
    if a.shape[0] == 0 or a.shape[1] == 0:
        raise ValidationError("channel_stats of an empty matrix")
    x = a.astype(np.float64)
    mean = x.mean(axis=0)
    std = np.sqrt(((x - mean) ** 2).mean(axis=0))
    return mean, np.maximum(std, STD_EPS)


def derive_seed(seed: int, *labels) -> int:
    """Stable 64-bit sub-seed for a labelled purpose (e.g. ``derive_seed(7, "noise", 2)``)."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed) & _MASK64).encode())
    for label in labels:
        h.update(b"\x00" + str(label).encode())
    return int.from_bytes(h.digest(), "little")


class Pcg32:
    """PCG32 generator; identical streams on every platform for equal (seed, stream)."""

    def __init__(self, seed: int, stream: int = PCG_DEFAULT_STREAM):
        self.inc = ((int(stream) << 1) | 1) & _MASK64
        self.state = 0
        self._step()
        self.state = (self.state + (int(seed) & _MASK64)) & _MASK64
        self._step()

    def _step(self) -> None:
        self.state = (self.state * PCG_MULT + self.inc) & _MASK64

    def next_u32(self) -> int:
        old = self.state
        self._step()
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFFFFFF

    def u32_array(self, n: int) -> np.ndarray:
        """Next ``n`` outputs at once, via LCG jump-ahead; same values as ``n`` calls of next_u32."""
        out = np.empty(n, dtype=np.uint32)
        chunk = 1 << 15
        for start in range(0, n, chunk):
            k = min(chunk, n - start)
            out[start:start + k] = self._u32_chunk(k)
        return out

    def _u32_chunk(self, k: int) -> np.ndarray:
        mult = np.full(k, PCG_MULT, dtype=np.uint64)
        with np.errstate(over="ignore"):
            powers = np.concatenate(([np.uint64(1)], np.cumprod(mult)))  # MULT^j mod 2^64
            geo = np.concatenate(([np.uint64(0)], np.cumsum(powers[:-1])))
            states = powers * np.uint64(self.state) + geo * np.uint64(self.inc)
        old = states[:-1]
        self.state = int(states[-1])
        xorshifted = (((old >> np.uint64(18)) ^ old) >> np.uint64(27)) & np.uint64(0xFFFFFFFF)
        rot = old >> np.uint64(59)
        left = (np.uint64(32) - rot) & np.uint64(31)
        res = ((xorshifted >> rot) | (xorshifted << left)) & np.uint64(0xFFFFFFFF)
        return res.astype(np.uint32)

    def uniform(self, n: int) -> np.ndarray:
        """Float64 draws in the open interval (0, 1)."""
        return (self.u32_array(n).astype(np.float64) + 0.5) / 4294967296.0

    def normal(self, n: int) -> np.ndarray:
        """Standard normal float64 draws (Box-Muller over consecutive uniform pairs)."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        r = np.sqrt(-2.0 * np.log(u[0::2]))
        theta = 2.0 * np.pi * u[1::2]
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n]

    def normal_matrix(self, rows: int, cols: int, scale: float = 1.0) -> np.ndarray:
        return (self.normal(rows * cols) * scale).reshape(rows, cols).astype(np.float32)


def dumps_tensor(arr) -> bytes:
    """Encode an array as SATN bytes. uint32 arrays keep a u32 payload, everything else is f32."""
    a = np.asarray(arr)
    if a.dtype == np.uint32:
        payload = a.astype("<u4", copy=False)
    else:
        payload = a.astype("<f4")
    if a.ndim > 255:
        raise ShapeError("rank exceeds 255")
    header = SATN_MAGIC + struct.pack("<BB", SATN_VERSION, a.ndim)
    header += struct.pack(f"<{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(payload).tobytes()


def loads_tensor(data: bytes, dtype=np.float32) -> np.ndarray:
    if data[:4] != SATN_MAGIC:
        raise ValidationError("not a SATN tensor (bad magic)")
    if len(data) < 6:
        raise ValidationError("truncated SATN header")
    version, rank = struct.unpack_from("<BB", data, 4)
    if version != SATN_VERSION:
        raise ValidationError(f"unsupported SATN version {version}")
    offset = 6 + 4 * rank
    if len(data) < offset:
        raise ValidationError("truncated SATN header")
    dims = struct.unpack_from(f"<{rank}I", data, 6)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(data) != offset + 4 * count:
        raise ValidationError(f"SATN payload size mismatch for dims {dims}")
    wire = "<u4" if np.dtype(dtype) == np.uint32 else "<f4"
    arr = np.frombuffer(data, dtype=wire, count=count, offset=offset)
    return arr.astype(dtype).reshape(dims)


def save_tensor(path, arr) -> None:
    with open(path, "wb") as f:
        f.write(dumps_tensor(arr))


def load_tensor(path, dtype=np.float32) -> np.ndarray:
    with open(path, "rb") as f:
        return loads_tensor(f.read(), dtype=dtype)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def thread_cap(default: int | None = None) -> int:
    """Worker count from ``SHARED_ATTN_THREADS`` (minimum 1)."""
    raw = os.environ.get("SHARED_ATTN_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ValidationError(f"SHARED_ATTN_THREADS must be an integer, got {raw!r}")
    return default if default is not None else min(4, os.cpu_count() or 1)


def stack_rows(parts: Sequence[np.ndarray]) -> np.ndarray:
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"cannot stack rows with column counts {sorted(cols)}")
    return np.concatenate(parts, axis=0)
