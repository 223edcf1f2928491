"""Minimal dense (channels, height, width) tensors and the ops the fusion network needs.

Reference-grade and deterministic: float64 throughout, no batch dimension,
channel-outermost row-major layout. All operations are pure; tensors are
immutable once constructed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ParseError

MAGIC = b"PWT1"


@dataclass(frozen=True, eq=False)
class Tensor:
    """Rank-3 array (channels, height, width); channels may be zero, spatial dims not."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ConfigError(f"tensor must have rank 3, got rank {arr.ndim}")
        c, h, w = arr.shape
        if h < 1 or w < 1 or c < 0:
            raise ConfigError(f"bad tensor shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @classmethod
    def zeros(cls, channels: int, height: int, width: int) -> "Tensor":
        return cls(np.zeros((channels, height, width)))

    @classmethod
    def full(cls, channels: int, height: int, width: int, value: float) -> "Tensor":
        return cls(np.full((channels, height, width), float(value)))


@dataclass(frozen=True, eq=False)
class ConvKernel:
    """Convolution parameters: weights (out_ch, in_ch, k, k) with k in {1, 3}, bias (out_ch,)."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        b = np.ascontiguousarray(self.bias, dtype=np.float64)
        if w.ndim != 4:
            raise ConfigError(f"kernel weights must have rank 4, got {w.ndim}")
        out_ch, _, kh, kw = w.shape
        if kh != kw or kh not in (1, 3):
            raise ConfigError(f"kernel must be square 1x1 or 3x3, got {kh}x{kw}")
        if b.shape != (out_ch,):
            raise ConfigError(f"bias shape {b.shape} does not match out_ch {out_ch}")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def size(self) -> int:
        return self.weights.shape[2]


def conv2d(t: Tensor, kernel: ConvKernel) -> Tensor:
    """Stride-1 convolution. 3x3 zero-pads by 1 so spatial size is preserved; 1x1 pads nothing."""
    if kernel.in_channels != t.channels:
        raise ConfigError(
            f"input has {t.channels} channels, kernel expects {kernel.in_channels}"
        )
    if kernel.size == 1:
        out = np.einsum("oi,ihw->ohw", kernel.weights[:, :, 0, 0], t.data, optimize=True)
    else:
        padded = np.pad(t.data, ((0, 0), (1, 1), (1, 1)))
        windows = sliding_window_view(padded, (3, 3), axis=(1, 2))
        out = np.einsum("oikl,ihwkl->ohw", kernel.weights, windows, optimize=True)
    out = out + kernel.bias[:, None, None]
    return Tensor(out)


def _upsample_axis_indices(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Source sample position for output index i is (i + 0.5)/2 - 0.5 (align-corners disabled),
    # clamped at the borders.
    s = (np.arange(2 * n) + 0.5) / 2.0 - 0.5
    base = np.floor(s)
    frac = s - base
    i0 = np.clip(base, 0, n - 1).astype(np.intp)
    i1 = np.clip(base + 1, 0, n - 1).astype(np.intp)
    return i0, i1, frac


def upsample2x(t: Tensor, mode: str = "bilinear") -> Tensor:
    """Double both spatial dims. Bilinear by default; "nearest" is available for ablation."""
    if mode == "nearest":
        return Tensor(np.repeat(np.repeat(t.data, 2, axis=1), 2, axis=2))
    if mode != "bilinear":
        raise ConfigError(f"unknown upsampling mode {mode!r}")
    r0, r1, rf = _upsample_axis_indices(t.height)
    rows = t.data[:, r0, :] * (1.0 - rf)[None, :, None] + t.data[:, r1, :] * rf[None, :, None]
    c0, c1, cf = _upsample_axis_indices(t.width)
    out = rows[:, :, c0] * (1.0 - cf)[None, None, :] + rows[:, :, c1] * cf[None, None, :]
    return Tensor(out)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack along channels, a first."""
    if (a.height, a.width) != (b.height, b.width):
        raise ConfigError(f"spatial mismatch: {a.shape} vs {b.shape}")
    return Tensor(np.concatenate([a.data, b.data], axis=0))


_ELEMENTWISE_OPS = {"mul": np.multiply, "add": np.add, "sub": np.subtract}


def elementwise(a, b, op: str) -> Tensor:
    """Pointwise mul/add/sub. Either argument may be a plain scalar."""
    if op not in _ELEMENTWISE_OPS:
        raise ConfigError(f"unknown elementwise op {op!r}")
    a_t = isinstance(a, Tensor)
    b_t = isinstance(b, Tensor)
    if not a_t and not b_t:
        raise ConfigError("at least one elementwise argument must be a Tensor")
    if a_t and b_t and a.shape != b.shape:
        raise ConfigError(f"shape mismatch: {a.shape} vs {b.shape}")
    av = a.data if a_t else float(a)
    bv = b.data if b_t else float(b)
    return Tensor(_ELEMENTWISE_OPS[op](av, bv))


def sigmoid(t: Tensor) -> Tensor:
    """Pointwise 1/(1+e^-x), computed branch-wise for stability."""
    x = t.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor(out)


def write_record(f, arr: np.ndarray) -> None:
    """Append one binary record: magic, u32 rank, u32 dims, little-endian f64 payload."""
    a = np.ascontiguousarray(arr, dtype=np.float64)
    f.write(MAGIC)
    f.write(struct.pack("<I", a.ndim))
    f.write(struct.pack(f"<{a.ndim}I", *a.shape))
    f.write(a.astype("<f8", copy=False).tobytes())


def read_record(f) -> np.ndarray:
    magic = f.read(4)
    if magic != MAGIC:
        raise ParseError(f"bad tensor magic {magic!r}")
    head = f.read(4)
    if len(head) != 4:
        raise ParseError("truncated tensor header")
    (rank,) = struct.unpack("<I", head)
    if rank < 1 or rank > 8:
        raise ParseError(f"implausible tensor rank {rank}")
    dims_raw = f.read(4 * rank)
    if len(dims_raw) != 4 * rank:
        raise ParseError("truncated tensor dims")
    dims = struct.unpack(f"<{rank}I", dims_raw)
    count = int(np.prod(dims, dtype=np.int64))
    payload = f.read(8 * count)
    if len(payload) != 8 * count:
        raise ParseError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)


def load_records(path) -> list[np.ndarray]:
    """Read all records from a file."""
    out = []
    with open(path, "rb") as f:
        while True:
            probe = f.peek(1) if hasattr(f, "peek") else f.read(0)
            if not probe:
                break
            out.append(read_record(f))
    return out


def dump(t: Tensor, path) -> None:
    """Write a single tensor to its own file."""
    with open(path, "wb") as f:
        write_record(f, t.data)


def load(path) -> Tensor:
    records = load_records(path)
    if len(records) != 1:
        raise ParseError(f"expected one tensor record in {path}, found {len(records)}")
    if records[0].ndim != 3:
        raise ParseError(f"expected rank-3 tensor in {path}, got rank {records[0].ndim}")
    return Tensor(records[0])
