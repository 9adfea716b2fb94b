"""Bit budgets, top-t sparsification and stochastic quantization for the digital baseline."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .channel import ChannelParams
from .errors import InternalConsistencyError

RAW_VALUE_BITS = 64
INDEX_COUNT_BITS = 32


def sinr(params: ChannelParams, neighborhood_size: int) -> float:
    """``P / ((|N_k| - 1) P + N0)`` where ``|N_k|`` counts the node itself."""
    if neighborhood_size < 1:
        raise ValueError("neighborhood size includes the node itself and must be >= 1")
    p = params.power_budget
    return p / ((neighborhood_size - 1) * p + params.noise_power)


def bits_per_block(params: ChannelParams, neighborhood_size: int) -> float:
    """Rate ``m log2(1 + SINR_k)`` bits of one block treating interference as noise."""
    return params.block_length * math.log2(1.0 + sinr(params, neighborhood_size))


@lru_cache(maxsize=64)
def _log2_binomials(m: int) -> np.ndarray:
    """``log2 C(m, t)`` for ``t = 0..m`` from exact integer binomials."""
    out = np.empty(m + 1)
    c = 1
    for t in range(m + 1):
        out[t] = math.log2(c)
        c = c * (m - t) // (t + 1)
    out.setflags(write=False)
    return out


def golomb_overhead_bits(m: int, t: int) -> float:
    """Bits to convey which ``t`` of ``m`` positions are present: ``log2 C(m, t)``."""
    if not 0 <= t <= m:
        raise ValueError(f"t must lie in [0, {m}], got {t}")
    return float(_log2_binomials(m)[t])


@lru_cache(maxsize=4096)
def select_t(m: int, n_bits: int, budget_bits: float) -> int:
    """Largest ``t`` in ``[0, m]`` with ``log2 C(m, t) + t * n_bits <= budget_bits``.

    The cost is not monotone in ``t`` once ``m > 2**n_bits`` (it dips at
    ``t = m``), so the whole range is scanned.
    """
    cost = _log2_binomials(m) + n_bits * np.arange(m + 1)
    ok = np.flatnonzero(cost <= budget_bits)
    return int(ok[-1]) if ok.size else 0


def quantization_levels(n_bits: int) -> int:
    """Number ``s`` of positive levels; the grid ``{-s..s} * M / s`` fits in ``n_bits``."""
    if n_bits < 2:
        raise ValueError("need at least 2 bits for a signed grid")
    return 2 ** (n_bits - 1) - 1


def stochastic_quantize(values: np.ndarray, n_bits: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Unbiased randomized rounding of ``values`` onto ``2 s + 1`` uniform levels on ``[-M, M]``."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return values.copy()
    if not scale > 0:
        raise InternalConsistencyError(f"quantizer scale must be positive, got {scale}")
    if np.any(np.abs(values) > scale):
        raise InternalConsistencyError("value outside the quantizer range [-M, M]")
    s = quantization_levels(n_bits)
    u = values * (s / scale)
    nearest = np.rint(u)
    u = np.where(np.abs(u - nearest) <= 1e-9 * np.maximum(1.0, np.abs(u)), nearest, u)
    lower = np.floor(u)
    up = rng.random(values.shape) < (u - lower)
    return (lower + up) * (scale / s)


def top_t_sparsify(vector: np.ndarray, t: int, memory: np.ndarray | None = None):
    """Keep the ``t`` largest-magnitude entries of ``vector + memory``.

    Returns ``(indices, values, new_memory)``; the new memory holds every
    entry that was not selected.  Ties go to the lowest index.
    """
    target = np.asarray(vector, dtype=float)
    if memory is not None:
        target = target + memory
    m = target.size
    if not 0 <= t <= m:
        raise ValueError(f"t must lie in [0, {m}], got {t}")
    idx = np.sort(np.argsort(-np.abs(target), kind="stable")[:t])
    values = target[idx]
    new_memory = target.copy()
    new_memory[idx] = 0.0
    return idx, values, new_memory


@dataclass(frozen=True)
class CompressedMessage:
    """Sparse quantized update.

    ``n_bits=None`` marks a lossless message carrying raw 64-bit values.
    """

    length: int
    indices: np.ndarray
    values: np.ndarray
    n_bits: int | None
    scale: float = 0.0

    @property
    def t(self) -> int:
        return int(self.indices.size)

    @property
    def bit_count(self) -> int:
        return message_bits(self.length, self.t, self.n_bits)


def message_bits(m: int, t: int, n_bits: int | None) -> int:
    """Modeled size: position code plus payload plus one scale field; an empty message costs nothing."""
    if t == 0:
        return 0
    pos = math.ceil(golomb_overhead_bits(m, t) - 1e-12)
    if n_bits is None:
        return pos + t * RAW_VALUE_BITS
    return pos + (t + 1) * n_bits


def compress(residual: np.ndarray, t: int, n_bits: int | None, rng: np.random.Generator | None):
    """Sparsify then quantize ``residual``; returns ``(message, untransmitted_memory)``."""
    idx, vals, memory = top_t_sparsify(residual, t)
    scale = float(np.max(np.abs(vals))) if vals.size else 0.0
    if n_bits is not None and scale > 0:
        q = stochastic_quantize(vals, n_bits, scale, rng)
        memory[idx] = vals - q
        vals = q
    return CompressedMessage(int(np.size(residual)), idx, vals, n_bits, scale), memory


def decode(msg: CompressedMessage) -> np.ndarray:
    out = np.zeros(msg.length)
    out[msg.indices] = msg.values
    return out


# -- byte layout used for bit-accounting checks ------------------------------


class _BitWriter:
    def __init__(self) -> None:
        self.acc = 0
        self.n = 0

    def write(self, value: int, width: int) -> None:
        if value < 0 or value >= (1 << width):
            raise InternalConsistencyError(f"value {value} does not fit in {width} bits")
        self.acc = (self.acc << width) | value
        self.n += width

    def getvalue(self) -> bytes:
        pad = (-self.n) % 8
        return ((self.acc << pad)).to_bytes((self.n + pad) // 8, "big")


class _BitReader:
    def __init__(self, data: bytes) -> None:
        self.acc = int.from_bytes(data, "big")
        self.total = len(data) * 8
        self.pos = 0

    def read(self, width: int) -> int:
        shift = self.total - self.pos - width
        if shift < 0:
            raise ValueError("truncated message")
        self.pos += width
        return (self.acc >> shift) & ((1 << width) - 1)


def _index_width(m: int) -> int:
    return max(1, (m - 1).bit_length())


def _f64_bits(x: float) -> int:
    return struct.unpack(">Q", struct.pack(">d", x))[0]


def _bits_f64(b: int) -> float:
    return struct.unpack(">d", struct.pack(">Q", b))[0]


def pack_message(msg: CompressedMessage) -> bytes:
    """Header (``t`` in 32 bits, scale), index gaps at fixed width, then value codes."""
    w = _BitWriter()
    w.write(msg.t, INDEX_COUNT_BITS)
    if msg.n_bits is not None:
        w.write(_f64_bits(msg.scale), 64)
    width = _index_width(msg.length)
    prev = -1
    for i in msg.indices:
        w.write(int(i) - prev - 1, width)
        prev = int(i)
    if msg.n_bits is None:
        for v in msg.values:
            w.write(_f64_bits(float(v)), RAW_VALUE_BITS)
    else:
        s = quantization_levels(msg.n_bits)
        codes = np.rint(msg.values * (s / msg.scale)).astype(np.int64) if msg.scale > 0 else np.zeros(msg.t, np.int64)
        for c in codes:
            w.write(int(c) + s, msg.n_bits)
    return w.getvalue()


def unpack_message(data: bytes, m: int, n_bits: int | None) -> CompressedMessage:
    r = _BitReader(data)
    t = r.read(INDEX_COUNT_BITS)
    scale = _bits_f64(r.read(64)) if n_bits is not None else 0.0
    width = _index_width(m)
    idx = np.empty(t, dtype=np.int64)
    prev = -1
    for i in range(t):
        prev = prev + 1 + r.read(width)
        idx[i] = prev
    if n_bits is None:
        vals = np.array([_bits_f64(r.read(RAW_VALUE_BITS)) for _ in range(t)])
    else:
        s = quantization_levels(n_bits)
        vals = np.array([r.read(n_bits) - s for _ in range(t)], dtype=float) * (scale / s if s else 0.0)
    return CompressedMessage(m, idx, vals, n_bits, scale)
