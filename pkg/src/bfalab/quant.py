"""Symmetric per-layer 8-bit weight quantization and bit-level access.

A layer ``W`` is stored as int8 codes with ``scale = max|W| / 127``; the
dequantized value of a code is ``scale * code``. Bits are addressed 0..7 with
bit 7 the two's-complement sign bit (place value -128).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NBITS = 8
QMAX = 127
# signed place value of each bit in an int8 code
PLACE_VALUES = np.array([1, 2, 4, 8, 16, 32, 64, -128], dtype=np.int64)


@dataclass(frozen=True, order=True)
class BitAddress:
    layer: int
    index: int
    bit: int

    def __str__(self) -> str:
        return f"L{self.layer}[{self.index}].b{self.bit}"


@dataclass
class QuantizedTensor:
    codes: np.ndarray  # int8, same shape as the source tensor
    scale: float

    @property
    def shape(self) -> tuple:
        return self.codes.shape

    @property
    def size(self) -> int:
        return self.codes.size

    def dequantize(self) -> np.ndarray:
        return dequantize(self)

    def copy(self) -> "QuantizedTensor":
        return QuantizedTensor(self.codes.copy(), self.scale)

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return (self.scale == other.scale and self.codes.shape == other.codes.shape
                and np.array_equal(self.codes, other.codes))


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_layer(weights: np.ndarray) -> QuantizedTensor:
    w = np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("cannot quantize non-finite weights")
    m = float(np.max(np.abs(w))) if w.size else 0.0
    if m == 0.0:
        return QuantizedTensor(np.zeros(w.shape, dtype=np.int8), 0.0)
    # w / m * 127 (rather than w / scale) puts +-m exactly on +-127
    codes = round_half_away(np.clip(w, -m, m) / m * QMAX)
    return QuantizedTensor(codes.astype(np.int8), m / QMAX)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return q.codes.astype(np.float64) * q.scale


def _check_address(q: QuantizedTensor, index: int, bit: int) -> None:
    if not 0 <= bit < NBITS:
        raise IndexError(f"bit position {bit} outside [0, 7]")
    if not 0 <= index < q.codes.size:
        raise IndexError(f"weight index {index} outside [0, {q.codes.size})")


def flip_code(code: int, bit: int) -> int:
    """Toggle ``bit`` of an int8 two's-complement code, returning the new signed value."""
    if not 0 <= bit < NBITS:
        raise IndexError(f"bit position {bit} outside [0, 7]")
    u = (int(code) & 0xFF) ^ (1 << bit)
    return u - 256 if u >= 128 else u


def flip_bit_inplace(q: QuantizedTensor, index: int, bit: int) -> int:
    """Toggle one stored bit; returns the new code."""
    _check_address(q, index, bit)
    flat = q.codes.reshape(-1)
    new = flip_code(flat[index], bit)
    flat[index] = new
    return new


def flip_bit(q: QuantizedTensor, addr: BitAddress | int, bit: int | None = None) -> QuantizedTensor:
    """Return a copy of ``q`` with exactly one bit toggled."""
    if isinstance(addr, BitAddress):
        index, bit = addr.index, addr.bit
    else:
        index = addr
    out = q.copy()
    flip_bit_inplace(out, index, bit)
    return out


def get_bit(code, bit: int):
    return (np.asarray(code).astype(np.int64) >> bit) & 1


def bit_weight_derivative(scale: float, code: int, k: int) -> float:
    """Change in dequantized weight when bit ``k`` of ``code`` is toggled.

    Equals ``+place(k) * scale`` when the bit is currently 0 and the negation
    when it is 1, i.e. ``dequant(flip(code, k)) - dequant(code)``.
    """
    if not 0 <= k < NBITS:
        raise ValueError(f"bit position {k} outside [0, 7]")
    d = float(PLACE_VALUES[k]) * scale
    return d if get_bit(code, k) == 0 else -d


def bit_gradients(q: QuantizedTensor, weight_grad: np.ndarray) -> np.ndarray:
    """dL/db for every stored bit, shape ``(size, 8)``.

    This is the loss slope along the 0->1 direction of each bit:
    ``dL/dw * place(k) * scale``, independent of the bit's current value.
    """
    g = np.asarray(weight_grad, dtype=np.float64).reshape(-1, 1)
    return g * (PLACE_VALUES.astype(np.float64) * q.scale)[None, :]
