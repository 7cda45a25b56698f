"""MXFP4 block floating-point codec.

E2M1 4-bit elements (1 sign / 2 exponent / 1 mantissa bits) sharing one
E8M0 power-of-two scale per 32-element block along the reduction dimension.
Effective storage is 4.25 bits per element.

Quantization is the two-step direct cast: pick the largest power of two
<= max|block| divided by the largest E2M1 power of two (4), then round
each scaled element to the nearest representable E2M1 value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BLOCK_SIZE = 32

# E2M1 magnitudes for codes 0..7; codes 8..15 are the negated mirror.
# Code 0bSEEM: exponent 0 -> subnormal 0.5*m, exponent e -> 2^(e-1)*(1+0.5*m).
E2M1_MAGNITUDES = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0])

E2M1_MAX = 6.0
# Largest power of two representable in E2M1 (code 0b0110).
E2M1_MAX_POW2 = 4.0

# Bits per element including the amortized shared scale: 4 + 8/32.
BITS_PER_ELEMENT = 4.25

E8M0_BIAS = 127


class CodecError(ValueError):
    """Raised on invalid codec inputs (non-finite values, bad shapes)."""


def fp4_decode(codes):
    """Decode E2M1 code(s) to signed float magnitude. Total over all 16 codes."""
    codes = np.asarray(codes)
    mag = E2M1_MAGNITUDES[codes & 0x7]
    return np.where(codes & 0x8, -mag, mag)


def fp4_encode(values):
    """Encode finite float(s) to the nearest E2M1 code.

    Round-to-nearest with ties to the code whose mantissa bit is even;
    magnitudes above 6 clamp to the max normal, preserving sign.
    """
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise CodecError("fp4_encode requires finite inputs")
    mag = np.minimum(np.abs(v), E2M1_MAX)

    hi = np.searchsorted(E2M1_MAGNITUDES, mag, side="left")
    hi = np.clip(hi, 0, 7)
    lo = np.clip(hi - 1, 0, 7)
    d_lo = mag - E2M1_MAGNITUDES[lo]
    d_hi = E2M1_MAGNITUDES[hi] - mag
    # Adjacent grid codes alternate mantissa parity, so on an exact tie the
    # even-mantissa code is whichever of lo/hi has bit 0 clear.
    even = np.where(lo & 1, hi, lo)
    code = np.where(d_lo < d_hi, lo, np.where(d_hi < d_lo, hi, even))
    code = code.astype(np.uint8)
    code = np.where(np.signbit(v), code | 0x8, code)
    return code if code.ndim else np.uint8(code)


def fp4_to_int8_lut():
    """16-entry FP4 -> int8 table: entry = 2 * fp4_decode(code).

    The doubling makes every entry integral ({0, +-1, ..., +-12}); the
    compensating factor of 2^-1 is applied by the GEMM output scaling.
    """
    return (2.0 * fp4_decode(np.arange(16, dtype=np.uint8))).astype(np.int8)


def block_scale_exponents(block_max):
    """Biased E8M0 exponents for an array of per-block max|V| values.

    scale = 2^(floor(log2(max|V|)) - 2); all-zero blocks get scale 1.0.
    Returns (biased_exponents uint8, clamped_count).
    """
    m = np.asarray(block_max, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise CodecError("block_scale requires finite inputs")
    # frexp: m = f * 2^e with f in [0.5, 1), so floor(log2 m) == e - 1.
    _, e = np.frexp(m)
    biased = (e - 1) - 2 + E8M0_BIAS
    biased = np.where(m == 0.0, E8M0_BIAS, biased)
    clamped = int(np.sum((biased < 0) | (biased > 254)))
    return np.clip(biased, 0, 254).astype(np.uint8), clamped


def scale_values(biased_exponents):
    """E8M0 biased exponent(s) -> float power-of-two scale value(s)."""
    e = np.asarray(biased_exponents, dtype=np.float64)
    return np.exp2(e - E8M0_BIAS)


@dataclass
class MxfpTensor:
    """A rows x cols matrix in MXFP4 form, blocked along the column (K) axis.

    ``codes`` holds one unpacked E2M1 code per element over the zero-padded
    column count; ``scale_exp`` holds one biased E8M0 exponent per
    (row, 32-column block). ``cols`` is the logical (pre-padding) width.
    """

    rows: int
    cols: int
    codes: np.ndarray  # uint8, shape (rows, padded_cols)
    scale_exp: np.ndarray  # uint8, shape (rows, padded_cols // 32)
    layout: str = "k-blocked"
    clamped_blocks: int = 0

    @property
    def padded_cols(self) -> int:
        return self.codes.shape[1]

    @property
    def n_blocks(self) -> int:
        return self.scale_exp.size

    def storage_bytes(self) -> int:
        """Packed size: two codes per byte plus one scale byte per block."""
        return self.codes.size // 2 + self.scale_exp.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, MxfpTensor):
            return NotImplemented
        return (
            self.rows == other.rows
            and self.cols == other.cols
            and self.layout == other.layout
            and np.array_equal(self.codes, other.codes)
            and np.array_equal(self.scale_exp, other.scale_exp)
        )


def _pad_cols(x: np.ndarray) -> np.ndarray:
    k = x.shape[1]
    pad = (-k) % BLOCK_SIZE
    if pad:
        x = np.pad(x, ((0, 0), (0, pad)))
    return x


def quantize_direct_cast(tensor: np.ndarray) -> MxfpTensor:
    """Two-step direct cast of a float matrix to MXFP4.

    Columns are zero-padded to a multiple of 32; padding zeros never change a
    block's max|V| so they are included in the scale computation harmlessly.
    """
    x = np.asarray(tensor, dtype=np.float64)
    if x.ndim != 2:
        raise CodecError(f"expected a 2-D matrix, got shape {x.shape}")
    bad = ~np.isfinite(x)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise CodecError(f"non-finite entry at index {idx}")
    rows, cols = x.shape
    xp = _pad_cols(x)
    blocks = xp.reshape(rows, -1, BLOCK_SIZE)
    block_max = np.max(np.abs(blocks), axis=2)
    scale_exp, clamped = block_scale_exponents(block_max)
    scales = scale_values(scale_exp)
    codes = fp4_encode(blocks / scales[:, :, None]).reshape(rows, -1)
    return MxfpTensor(rows, cols, codes, scale_exp, clamped_blocks=clamped)


def dequantize(t: MxfpTensor) -> np.ndarray:
    """Inverse of the direct cast: element = fp4_decode(code) * block scale.

    Exact in float arithmetic (power-of-two scale times a 4-value mantissa set).
    """
    decoded = fp4_decode(t.codes).reshape(t.rows, -1, BLOCK_SIZE)
    out = decoded * scale_values(t.scale_exp)[:, :, None]
    return out.reshape(t.rows, -1)[:, : t.cols]


def decoded_weights(t: MxfpTensor):
    """(decoded E2M1 values over padded cols, per-block scale values).

    Kernel-facing view: scales are kept separate so late scaling can apply
    them once per 32-element partial accumulation.
    """
    return fp4_decode(t.codes).astype(np.float64), scale_values(t.scale_exp)


def bf16_truncate(x: np.ndarray) -> np.ndarray:
    """Round float32 data to the nearest bfloat16 value (returned as float)."""
    bits = np.asarray(x, dtype=np.float32).view(np.uint32)
    rounded = bits + 0x7FFF + ((bits >> 16) & 1)
    out = (rounded & 0xFFFF0000).view(np.float32)
    # NaN/Inf pass through untouched; direct-cast rejects them later anyway.
    special = ~np.isfinite(np.asarray(x, dtype=np.float32))
    return np.where(special, np.asarray(x, dtype=np.float32), out)
