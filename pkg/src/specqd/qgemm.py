"""Weight-quantized GEMM kernels for the skinny-N shapes of draft/verify.

Three paths sharing one arithmetic contract:

* ``gemm_reference``     — plain float GEMM, the oracle everything is
                           checked against (dequantize-then-multiply).
* ``gemm_mxfp4_latescale_f32`` — decodes E2M1 weights to float, accumulates
                           each 32-element block, then applies the block
                           scale once to the partial accumulator.
* ``gemm_mxfp4_int8``    — integer fast path: weights via the x2 FP4->int8
                           lookup table against int8 activations, one int32
                           partial per block, scaled by
                           weight_scale * activation_scale * 2^-1.

All kernels reduce sequentially over K per output element, so results are
independent of N-batching and of the worker thread count (parallelism is
only across disjoint output row ranges).
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .mxfp4 import (
    BITS_PER_ELEMENT,
    BLOCK_SIZE,
    CodecError,
    MxfpTensor,
    decoded_weights,
    fp4_to_int8_lut,
)

# max |LUT entry| * max |int8| * block size = 12 * 127 * 32
INT_PARTIAL_BOUND = 48_768

GEMM_PATHS = ("reference", "latescale_f32", "int8")


def fold_sum(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Pairwise-tree float summation with a layout-independent result.

    numpy's own reductions vectorize with alignment-dependent peeling, so
    their rounding can change with the buffer an operand happens to live in.
    A fixed halving tree built from elementwise adds is bit-deterministic,
    which the batch-equals-incremental and thread-invariance contracts need.
    """
    x = np.moveaxis(np.asarray(x, dtype=np.float64), axis, -1)
    if x.shape[-1] == 0:
        return np.zeros(x.shape[:-1])
    while x.shape[-1] > 1:
        n = x.shape[-1]
        half = n // 2
        y = x[..., : 2 * half : 2] + x[..., 1 : 2 * half : 2]
        if n % 2:
            y = np.concatenate([y, x[..., -1:]], axis=-1)
        x = y
    return x[..., 0]


class GemmShapeError(ValueError):
    """Operand shapes do not conform."""


@dataclass
class QuantizedActivationPanel:
    """Per-(32-row-block, column) symmetric int8 activations.

    values: int8, shape (K, N); scales: float, shape (K // 32, N).
    Dequantized activation = value * scale.
    """

    values: np.ndarray
    scales: np.ndarray

    @property
    def k(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class GemmShape:
    m: int
    n: int
    k: int

    def __post_init__(self):
        if self.m <= 0 or self.n <= 0 or self.k <= 0:
            raise GemmShapeError(f"non-positive dimension in {self}")
        if self.k % BLOCK_SIZE:
            raise GemmShapeError(f"K={self.k} not divisible by {BLOCK_SIZE}")


def default_threads() -> int:
    return max(1, int(os.environ.get("SPECQD_THREADS", "1")))


def _row_chunks(m: int, n_threads: int):
    n_threads = min(n_threads, m)
    bounds = np.linspace(0, m, n_threads + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _parallel_rows(kernel, m: int, n_threads: int) -> np.ndarray:
    """Run ``kernel(row_lo, row_hi)`` over disjoint row ranges and stack.

    Each row is computed by the same sequential reduction regardless of the
    chunking, so outputs are bit-identical for any thread count.
    """
    chunks = _row_chunks(m, n_threads)
    if len(chunks) == 1:
        return kernel(0, m)
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        parts = list(pool.map(lambda c: kernel(*c), chunks))
    return np.concatenate(parts, axis=0)


def gemm_reference(w: np.ndarray, a: np.ndarray, n_threads: int | None = None) -> np.ndarray:
    """Triple-loop float GEMM (M x K) @ (K x N); the comparison baseline.

    einsum without optimization keeps the per-element reduction sequential
    over K, which the bit-exactness suites rely on.
    """
    w = np.asarray(w, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if w.ndim != 2 or a.ndim != 2 or w.shape[1] != a.shape[0]:
        raise GemmShapeError(f"cannot multiply {w.shape} by {a.shape}")
    if n_threads is None:
        n_threads = default_threads()

    def kernel(lo, hi):
        wc = w[lo:hi]
        cols = [
            fold_sum(wc * a[:, j][None, :], axis=1)
            for j in range(a.shape[1])
        ]
        return np.stack(cols, axis=1)

    return _parallel_rows(kernel, w.shape[0], n_threads)


def quantize_activations(a: np.ndarray) -> QuantizedActivationPanel:
    """Symmetric int8 quantization, one scale per (32-row block, column).

    scale = max|block| / 127 (1.0 for an all-zero block); values rounded
    half-to-even and clamped to [-127, 127].
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] % BLOCK_SIZE:
        raise GemmShapeError(f"activation shape {a.shape} not K-blockable")
    if not np.all(np.isfinite(a)):
        raise CodecError("quantize_activations requires finite inputs")
    k, n = a.shape
    blocks = a.reshape(-1, BLOCK_SIZE, n)
    absmax = np.max(np.abs(blocks), axis=1)
    scales = np.where(absmax == 0.0, 1.0, absmax / 127.0)
    q = np.round(blocks / scales[:, None, :])
    values = np.clip(q, -127, 127).astype(np.int8).reshape(k, n)
    return QuantizedActivationPanel(values=values, scales=scales)


def dequantize_activations(panel: QuantizedActivationPanel) -> np.ndarray:
    blocks = panel.values.astype(np.float64).reshape(-1, BLOCK_SIZE, panel.n)
    return (blocks * panel.scales[:, None, :]).reshape(panel.k, panel.n)


def _check_weight_act(w: MxfpTensor, k: int):
    if w.padded_cols != k:
        raise GemmShapeError(
            f"weight K={w.padded_cols} does not match activation K={k}"
        )


def gemm_mxfp4_latescale_f32(
    w: MxfpTensor, a: np.ndarray, n_threads: int | None = None
) -> np.ndarray:
    """Late-scaling float path: scf * sum(w_i * a_i) per 32-element block."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise GemmShapeError(f"activations must be 2-D, got {a.shape}")
    _check_weight_act(w, a.shape[0])
    if n_threads is None:
        n_threads = default_threads()
    decoded, scales = decoded_weights(w)
    n = a.shape[1]
    a_blocks = a.reshape(-1, BLOCK_SIZE, n)

    def kernel(lo, hi):
        wb = decoded[lo:hi].reshape(hi - lo, -1, BLOCK_SIZE)
        sc = scales[lo:hi]
        cols = []
        for j in range(n):
            partial = fold_sum(wb * a_blocks[None, :, :, j], axis=2)
            cols.append(fold_sum(partial * sc, axis=1))
        return np.stack(cols, axis=1)

    return _parallel_rows(kernel, w.rows, n_threads)


def gemm_mxfp4_int8(
    w: MxfpTensor, a: QuantizedActivationPanel, n_threads: int | None = None
) -> np.ndarray:
    """Integer LUT path: int32 block dot products, late-scaled once per block.

    Per block the int32 partial is bounded by 12 * 127 * 32 = 48768, so it
    never overflows; the output scale folds in the LUT's x2 compensation as
    weight_scale * activation_scale * 0.5.
    """
    _check_weight_act(w, a.k)
    if n_threads is None:
        n_threads = default_threads()
    lut = fp4_to_int8_lut().astype(np.int32)
    w_int = lut[w.codes]
    act = a.values.astype(np.int32).reshape(-1, BLOCK_SIZE, a.n)
    w_scales = np.exp2(w.scale_exp.astype(np.float64) - 127.0)

    def kernel(lo, hi):
        wb = w_int[lo:hi].reshape(hi - lo, -1, BLOCK_SIZE)
        sc = w_scales[lo:hi]
        cols = []
        for j in range(a.n):
            # Integer partials are exact, so the reduction order is free here.
            partial = np.einsum("mbk,bk->mb", wb, act[:, :, j], optimize=False)
            out_scale = sc * (a.scales[None, :, j] * 0.5)
            cols.append(fold_sum(partial * out_scale, axis=1))
        return np.stack(cols, axis=1)

    return _parallel_rows(kernel, w.rows, n_threads)


def gemm_bytes(shape: GemmShape, path: str) -> int:
    """Compulsory traffic per iteration: weights + activations + output once.

    MXFP4 weights count 4.25 bits/element; the reference path counts 32-bit
    float weights. Activations and output count as 32-bit floats.
    """
    if path not in GEMM_PATHS:
        raise ValueError(f"unknown gemm path {path!r}")
    if path == "reference":
        weight_bytes = shape.m * shape.k * 4
    else:
        weight_bytes = int(shape.m * shape.k * BITS_PER_ELEMENT / 8)
    act_bytes = shape.k * shape.n * (1 if path == "int8" else 4)
    if path == "int8":
        act_bytes += (shape.k // BLOCK_SIZE) * shape.n * 4  # activation scales
    out_bytes = shape.m * shape.n * 4
    return weight_bytes + act_bytes + out_bytes


@dataclass
class BenchResult:
    path: str
    shape: GemmShape
    bytes_per_iter: int
    seconds: float
    gbps: float

    def csv_row(self) -> str:
        s = self.shape
        return (
            f"{self.path},{s.m},{s.n},{s.k},{self.bytes_per_iter},"
            f"{self.seconds:.9f},{self.gbps:.6f}"
        )


BENCH_CSV_HEADER = "path,M,N,K,bytes,seconds,gbps"


def gemm_bench(
    shape: GemmShape,
    path: str = "int8",
    repetitions: int = 9,
    warmups: int = 2,
    rng: np.random.Generator | None = None,
) -> BenchResult:
    """Median-of-repetitions timing of one kernel invocation."""
    if path not in GEMM_PATHS:
        raise ValueError(f"unknown gemm path {path!r}")
    repetitions = max(9, repetitions)
    rng = rng or np.random.default_rng(0)
    w_f = rng.standard_normal((shape.m, shape.k))
    a = rng.standard_normal((shape.k, shape.n))
    if path == "reference":
        run = lambda: gemm_reference(w_f, a)
    else:
        from .mxfp4 import quantize_direct_cast

        w_q = quantize_direct_cast(w_f)
        if path == "latescale_f32":
            run = lambda: gemm_mxfp4_latescale_f32(w_q, a)
        else:
            panel = quantize_activations(a)
            run = lambda: gemm_mxfp4_int8(w_q, panel)
    for _ in range(warmups):
        run()
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        run()
        times.append(time.perf_counter() - t0)
    seconds = float(np.median(times))
    nbytes = gemm_bytes(shape, path)
    return BenchResult(path, shape, nbytes, seconds, nbytes / seconds / 1e9)
