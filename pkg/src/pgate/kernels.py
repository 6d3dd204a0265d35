"""Compute kernels: dense GEMM, sampled dense-dense matmul (SDDMM) for the
masked update phase, the matching masked backward products, and conv
lowering via im2col.

Numerics and determinism
    Every kernel accumulates in float64 with a fixed loop order, so a given
    input produces bit-identical float32 output on every run. The parallel
    variants split work across independent output rows only; per-element
    accumulation order never changes with the thread count.

MAC accounting
    Kernels count their multiply-accumulate operations exactly as executed:
    a dense M x K x N product costs M*N*K, a sampled product costs nnz*K
    where nnz is the number of sampled output coordinates. Wrapper
    functions add these to a module-level counter under a caller-chosen
    key, which is how the per-phase cost attribution in the training loop
    works.

The sampled kernels gather the active column indices of each output row
into a coordinate list first and then run contiguous K-length dot products
over a pre-transposed right operand, which keeps the inner loop
vectorizable and makes the nnz*K cost model an honest reflection of the
work done.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from numba import config as numba_config
from numba import njit, prange, set_num_threads

from .tensor import REAL_DTYPE


class MacCounter:
    """Tally of multiply-accumulate counts keyed by pipeline stage."""

    def __init__(self):
        self._counts: dict[str, int] = {}

    def add(self, key: str, n: int) -> None:
        self._counts[key] = self._counts.get(key, 0) + int(n)

    def get(self, key: str) -> int:
        return self._counts.get(key, 0)

    def snapshot(self) -> dict[str, int]:
        return dict(self._counts)

    def total(self, prefix: str = "") -> int:
        return sum(v for k, v in self._counts.items() if k.startswith(prefix))

    def reset(self) -> None:
        self._counts.clear()


MACS = MacCounter()


@dataclass
class MaskedProductPlan:
    """A sampled product out[m, n] = mask[m, n] * sum_k lhs[m, k] * rhs[k, n].

    The mask holds {0, 1} and fixes which output coordinates are computed;
    everything else stays exactly zero and costs nothing. The plan caches
    the transposed right operand so repeated execution (and timing) pays
    only for the sampled dot products themselves.
    """

    lhs: np.ndarray
    rhs: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.lhs.ndim != 2 or self.rhs.ndim != 2 or self.mask.ndim != 2:
            raise ValueError("plan operands must be 2-d")
        m, k = self.lhs.shape
        k2, n = self.rhs.shape
        if k != k2:
            raise ValueError(f"inner dims differ: lhs {self.lhs.shape}, rhs {self.rhs.shape}")
        if self.mask.shape != (m, n):
            raise ValueError(f"mask shape {self.mask.shape} does not match output ({m}, {n})")
        if self.mask.dtype.kind not in "iu":
            raise ValueError("mask must be an integer array of 0/1")
        if self.mask.size and not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("mask values must be 0 or 1")
        self._rhs_t = None

    def rhs_t(self) -> np.ndarray:
        if self._rhs_t is None:
            self._rhs_t = np.ascontiguousarray(self.rhs.T.astype(np.float64))
        return self._rhs_t

    @property
    def nnz(self) -> int:
        return int(self.mask.sum(dtype=np.int64))


@dataclass(frozen=True)
class BenchResult:
    kernel: str
    m: int
    k: int
    n: int
    sparsity: float
    threads: int
    time_ms: float
    mac_count: int
    speedup: float


@njit(cache=True)
def _gemm(a, b):
    m_dim, k_dim = a.shape
    n_dim = b.shape[1]
    out = np.zeros((m_dim, n_dim), np.float64)
    for m in range(m_dim):
        for k in range(k_dim):
            amk = np.float64(a[m, k])
            for n in range(n_dim):
                out[m, n] += amk * b[k, n]
    return out, m_dim * k_dim * n_dim


@njit(cache=True, parallel=True)
def _gemm_par(a, b):
    m_dim, k_dim = a.shape
    n_dim = b.shape[1]
    out = np.zeros((m_dim, n_dim), np.float64)
    for m in prange(m_dim):
        for k in range(k_dim):
            amk = np.float64(a[m, k])
            for n in range(n_dim):
                out[m, n] += amk * b[k, n]
    return out, m_dim * k_dim * n_dim


@njit(cache=True)
def _sddmm(lhs, rhs_t, mask):
    m_dim, k_dim = lhs.shape
    n_dim = rhs_t.shape[0]
    out = np.zeros((m_dim, n_dim), np.float64)
    cols = np.empty(n_dim, np.int64)
    macs = 0
    for m in range(m_dim):
        cnt = 0
        for n in range(n_dim):
            if mask[m, n] != 0:
                cols[cnt] = n
                cnt += 1
        # Four surviving columns share one pass over lhs[m, :]. Each output
        # still accumulates in ascending-k order with separate mul and add,
        # which keeps results bit-identical to the dense kernel.
        j = 0
        while j + 4 <= cnt:
            n0, n1, n2, n3 = cols[j], cols[j + 1], cols[j + 2], cols[j + 3]
            a0 = a1 = a2 = a3 = 0.0
            for k in range(k_dim):
                lmk = np.float64(lhs[m, k])
                a0 += lmk * rhs_t[n0, k]
                a1 += lmk * rhs_t[n1, k]
                a2 += lmk * rhs_t[n2, k]
                a3 += lmk * rhs_t[n3, k]
            out[m, n0] = a0
            out[m, n1] = a1
            out[m, n2] = a2
            out[m, n3] = a3
            j += 4
        while j < cnt:
            n = cols[j]
            acc = 0.0
            for k in range(k_dim):
                acc += np.float64(lhs[m, k]) * rhs_t[n, k]
            out[m, n] = acc
            j += 1
        macs += cnt * k_dim
    return out, macs


@njit(cache=True, parallel=True)
def _sddmm_par(lhs, rhs_t, mask):
    m_dim, k_dim = lhs.shape
    n_dim = rhs_t.shape[0]
    out = np.zeros((m_dim, n_dim), np.float64)
    macs = 0
    for m in prange(m_dim):
        cols = np.empty(n_dim, np.int64)
        cnt = 0
        for n in range(n_dim):
            if mask[m, n] != 0:
                cols[cnt] = n
                cnt += 1
        j = 0
        while j + 4 <= cnt:
            n0, n1, n2, n3 = cols[j], cols[j + 1], cols[j + 2], cols[j + 3]
            a0 = a1 = a2 = a3 = 0.0
            for k in range(k_dim):
                lmk = np.float64(lhs[m, k])
                a0 += lmk * rhs_t[n0, k]
                a1 += lmk * rhs_t[n1, k]
                a2 += lmk * rhs_t[n2, k]
                a3 += lmk * rhs_t[n3, k]
            out[m, n0] = a0
            out[m, n1] = a1
            out[m, n2] = a2
            out[m, n3] = a3
            j += 4
        while j < cnt:
            n = cols[j]
            acc = 0.0
            for k in range(k_dim):
                acc += np.float64(lhs[m, k]) * rhs_t[n, k]
            out[m, n] = acc
            j += 1
        macs += cnt * k_dim
    return out, macs


@njit(cache=True)
def _masked_grad_lhs(g, rhs_t, mask):
    # dLhs[m, k] = sum_n mask[m, n] * g[m, n] * rhs[k, n]
    m_dim, n_dim = g.shape
    k_dim = rhs_t.shape[1]
    out = np.zeros((m_dim, k_dim), np.float64)
    cols = np.empty(n_dim, np.int64)
    macs = 0
    for m in range(m_dim):
        cnt = 0
        for n in range(n_dim):
            if mask[m, n] != 0:
                cols[cnt] = n
                cnt += 1
        for j in range(cnt):
            n = cols[j]
            gmn = np.float64(g[m, n])
            for k in range(k_dim):
                out[m, k] += gmn * rhs_t[n, k]
        macs += cnt * k_dim
    return out, macs


@njit(cache=True)
def _masked_grad_rhs(g, lhs, mask):
    # dRhs[k, n] = sum_m mask[m, n] * g[m, n] * lhs[m, k]
    # accumulated transposed so the inner loop runs contiguously over k
    m_dim, n_dim = g.shape
    k_dim = lhs.shape[1]
    out_t = np.zeros((n_dim, k_dim), np.float64)
    cols = np.empty(n_dim, np.int64)
    macs = 0
    for m in range(m_dim):
        cnt = 0
        for n in range(n_dim):
            if mask[m, n] != 0:
                cols[cnt] = n
                cnt += 1
        for j in range(cnt):
            n = cols[j]
            gmn = np.float64(g[m, n])
            for k in range(k_dim):
                out_t[n, k] += gmn * lhs[m, k]
        macs += cnt * k_dim
    return out_t, macs


@njit(cache=True)
def _im2col(x, kh, kw, stride, pad, oh, ow):
    n_dim, c_dim, h_dim, w_dim = x.shape
    cols = np.zeros((c_dim * kh * kw, n_dim * oh * ow), np.float32)
    for n in range(n_dim):
        for c in range(c_dim):
            for ki in range(kh):
                for kj in range(kw):
                    row = (c * kh + ki) * kw + kj
                    for oi in range(oh):
                        ih = oi * stride - pad + ki
                        if ih < 0 or ih >= h_dim:
                            continue
                        for oj in range(ow):
                            iw = oj * stride - pad + kj
                            if 0 <= iw < w_dim:
                                cols[row, (n * oh + oi) * ow + oj] = x[n, c, ih, iw]
    return cols


@njit(cache=True)
def _col2im(dcols, n_dim, c_dim, h_dim, w_dim, kh, kw, stride, pad, oh, ow):
    dx = np.zeros((n_dim, c_dim, h_dim, w_dim), np.float64)
    for n in range(n_dim):
        for c in range(c_dim):
            for ki in range(kh):
                for kj in range(kw):
                    row = (c * kh + ki) * kw + kj
                    for oi in range(oh):
                        ih = oi * stride - pad + ki
                        if ih < 0 or ih >= h_dim:
                            continue
                        for oj in range(ow):
                            iw = oj * stride - pad + kj
                            if 0 <= iw < w_dim:
                                dx[n, c, ih, iw] += dcols[row, (n * oh + oi) * ow + oj]
    return dx.astype(np.float32)


_parallel_enabled = False


def use_threads(n: int) -> None:
    """Route kernels through the parallel variants with n worker threads.

    n = 1 restores the default sequential kernels. Requests beyond what the
    machine offers are clamped rather than rejected. Output values are
    identical either way; only wall time changes.
    """
    global _parallel_enabled
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    if n == 1:
        _parallel_enabled = False
    else:
        set_num_threads(min(n, numba_config.NUMBA_NUM_THREADS))
        _parallel_enabled = True


def gemm(a: np.ndarray, b: np.ndarray, counter_key: str = "gemm",
         out_dtype=REAL_DTYPE) -> np.ndarray:
    """Dense product a @ b with float64 accumulation.

    The result is cast once to out_dtype at the end; pass np.float64 to
    keep the raw accumulator values (the gated layers do, so their two
    phase outputs can be combined before any float32 rounding).
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("gemm operands must be 2-d")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dims differ: {a.shape} @ {b.shape}")
    a = np.ascontiguousarray(a, dtype=REAL_DTYPE)
    b = np.ascontiguousarray(b, dtype=REAL_DTYPE)
    fn = _gemm_par if _parallel_enabled else _gemm
    out, macs = fn(a, b)
    MACS.add(counter_key, macs)
    return out if out_dtype == np.float64 else out.astype(out_dtype)


def sddmm(plan: MaskedProductPlan, counter_key: str = "sddmm",
          out_dtype=REAL_DTYPE) -> np.ndarray:
    """Compute the sampled product described by the plan.

    Exactly plan.nnz * K multiply-accumulates are performed; unsampled
    coordinates are written as true zeros.
    """
    lhs = np.ascontiguousarray(plan.lhs, dtype=REAL_DTYPE)
    rhs_t = plan.rhs_t()
    mask = np.ascontiguousarray(plan.mask, dtype=np.uint8)
    fn = _sddmm_par if _parallel_enabled else _sddmm
    out, macs = fn(lhs, rhs_t, mask)
    MACS.add(counter_key, macs)
    return out if out_dtype == np.float64 else out.astype(out_dtype)


def masked_grad_lhs(g: np.ndarray, rhs: np.ndarray, mask: np.ndarray,
                    counter_key: str = "masked_grad_lhs") -> np.ndarray:
    """dLhs for a sampled product: dLhs[m, k] = sum_n mask*g[m, n]*rhs[k, n]."""
    if g.shape != mask.shape:
        raise ValueError(f"g shape {g.shape} does not match mask shape {mask.shape}")
    if rhs.shape[1] != g.shape[1]:
        raise ValueError(f"rhs shape {rhs.shape} does not match g shape {g.shape}")
    g = np.ascontiguousarray(g, dtype=REAL_DTYPE)
    rhs_t = np.ascontiguousarray(rhs.T.astype(np.float64))
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    out, macs = _masked_grad_lhs(g, rhs_t, mask)
    MACS.add(counter_key, macs)
    return out.astype(REAL_DTYPE)


def masked_grad_rhs(g: np.ndarray, lhs: np.ndarray, mask: np.ndarray,
                    counter_key: str = "masked_grad_rhs") -> np.ndarray:
    """dRhs for a sampled product: dRhs[k, n] = sum_m mask*g[m, n]*lhs[m, k]."""
    if g.shape != mask.shape:
        raise ValueError(f"g shape {g.shape} does not match mask shape {mask.shape}")
    if lhs.shape[0] != g.shape[0]:
        raise ValueError(f"lhs shape {lhs.shape} does not match g shape {g.shape}")
    g = np.ascontiguousarray(g, dtype=REAL_DTYPE)
    lhs64 = np.ascontiguousarray(lhs.astype(np.float64))
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    out_t, macs = _masked_grad_rhs(g, lhs64, mask)
    MACS.add(counter_key, macs)
    return np.ascontiguousarray(out_t.T.astype(REAL_DTYPE))


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    out = (size + 2 * pad - kernel) // stride + 1
    if out < 1:
        raise ValueError(f"kernel {kernel} with stride {stride}, pad {pad} does not fit input size {size}")
    return out


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Lower (N, C, H, W) input to a (C*kh*kw, N*OH*OW) patch matrix.

    Column order is n-major, then output row, then output column, which is
    the layout the conv layers assume when reshaping gemm results back to
    feature maps.
    """
    if x.ndim != 4:
        raise ValueError(f"expected (N, C, H, W) input, got shape {x.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"invalid stride {stride} or pad {pad}")
    n_dim, _, h_dim, w_dim = x.shape
    oh = conv_output_size(h_dim, kh, stride, pad)
    ow = conv_output_size(w_dim, kw, stride, pad)
    return _im2col(np.ascontiguousarray(x, dtype=REAL_DTYPE), kh, kw, stride, pad, oh, ow)


def col2im(dcols: np.ndarray, x_shape: tuple[int, int, int, int], kh: int, kw: int,
           stride: int = 1, pad: int = 0) -> np.ndarray:
    """Scatter-add patch-matrix gradients back to (N, C, H, W)."""
    n_dim, c_dim, h_dim, w_dim = x_shape
    oh = conv_output_size(h_dim, kh, stride, pad)
    ow = conv_output_size(w_dim, kw, stride, pad)
    expected = (c_dim * kh * kw, n_dim * oh * ow)
    if dcols.shape != expected:
        raise ValueError(f"expected patch gradient shape {expected}, got {dcols.shape}")
    return _col2im(np.ascontiguousarray(dcols, dtype=REAL_DTYPE),
                   n_dim, c_dim, h_dim, w_dim, kh, kw, stride, pad, oh, ow)


def resnet20_gemm_dims(batch_columns: int = 8) -> list[tuple[int, int, int]]:
    """GEMM shapes of the gated conv layers in a 20-layer residual net
    on 32x32 inputs, with N scaled by how many images share one call."""
    dims = []
    for cout, cin, spatial in [
        (16, 16, 1024), (16, 16, 1024), (16, 16, 1024),
        (32, 16, 256), (32, 32, 256), (32, 32, 256),
        (64, 32, 64), (64, 64, 64), (64, 64, 64),
    ]:
        dims.append((cout, cin * 9, spatial * batch_columns))
    return dims


def _random_mask(rng: np.random.Generator, m: int, n: int, sparsity: float) -> np.ndarray:
    nnz = int(round((1.0 - sparsity) * m * n))
    flat = np.zeros(m * n, dtype=np.uint8)
    if nnz > 0:
        flat[rng.choice(m * n, size=nnz, replace=False)] = 1
    return flat.reshape(m, n)


def _time_call(fn, repeats: int) -> float:
    fn()  # warm up (JIT compile, caches)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_kernels(dims: list[tuple[int, int, int]] | None = None,
                  sparsities: tuple[float, ...] = (0.5, 0.76, 0.9, 0.99),
                  repeats: int = 5,
                  threads: int = 1,
                  seed: int = 0) -> list[BenchResult]:
    """Time gemm against sddmm on the same operands.

    For every (M, K, N) one dense row is emitted (speedup 1.0 by
    definition) plus one sddmm row per sparsity level, with speedup =
    median gemm time / median sddmm time. Needs repeats >= 3 so the
    median is taken over an actual sample.
    """
    if repeats < 3:
        raise ValueError(f"repeats must be >= 3, got {repeats}")
    for sp in sparsities:
        if not 0.0 <= sp < 1.0:
            raise ValueError(f"sparsity must be in [0, 1), got {sp}")
    if dims is None:
        dims = resnet20_gemm_dims()
    rng = np.random.default_rng(seed)
    use_threads(threads)
    results = []
    try:
        for m, k, n in dims:
            lhs = rng.standard_normal((m, k), dtype=REAL_DTYPE)
            rhs = rng.standard_normal((k, n), dtype=REAL_DTYPE)
            t_gemm = _time_call(lambda: gemm(lhs, rhs, counter_key="bench_gemm"), repeats)
            results.append(BenchResult("gemm", m, k, n, 0.0, threads,
                                       t_gemm * 1e3, m * k * n, 1.0))
            for sp in sparsities:
                plan = MaskedProductPlan(lhs, rhs, _random_mask(rng, m, n, sp))
                t_s = _time_call(lambda: sddmm(plan, counter_key="bench_sddmm"), repeats)
                results.append(BenchResult("sddmm", m, k, n, sp, threads,
                                           t_s * 1e3, plan.nnz * k, t_gemm / t_s))
    finally:
        use_threads(1)
    return results
