"""Numba compute kernels with shape-independent numerics.

Every reduction here runs strictly sequentially over its K axis (no
reassociation, no FMA contraction — numba default strict FP). That gives
two properties the engine's equivalence oracles rely on:

* row independence: row i of a result depends only on row i of the
  left operand, so an M=1 call is bit-identical to the same row of an
  M=64 call (batched == unbatched);
* zero-extension: appending or prepending zero terms to a reduction
  leaves the result bit-identical (cached attention over ``len`` slots
  == full attention over T slots with masked tails; left-padding is
  exact).

The serial and parallel variants compile from the same loop nest and are
asserted bitwise-equal in the test suite; dispatch between them is a pure
performance decision.

All kernels take and return float32. Half-precision storage is handled by
the callers (upcast at the boundary, round-to-nearest-even on the way
back), matching the 16-bit-storage / 32-bit-accumulation policy.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

ACT_NONE = 0
ACT_GELU = 1

_EMPTY_F32 = np.zeros(0, dtype=np.float32)

# tanh-approximation constants, kept in f32 so fused and unfused paths
# evaluate the identical expression
_GELU_C = np.float32(0.7978845608028654)  # sqrt(2/pi)
_GELU_A = np.float32(0.044715)
_HALF = np.float32(0.5)
_ONE = np.float32(1.0)


@njit(cache=True, nogil=True, inline="always")
def _gelu_scalar(x):
    inner = _GELU_C * (x + _GELU_A * (x * x * x))
    return _HALF * x * (_ONE + np.tanh(inner))


@njit(cache=True, nogil=True)
def gemm_serial(a, b, bias, has_bias, act, out):
    M, K = a.shape
    N = b.shape[1]
    for i in range(M):
        row = out[i]
        for j in range(N):
            row[j] = 0.0
        for k in range(K):
            aik = a[i, k]
            bk = b[k]
            for j in range(N):
                row[j] += aik * bk[j]
        if has_bias:
            for j in range(N):
                row[j] += bias[j]
        if act == ACT_GELU:
            for j in range(N):
                row[j] = _gelu_scalar(row[j])


@njit(cache=True, nogil=True, parallel=True)
def gemm_parallel(a, b, bias, has_bias, act, out):
    M, K = a.shape
    N = b.shape[1]
    for i in prange(M):
        row = out[i]
        for j in range(N):
            row[j] = 0.0
        for k in range(K):
            aik = a[i, k]
            bk = b[k]
            for j in range(N):
                row[j] += aik * bk[j]
        if has_bias:
            for j in range(N):
                row[j] += bias[j]
        if act == ACT_GELU:
            for j in range(N):
                row[j] = _gelu_scalar(row[j])


# parallel gemm pays off once there are enough rows to split and enough
# arithmetic to amortize the fork
_GEMM_PAR_MIN_ROWS = 4
_GEMM_PAR_MIN_WORK = 1 << 18


def gemm_f32(a: np.ndarray, b: np.ndarray, bias: np.ndarray | None = None,
             act: int = ACT_NONE, out: np.ndarray | None = None) -> np.ndarray:
    """Dispatching f32 GEMM: out = a @ b (+ bias) (then activation)."""
    M, K = a.shape
    N = b.shape[1]
    if out is None:
        out = np.empty((M, N), dtype=np.float32)
    has_bias = bias is not None
    bias_arr = bias if has_bias else _EMPTY_F32
    if M >= _GEMM_PAR_MIN_ROWS and M * K * N >= _GEMM_PAR_MIN_WORK:
        gemm_parallel(a, b, bias_arr, has_bias, act, out)
    else:
        gemm_serial(a, b, bias_arr, has_bias, act, out)
    return out


@njit(cache=True, nogil=True)
def bias_add(x, bias):
    M, N = x.shape
    for i in range(M):
        for j in range(N):
            x[i, j] += bias[j]


@njit(cache=True, nogil=True)
def gelu(x, out):
    n = x.size
    xf = x.reshape(n)
    of = out.reshape(n)
    for i in range(n):
        of[i] = _gelu_scalar(xf[i])


@njit(cache=True, nogil=True)
def softmax_rows_kernel(x, out):
    # max-subtracted, sequential row sum: stable and length-extension exact
    M, N = x.shape
    for i in range(M):
        m = x[i, 0]
        for j in range(1, N):
            if x[i, j] > m:
                m = x[i, j]
        s = np.float32(0.0)
        for j in range(N):
            e = np.float32(np.exp(x[i, j] - m))
            out[i, j] = e
            s += e
        inv = np.float32(1.0) / s
        for j in range(N):
            out[i, j] *= inv


@njit(cache=True, nogil=True)
def _attend_row(q, k, v, lo, hi, scale, scores, out_row):
    # one query row: scores over slots [lo, hi), softmax, weighted sum of v
    D = q.shape[0]
    if hi <= lo:
        # left-pad query rows see an empty window; they are dead rows whose
        # output never reaches a real position, but must stay finite
        for d in range(D):
            out_row[d] = 0.0
        return
    m = np.float32(-np.inf)
    for s in range(lo, hi):
        acc = np.float32(0.0)
        ks = k[s]
        for d in range(D):
            acc += q[d] * ks[d]
        acc *= scale
        scores[s] = acc
        if acc > m:
            m = acc
    z = np.float32(0.0)
    for s in range(lo, hi):
        e = np.float32(np.exp(scores[s] - m))
        scores[s] = e
        z += e
    inv = np.float32(1.0) / z
    for d in range(D):
        out_row[d] = 0.0
    for s in range(lo, hi):
        w = scores[s] * inv
        vs = v[s]
        for d in range(D):
            out_row[d] += w * vs[d]


@njit(cache=True, nogil=True)
def attend_serial(q, k, v, start, qbase, scale, out):
    B, NH, Tq, D = q.shape
    L = k.shape[2]
    scores = np.empty(L, dtype=np.float32)
    for b in range(B):
        lo = start[b]
        for h in range(NH):
            for t in range(Tq):
                hi = qbase + t + 1
                _attend_row(q[b, h, t], k[b, h], v[b, h], lo, hi, scale,
                            scores, out[b, h, t])


@njit(cache=True, nogil=True, parallel=True)
def attend_parallel(q, k, v, start, qbase, scale, out):
    B, NH, Tq, D = q.shape
    L = k.shape[2]
    for r in prange(B * NH * Tq):
        b = r // (NH * Tq)
        h = (r // Tq) % NH
        t = r % Tq
        scores = np.empty(L, dtype=np.float32)
        lo = start[b]
        hi = qbase + t + 1
        _attend_row(q[b, h, t], k[b, h], v[b, h], lo, hi, scale,
                    scores, out[b, h, t])


_ATTEND_PAR_MIN_ROWS = 8
_ATTEND_PAR_MIN_WORK = 1 << 17


def attend_f32(q: np.ndarray, k: np.ndarray, v: np.ndarray, start: np.ndarray,
               qbase: int, scale: float) -> np.ndarray:
    """Masked scaled-dot-product attention over cache slots.

    q: [B, NH, Tq, D] query rows, k/v: [B, NH, L, D] key/value slots
    (typically strided views into a larger cache), start: [B] first valid
    slot per sequence (left-pad offset).  Query row t attends to slots
    [start[b], qbase + t].  Returns [B, NH, Tq, D].
    """
    B, NH, Tq, D = q.shape
    out = np.empty((B, NH, Tq, D), dtype=np.float32)
    rows = B * NH * Tq
    work = rows * k.shape[2] * D
    if rows >= _ATTEND_PAR_MIN_ROWS and work >= _ATTEND_PAR_MIN_WORK:
        attend_parallel(q, k, v, start, qbase, np.float32(scale), out)
    else:
        attend_serial(q, k, v, start, qbase, np.float32(scale), out)
    return out


def warmup() -> None:
    """Force-compile all kernels (first call in a fresh environment is slow)."""
    a = np.ones((4, 4), dtype=np.float32)
    b = np.ones((4, 4), dtype=np.float32)
    bias = np.ones(4, dtype=np.float32)
    out = np.empty((4, 4), dtype=np.float32)
    gemm_serial(a, b, bias, True, ACT_GELU, out)
    gemm_parallel(a, b, bias, True, ACT_GELU, out)
    bias_add(out, bias)
    gelu(a, out)
    softmax_rows_kernel(a, out)
    q = np.ones((2, 2, 2, 4), dtype=np.float32)
    kv = np.ones((2, 2, 3, 4), dtype=np.float32)
    start = np.zeros(2, dtype=np.int64)
    o = np.empty((2, 2, 2, 4), dtype=np.float32)
    attend_serial(q, kv, kv, start, 1, np.float32(1.0), o)
    attend_parallel(q, kv, kv, start, 1, np.float32(1.0), o)
