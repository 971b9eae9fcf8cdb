"""Compiled recurrence kernel for the benchmark path.

The kernel runs the diagonal selective recurrence for one sequence with the
discretized parameters already materialized as (L, N) matrices. Channels are
processed in tiles so a tile of the state stays resident in L1 while the
time loop streams over the (L, N) parameter rows; the innermost loop runs
over the channels of a tile, so it vectorizes even for a handful of states.

Strongly decayed states drift into subnormal floats, which x86 cores handle
on a microcode slow path (more than 10x slower here). On x86 the kernel runs
with flush-to-zero / denormals-are-zero set in MXCSR and restores the
previous mode on exit; subnormal values are treated as 0.
"""

from __future__ import annotations

import platform

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
L1_BYTES = 32 * 1024
MIN_TILE, MAX_TILE = 16, 128
_X86 = platform.machine().lower() in ("x86_64", "amd64", "i686", "x86")
_FTZ_DAZ = 0x8040


def _scan_tiled(u, d_b, a_bar, c_read, h, y, tile):
    seqlen, d_inner = u.shape
    n_state = h.shape[1]
    # tile-local state (state-major), output accumulator and input row; local
    # buffers let the channel loop vectorize without alias checks
    h_t = np.empty((n_state, tile), dtype=h.dtype)
    acc = np.empty(tile, dtype=h.dtype)
    u_t = np.empty(tile, dtype=h.dtype)
    for i0 in range(0, d_inner, tile):
        w = min(tile, d_inner - i0)
        for s in range(n_state):
            for j in range(w):
                h_t[s, j] = h[i0 + j, s]
        for t in range(seqlen):
            for j in range(w):
                acc[j] = 0
                u_t[j] = u[t, i0 + j]
            for s in range(n_state):
                a = a_bar[t, s]
                b = d_b[t, s]
                c = c_read[t, s]
                for j in range(w):
                    v = a * h_t[s, j] + b * u_t[j]
                    h_t[s, j] = v
                    acc[j] += c * v
            for j in range(w):
                y[t, i0 + j] = acc[j]
        for s in range(n_state):
            for j in range(w):
                h[i0 + j, s] = h_t[s, j]


def channel_tile(n_state: int, itemsize: int) -> int:
    """Channels per tile so the tile's state fits in about L1_BYTES."""
    tile = L1_BYTES // max(1, n_state * itemsize)
    return int(min(MAX_TILE, max(MIN_TILE, tile)))


def _conv_taps(ext, w_taps, bias, out):
    # same accumulation order as the numpy path: bias, then tap 0, 1, ...
    seqlen, d = out.shape
    k = w_taps.shape[0]
    for t in range(seqlen):
        for c in range(d):
            out[t, c] = bias[c]
        for i in range(k):
            row = t + k - 1 - i
            for c in range(d):
                out[t, c] += w_taps[i, c] * ext[row, c]


if HAVE_NUMBA:
    from llvmlite import ir
    from numba import types
    from numba.extending import intrinsic

    def _mxcsr_call(builder, name, ptr):
        fnty = ir.FunctionType(ir.VoidType(), [ir.IntType(8).as_pointer()])
        fn = builder.module.declare_intrinsic(name, fnty=fnty)
        builder.call(fn, [builder.bitcast(ptr, ir.IntType(8).as_pointer())])

    @intrinsic
    def _get_mxcsr(typingctx):
        def codegen(context, builder, signature, args):
            ptr = builder.alloca(ir.IntType(32))
            _mxcsr_call(builder, "llvm.x86.sse.stmxcsr", ptr)
            return builder.load(ptr)

        return types.uint32(), codegen

    @intrinsic
    def _set_mxcsr(typingctx, value):
        def codegen(context, builder, signature, args):
            ptr = builder.alloca(ir.IntType(32))
            builder.store(args[0], ptr)
            _mxcsr_call(builder, "llvm.x86.sse.ldmxcsr", ptr)
            return context.get_dummy_value()

        return types.void(types.uint32), codegen

    _fastmath = {"reassoc", "contract", "nsz"}
    _scan_tiled_jit = numba.njit(cache=True, nogil=True, fastmath=_fastmath)(_scan_tiled)
    _conv_taps_jit = numba.njit(cache=True, nogil=True)(_conv_taps)

    if _X86:
        @numba.njit(cache=True, nogil=True)
        def _scan_ftz(u, d_b, a_bar, c_read, h, y, tile):
            saved = _get_mxcsr()
            _set_mxcsr(saved | np.uint32(_FTZ_DAZ))
            _scan_tiled_jit(u, d_b, a_bar, c_read, h, y, tile)
            _set_mxcsr(saved)
    else:  # pragma: no cover
        _scan_ftz = _scan_tiled_jit
else:  # pragma: no cover
    _scan_ftz = _conv_taps_jit = None


def conv_taps(ext, w_conv, bias, seqlen: int):
    """Pre-activation depthwise conv over ``ext`` ((k-1+L) x d, oldest first)."""
    out = np.empty((seqlen, ext.shape[1]), dtype=ext.dtype)
    _conv_taps_jit(np.ascontiguousarray(ext), np.ascontiguousarray(w_conv.T, dtype=ext.dtype),
                   bias.astype(ext.dtype, copy=False), out)
    return out


def fused_scan(u, d_b, a_bar, c_read, h0):
    """Run the recurrence in place on a copy of ``h0``; returns (y, h_last)."""
    if not HAVE_NUMBA:  # pragma: no cover
        raise RuntimeError("fused backend requires numba")
    dtype = h0.dtype
    u = np.ascontiguousarray(u, dtype=dtype)
    d_b = np.ascontiguousarray(d_b, dtype=dtype)
    a_bar = np.ascontiguousarray(a_bar, dtype=dtype)
    c_read = np.ascontiguousarray(c_read, dtype=dtype)
    h = np.array(h0, dtype=dtype, order="C", copy=True)
    y = np.empty((u.shape[0], u.shape[1]), dtype=dtype)
    _scan_ftz(u, d_b, a_bar, c_read, h, y, channel_tile(h.shape[1], h.itemsize))
    return y, h
