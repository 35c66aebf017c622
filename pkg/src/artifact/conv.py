"""Convolution, pooling and resize operations for 2D and 3D feature maps.

Layout is channels-first: ``(batch, channels, *spatial)``.  Kernels work in a
``(channels, batch * spatial)`` layout so that each kernel tap is one GEMM.
Stride-1 convolutions shift a flat view of the padded input instead of
gathering patches, so no im2col buffer is ever materialized.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor, as_completed

import numpy as np

from .tensor import DTYPE, Tensor, is_deterministic, make_node, num_threads


# below this many input channels per-tap GEMMs beat the stacked-tap GEMM
_STACK_MIN_CHANNELS = 4
_CHUNK = 1 << 16


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _taps(kernel: tuple[int, ...]):
    return list(itertools.product(*[range(k) for k in kernel]))


def _pad_channels_first(xt: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return np.ascontiguousarray(xt)
    widths = [(0, 0), (0, 0)] + [(pad, pad)] * (xt.ndim - 2)
    return np.pad(xt, widths)


class _Kernel:
    """Forward/backward of a plain (bias-free) convolution on one batch chunk."""

    def __init__(self, xp: np.ndarray, w: np.ndarray, stride: int, out_shape: tuple[int, ...]):
        self.xp = xp  # (Cin, B, *Sp)
        self.w = w
        self.stride = stride
        self.out_shape = out_shape
        self.kernel = w.shape[2:]
        self.taps = _taps(self.kernel)

    # stride-1 flat-shift path
    def _flat(self):
        cin, b = self.xp.shape[:2]
        sp = self.xp.shape[2:]
        p = int(np.prod(sp))
        pstr = [int(np.prod(sp[i + 1:])) for i in range(len(sp))]
        offs = [int(np.dot(t, pstr)) for t in self.taps]
        span = b * p - int(np.dot([k - 1 for k in self.kernel], pstr))
        return self.xp.reshape(cin, b * p), offs, span, sp

    def _valid(self):
        return (slice(None), slice(None)) + tuple(slice(0, o) for o in self.out_shape)

    def _strided(self, tap):
        s = self.stride
        return (slice(None), slice(None)) + tuple(
            slice(t, t + s * (o - 1) + 1, s) for t, o in zip(tap, self.out_shape)
        )

    def _stacked(self, transposed: bool = False) -> np.ndarray:
        """All taps as one (taps*rows, cols) matrix for a single large GEMM."""
        w = self.w.transpose(1, 0, *range(2, self.w.ndim)) if transposed else self.w
        return np.ascontiguousarray(
            np.stack([w[(slice(None), slice(None)) + t] for t in self.taps]).reshape(-1, w.shape[1])
        )

    def forward(self) -> np.ndarray:
        cout = self.w.shape[0]
        cin, b = self.xp.shape[:2]
        if self.stride == 1:
            x2, offs, span, sp = self._flat()
            acc = np.zeros((cout, x2.shape[1]), dtype=DTYPE)
            if cin < _STACK_MIN_CHANNELS:
                head = acc[:, :span]
                for tap, off in zip(self.taps, offs):
                    head += self.w[(slice(None), slice(None)) + tap] @ x2[:, off:off + span]
            else:
                w_all = self._stacked()
                halo = offs[-1]
                for a in range(0, span, _CHUNK):
                    c = min(_CHUNK, span - a)
                    y = (w_all @ x2[:, a:a + c + halo]).reshape(len(offs), cout, -1)
                    dst = acc[:, a:a + c]
                    for k, off in enumerate(offs):
                        dst += y[k, :, off:off + c]
            return np.ascontiguousarray(acc.reshape((cout, b) + sp)[self._valid()])
        n_out = b * int(np.prod(self.out_shape))
        acc = np.zeros((cout, n_out), dtype=DTYPE)
        for tap in self.taps:
            view = self.xp[self._strided(tap)].reshape(cin, n_out)
            acc += self.w[(slice(None), slice(None)) + tap] @ view
        return acc.reshape((cout, b) + self.out_shape)

    def backward(self, gt: np.ndarray, need_x: bool, need_w: bool):
        """``gt`` is the output gradient in (Cout, B, *O) layout."""
        cout = self.w.shape[0]
        cin, b = self.xp.shape[:2]
        dw = np.zeros_like(self.w) if need_w else None
        dxp = None
        if self.stride == 1:
            x2, offs, span, sp = self._flat()
            gfull = np.zeros((cout, b) + sp, dtype=DTYPE)
            gfull[self._valid()] = gt
            g2 = gfull.reshape(cout, -1)[:, :span]
            if need_w:
                for tap, off in zip(self.taps, offs):
                    dw[(slice(None), slice(None)) + tap] = g2 @ x2[:, off:off + span].T
            dx2 = np.zeros_like(x2) if need_x else None
            if need_x and cout < _STACK_MIN_CHANNELS:
                for tap, off in zip(self.taps, offs):
                    dx2[:, off:off + span] += self.w[(slice(None), slice(None)) + tap].T @ g2
            elif need_x:
                w_all_t = self._stacked(transposed=True)
                for a in range(0, span, _CHUNK):
                    c = min(_CHUNK, span - a)
                    q = (w_all_t @ g2[:, a:a + c]).reshape(len(offs), cin, c)
                    for k, off in enumerate(offs):
                        dx2[:, a + off:a + off + c] += q[k]
            if need_x:
                dxp = dx2.reshape(self.xp.shape)
            return dxp, dw
        n_out = b * int(np.prod(self.out_shape))
        g2 = gt.reshape(cout, n_out)
        if need_x:
            dxp = np.zeros_like(self.xp)
        for tap in self.taps:
            idx = (slice(None), slice(None)) + tap
            sl = self._strided(tap)
            if need_w:
                dw[idx] = g2 @ self.xp[sl].reshape(cin, n_out).T
            if need_x:
                dxp[sl] += (self.w[idx].T @ g2).reshape((cin, b) + self.out_shape)
        return dxp, dw


def _chunks(batch: int) -> list[slice]:
    workers = min(num_threads(), batch)
    if workers <= 1:
        return [slice(0, batch)]
    edges = np.linspace(0, batch, workers + 1).astype(int)
    return [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _run(fn, items):
    """Apply ``fn`` to ``items`` in parallel; returns results in item order
    plus the order in which they completed."""
    if len(items) == 1:
        return [fn(items[0])], [0]
    with ThreadPoolExecutor(max_workers=len(items)) as pool:
        futures = {pool.submit(fn, it): i for i, it in enumerate(items)}
        results = [None] * len(items)
        finished = []
        for fut in as_completed(futures):
            i = futures[fut]
            results[i] = fut.result()
            finished.append(i)
    return results, finished


def conv(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """N-d cross-correlation (N = 2 or 3) with optional per-channel bias."""
    dims = kernel.ndim - 2
    if dims not in (2, 3):
        raise ValueError(f"conv supports 2 or 3 spatial dims, kernel shape {kernel.shape}")
    if x.ndim != dims + 2:
        raise ValueError(f"conv{dims}d expects input rank {dims + 2}, got shape {x.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(f"conv: input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    spatial = x.shape[2:]
    ksize = kernel.shape[2:]
    for n, k in zip(spatial, ksize):
        if k > n + 2 * padding:
            raise ValueError(f"conv: kernel {ksize} larger than padded input {spatial} (padding {padding})")
    out_shape = tuple(_out_size(n, k, stride, padding) for n, k in zip(spatial, ksize))
    batch = x.shape[0]
    perm = (1, 0) + tuple(range(2, dims + 2))
    xp = _pad_channels_first(x.data.transpose(perm), padding)
    w = kernel.data
    parts = _chunks(batch)
    kernels = [_Kernel(np.ascontiguousarray(xp[:, sl]), w, stride, out_shape) for sl in parts]
    outs, _ = _run(lambda k: k.forward(), kernels)
    out_t = np.concatenate(outs, axis=1) if len(outs) > 1 else outs[0]
    out = np.ascontiguousarray(out_t.transpose(perm))
    if bias is not None:
        out += bias.data.reshape((1, -1) + (1,) * dims)

    def bw(g):
        need_x, need_w = x.requires_grad, kernel.requires_grad
        gt = np.ascontiguousarray(g.transpose(perm))
        results, finished = _run(
            lambda i: kernels[i].backward(np.ascontiguousarray(gt[:, parts[i]]), need_x, need_w),
            list(range(len(kernels))),
        )
        dx = dw = db = None
        if need_w:
            order = range(len(results)) if is_deterministic() else finished
            dw = np.zeros_like(w)
            for i in order:
                dw += results[i][1]
        if need_x:
            dxp = np.concatenate([r[0] for r in results], axis=1) if len(results) > 1 else results[0][0]
            if padding:
                dxp = dxp[(slice(None), slice(None)) + (slice(padding, -padding),) * dims]
            dx = np.ascontiguousarray(dxp.transpose(perm))
        if bias is not None and bias.requires_grad:
            db = g.sum(axis=(0,) + tuple(range(2, dims + 2)))
        return dx, dw, db

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_node(out, parents, bw, f"conv{dims}d")


def conv_transpose2(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Transposed convolution with a size-2, stride-2 kernel of shape (Cin, Cout, 2, ...)."""
    dims = x.ndim - 2
    if kernel.shape[2:] != (2,) * dims or kernel.shape[0] != x.shape[1]:
        raise ValueError(f"conv_transpose2: kernel {kernel.shape} incompatible with input {x.shape}")
    cin, cout = kernel.shape[:2]
    batch, spatial = x.shape[0], x.shape[2:]
    perm = (1, 0) + tuple(range(2, dims + 2))
    xt = np.ascontiguousarray(x.data.transpose(perm)).reshape(cin, -1)
    w = kernel.data
    taps = _taps((2,) * dims)
    big = tuple(2 * n for n in spatial)
    out_t = np.empty((cout, batch) + big, dtype=DTYPE)

    def phase(tap):
        return (slice(None), slice(None)) + tuple(slice(t, None, 2) for t in tap)

    for tap in taps:
        out_t[phase(tap)] = (w[(slice(None), slice(None)) + tap].T @ xt).reshape((cout, batch) + spatial)
    out = np.ascontiguousarray(out_t.transpose(perm))
    if bias is not None:
        out += bias.data.reshape((1, -1) + (1,) * dims)

    def bw(g):
        gt = np.ascontiguousarray(g.transpose(perm))
        dx = np.zeros_like(xt) if x.requires_grad else None
        dw = np.zeros_like(w) if kernel.requires_grad else None
        for tap in taps:
            gp = np.ascontiguousarray(gt[phase(tap)]).reshape(cout, -1)
            idx = (slice(None), slice(None)) + tap
            if dx is not None:
                dx += w[idx] @ gp
            if dw is not None:
                dw[idx] = xt @ gp.T
        if dx is not None:
            dx = np.ascontiguousarray(dx.reshape((cin, batch) + spatial).transpose(perm))
        db = g.sum(axis=(0,) + tuple(range(2, dims + 2))) if bias is not None and bias.requires_grad else None
        return dx, dw, db

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_node(out, parents, bw, "conv_transpose2")


def avg_pool2(x: Tensor) -> Tensor:
    dims = x.ndim - 2
    spatial = x.shape[2:]
    if any(n % 2 for n in spatial):
        raise ValueError(f"avg_pool2 needs even spatial sizes, got {spatial}")
    split = x.shape[:2] + tuple(v for n in spatial for v in (n // 2, 2))
    axes = tuple(3 + 2 * i for i in range(dims))
    out = x.data.reshape(split).mean(axis=axes)
    scale = 1.0 / 2 ** dims

    def bw(g):
        for ax in range(2, dims + 2):
            g = np.repeat(g, 2, axis=ax)
        return (g * scale,)

    return make_node(out, (x,), bw, "avg_pool2")


def upsample_nearest2(x: Tensor) -> Tensor:
    dims = x.ndim - 2
    spatial = x.shape[2:]
    out = x.data
    for ax in range(2, dims + 2):
        out = np.repeat(out, 2, axis=ax)
    split = x.shape[:2] + tuple(v for n in spatial for v in (n, 2))
    axes = tuple(3 + 2 * i for i in range(dims))
    return make_node(out, (x,), lambda g: (g.reshape(split).sum(axis=axes),), "upsample2")


def pool_and_resize(x: Tensor, kind: str, kernel: Tensor | None = None, bias: Tensor | None = None) -> Tensor:
    if kind == "avg-pool-2":
        return avg_pool2(x)
    if kind == "nearest-upsample-2":
        return upsample_nearest2(x)
    if kind == "transpose-conv-2":
        if kernel is None:
            raise ValueError("transpose-conv-2 needs a kernel")
        return conv_transpose2(x, kernel, bias)
    raise ValueError(f"unknown resize kind {kind!r}")
