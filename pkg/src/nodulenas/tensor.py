"""Minimal reverse-mode autodiff engine for dense volumetric tensors.

Activations use the (batch, channel, depth, height, width) layout. All data is
float64; desk-scale networks are small enough that precision beats memory here,
and the strict finite-difference tolerances in the test suite rely on it.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy import fft as sfft


class TensorError(ValueError):
    """Shape mismatch, non-finite values, or other tensor-level misuse."""


class MissingGradError(TensorError):
    """An optimizer step was requested for a parameter without a gradient."""


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """A dense float64 array with an optional gradient and a backward tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 parents: tuple = (), backward: Optional[Callable] = None):
        self.data = _as_array(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def assert_finite(self, where: str = "tensor"):
        if not np.all(np.isfinite(self.data)):
            raise TensorError(f"non-finite values in {where}")
        return self

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += grad

    def _accumulate_owned(self, grad: np.ndarray):
        # fast path for callers handing over a freshly allocated array
        if self.grad is None:
            self.grad = grad
        else:
            self.grad += grad

    def backward(self):
        """Backpropagate from this (scalar) tensor through the tape."""
        if self.data.size != 1:
            raise TensorError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # convenience arithmetic used by layers and losses
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape)


class Parameter(Tensor):
    """A trainable tensor with Adam moment buffers and a step counter."""

    __slots__ = ("m", "v", "step")

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0


_grad_enabled = True


class no_grad:
    """Context manager that suspends tape construction (for eval/inference)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _needs_grad(*tensors: Tensor) -> bool:
    return _grad_enabled and any(t.requires_grad for t in tensors)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _wrap(data, parents, backward) -> Tensor:
    if not _needs_grad(*parents):
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=tuple(parents),
                  backward=backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _wrap(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate_owned(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate_owned(_unbroadcast(g * a.data, b.data.shape))

    return _wrap(out_data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate_owned(g * c)

    return _wrap(a.data * c, (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return _wrap(a.data.reshape(shape), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _wrap(out_data, tuple(tensors), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        if a.requires_grad:
            a._accumulate_owned(g * mask)

    return _wrap(a.data * mask, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        if a.requires_grad:
            a._accumulate_owned(g * out_data * (1.0 - out_data))

    return _wrap(out_data, (a,), backward)


def activation(a: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise TensorError(f"unknown activation kind: {kind!r}")


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g):
        if a.requires_grad:
            a._accumulate_owned(np.full_like(a.data, float(g) / n))

    return _wrap(a.data.mean(), (a,), backward)


# FFT pays off once the direct method would do at least this many
# kernel-voxel multiply-accumulates per (batch, channel) pair
_FFT_MIN_MACS = 16384


def _corr_loop(xp: np.ndarray, w: np.ndarray, stride: int,
               outs: tuple[int, int, int]) -> np.ndarray:
    """Offset-loop cross-correlation: one (C_out, C_in) matmul per kernel offset."""
    B, cin = xp.shape[:2]
    cout, _, k = w.shape[:3]
    Do, Ho, Wo = outs
    s = stride
    out = np.zeros((B, cout, Do, Ho, Wo))
    for a in range(k):
        for b in range(k):
            for c in range(k):
                xs = xp[:, :, a:a + s * Do:s, b:b + s * Ho:s, c:c + s * Wo:s]
                xs2 = np.ascontiguousarray(xs).reshape(B, cin, -1)
                out += (w[:, :, a, b, c] @ xs2).reshape(B, cout, Do, Ho, Wo)
    return out


def _axis_segments(lo: int, count: int, n: int) -> list[tuple[slice, slice]]:
    """(dst, src) slice pairs covering lags [lo, lo+count) of a length-n circular axis."""
    src0 = lo % n
    first = min(count, n - src0)
    segs = [(slice(0, first), slice(src0, src0 + first))]
    if first < count:
        segs.append((slice(first, count), slice(0, count - first)))
    return segs


def _gather_lags(z: np.ndarray, lows: tuple[int, int, int],
                 counts: tuple[int, int, int]) -> np.ndarray:
    """Extract a contiguous lag window from a circular-correlation result."""
    ns = z.shape[2:]
    out = np.empty(z.shape[:2] + counts)
    for d0, s0 in _axis_segments(lows[0], counts[0], ns[0]):
        for d1, s1 in _axis_segments(lows[1], counts[1], ns[1]):
            for d2, s2 in _axis_segments(lows[2], counts[2], ns[2]):
                out[:, :, d0, d1, d2] = z[:, :, s0, s1, s2]
    return out


class _FftConv:
    """Shared-transform FFT engine for one stride-1 conv3d call.

    All of forward output, input gradient and weight gradient are circular
    correlations/convolutions at different lag windows of the same three
    spectra, so each array is transformed exactly once per pass.
    """

    def __init__(self, x: np.ndarray, w: np.ndarray, padding: int,
                 outs: tuple[int, int, int]):
        k = w.shape[2]
        self.k = k
        self.padding = padding
        self.in_spatial = x.shape[2:]
        # trailing zeros of max(k - 1, padding) keep negative lags clean, and
        # the transform must cover the largest positive lag plus the kernel so
        # no term of any requested lag wraps circularly back onto the data
        margin = max(k - 1, padding)
        self.fshape = tuple(
            sfft.next_fast_len(max(n + margin, o - 1 - padding + k))
            for n, o in zip(x.shape[2:], outs))
        self.outs = outs
        self.Xf = sfft.rfftn(x, s=self.fshape, axes=(2, 3, 4))
        self.Wf = sfft.rfftn(w, s=self.fshape, axes=(2, 3, 4))

    def forward(self) -> np.ndarray:
        Yf = np.einsum("bcxyz,ocxyz->boxyz", self.Xf, self.Wf.conj())
        y = sfft.irfftn(Yf, s=self.fshape, axes=(2, 3, 4))
        return _gather_lags(y, (-self.padding,) * 3, self.outs)

    def grad_x(self, Gf: np.ndarray) -> np.ndarray:
        Zf = np.einsum("boxyz,ocxyz->bcxyz", Gf, self.Wf)
        z = sfft.irfftn(Zf, s=self.fshape, axes=(2, 3, 4))
        return _gather_lags(z, (self.padding,) * 3, self.in_spatial)

    def grad_w(self, Gf: np.ndarray) -> np.ndarray:
        Cf = np.einsum("bcxyz,boxyz->ocxyz", self.Xf, Gf.conj())
        c = sfft.irfftn(Cf, s=self.fshape, axes=(2, 3, 4))
        return _gather_lags(c, (-self.padding,) * 3, (self.k,) * 3)

    def transform_g(self, g: np.ndarray) -> np.ndarray:
        return sfft.rfftn(g, s=self.fshape, axes=(2, 3, 4))


def _loop_grad_w(xp, g, k, s, outs):
    B, cin = xp.shape[:2]
    cout = g.shape[1]
    Do, Ho, Wo = outs
    gw = np.empty((cout, cin, k, k, k))
    g2 = np.ascontiguousarray(g).reshape(B, cout, -1)
    for a in range(k):
        for b in range(k):
            for c in range(k):
                xs = xp[:, :, a:a + s * Do:s, b:b + s * Ho:s, c:c + s * Wo:s]
                xs2 = np.ascontiguousarray(xs).reshape(B, cin, -1)
                gw[:, :, a, b, c] = np.einsum("bop,bip->oi", g2, xs2)
    return gw


def _loop_grad_x(x: Tensor, w: np.ndarray, g: np.ndarray, k: int, s: int,
                 padding: int, ins: tuple[int, int, int],
                 full: tuple[int, int, int], outs: tuple[int, int, int]):
    """Small-volume input gradient: direct full correlation of the dilated
    output gradient with the flipped, io-swapped kernel."""
    B, cout = g.shape[:2]
    Do, Ho, Wo = outs
    D, H, W = ins
    if s == 1:
        gdil = g
    else:
        gdil = np.zeros((B, cout, s * (Do - 1) + 1,
                         s * (Ho - 1) + 1, s * (Wo - 1) + 1))
        gdil[:, :, ::s, ::s, ::s] = g
    gpad = np.pad(gdil, ((0, 0), (0, 0)) + ((k - 1, k - 1),) * 3)
    wt = np.ascontiguousarray(np.swapaxes(w, 0, 1)[:, :, ::-1, ::-1, ::-1])
    # the valid extent can fall short of the padded input when the stride
    # leaves a remainder; trailing positions get zero gradient
    valid = tuple(e - k + 1 for e in gpad.shape[2:])
    gxp = _corr_loop(gpad, wt, 1, valid)
    tail = tuple(f - v for f, v in zip(full, valid))
    if any(tail):
        gxp = np.pad(gxp, ((0, 0), (0, 0)) + tuple((0, t) for t in tail))
    if padding:
        x._accumulate_owned(np.ascontiguousarray(
            gxp[:, :, padding:padding + D,
                padding:padding + H, padding:padding + W]))
    else:
        x._accumulate_owned(gxp)


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """3D cross-correlation over (B, C_in, D, H, W) with a (C_out, C_in, k, k, k) kernel."""
    if x.data.ndim != 5:
        raise TensorError(f"conv3d input must be 5D, got shape {x.data.shape}")
    if weight.data.ndim != 5 or weight.data.shape[2] != weight.data.shape[3] \
            or weight.data.shape[3] != weight.data.shape[4]:
        raise TensorError(f"conv3d weight must be (C_out, C_in, k, k, k), got {weight.data.shape}")
    if stride < 1:
        raise TensorError("stride must be >= 1")
    if padding < 0:
        raise TensorError("padding must be >= 0")
    B, cin, D, H, W = x.data.shape
    cout, wcin, k = weight.data.shape[0], weight.data.shape[1], weight.data.shape[2]
    if cin != wcin:
        raise TensorError(f"conv3d channel mismatch: input has {cin}, weight expects {wcin}")
    if bias is not None and bias.data.shape != (cout,):
        raise TensorError(f"conv3d bias must have shape ({cout},), got {bias.data.shape}")
    outs = tuple((ext + 2 * padding - k) // stride + 1 for ext in (D, H, W))
    if min(outs) < 1:
        raise TensorError(f"conv3d non-positive output extent {outs} "
                          f"for input {(D, H, W)}, k={k}, stride={stride}, padding={padding}")
    Do, Ho, Wo = outs
    s = stride

    use_fft = (s == 1 and k > 1 and k ** 3 * Do * Ho * Wo >= _FFT_MIN_MACS)
    engine: Optional[_FftConv] = None
    xp = None
    if use_fft:
        engine = _FftConv(x.data, weight.data, padding, outs)
        out_data = engine.forward()
    else:
        if padding:
            xp = np.pad(x.data, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
        else:
            xp = x.data
        out_data = _corr_loop(xp, weight.data, s, outs)
    if bias is not None:
        out_data += bias.data.reshape(1, cout, 1, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if bias is not None and bias.requires_grad:
            bias._accumulate_owned(g.sum(axis=(0, 2, 3, 4)))
        need_x = x.requires_grad
        need_w = weight.requires_grad
        if not (need_x or need_w):
            return
        if engine is not None:
            Gf = engine.transform_g(g)
            if need_w:
                weight._accumulate_owned(engine.grad_w(Gf))
            if need_x:
                x._accumulate_owned(engine.grad_x(Gf))
            return
        full = (D + 2 * padding, H + 2 * padding, W + 2 * padding)
        big = k > 1 and k ** 3 * full[0] * full[1] * full[2] >= _FFT_MIN_MACS
        if not big:
            if need_w:
                weight._accumulate_owned(_loop_grad_w(xp, g, k, s, outs))
            if need_x:
                _loop_grad_x(x, weight.data, g, k, s, padding, (D, H, W), full, outs)
            return
        # one FFT of the stride-dilated output gradient feeds both the
        # weight gradient (correlated against the input) and the input
        # gradient (convolved with the flipped, io-swapped kernel)
        if s == 1:
            gdil = g
        else:
            gdil = np.zeros((B, cout, s * (Do - 1) + 1,
                             s * (Ho - 1) + 1, s * (Wo - 1) + 1))
            gdil[:, :, ::s, ::s, ::s] = g
        fshape = tuple(
            sfft.next_fast_len(max(ext + padding, gext + k - 1, fext))
            for ext, gext, fext in zip((D, H, W), gdil.shape[2:], full))
        Gdf = sfft.rfftn(gdil, s=fshape, axes=(2, 3, 4))
        if need_w:
            Xf = sfft.rfftn(x.data, s=fshape, axes=(2, 3, 4))
            Cf = np.einsum("bcxyz,boxyz->ocxyz", Xf, Gdf.conj())
            c = sfft.irfftn(Cf, s=fshape, axes=(2, 3, 4))
            weight._accumulate_owned(
                _gather_lags(c, (-padding,) * 3, (k,) * 3))
        if need_x:
            wt = np.swapaxes(weight.data, 0, 1)[:, :, ::-1, ::-1, ::-1]
            Wtf = sfft.rfftn(np.ascontiguousarray(wt), s=fshape, axes=(2, 3, 4))
            Zf = np.einsum("boxyz,ioxyz->bixyz", Gdf, Wtf.conj())
            z = sfft.irfftn(Zf, s=fshape, axes=(2, 3, 4))
            gxp = _gather_lags(z, (-(k - 1),) * 3, full)
            if padding:
                x._accumulate_owned(np.ascontiguousarray(
                    gxp[:, :, padding:padding + D,
                        padding:padding + H, padding:padding + W]))
            else:
                x._accumulate_owned(gxp)

    return _wrap(out_data, parents, backward)


class BatchNormState:
    """Running statistics for one batchnorm3d call site."""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum


def batchnorm3d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                eps: float = 1e-5, train: bool = True) -> Tensor:
    """Per-channel normalization over (batch, spatial); biased variance in train mode."""
    if eps <= 0:
        raise TensorError("eps must be > 0")
    C = x.data.shape[1]
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise TensorError(f"batchnorm channel mismatch: input has {C} channels, "
                          f"gamma {gamma.data.shape}, beta {beta.data.shape}")
    axes = (0, 2, 3, 4)
    gshape = (1, C, 1, 1, 1)
    n = x.data.size // C
    xc = x.data.reshape(x.data.shape[0], C, -1)
    if train:
        mu = np.einsum("bcs->c", xc) / n
        var = np.einsum("bcs,bcs->c", xc, xc) / n - mu * mu
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mu
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * var
    else:
        mu = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    # out = x * a + b with per-channel affine folded into the normalization
    a = (gamma.data * inv_std).reshape(gshape)
    b = (beta.data - gamma.data * inv_std * mu).reshape(gshape)
    out_data = x.data * a + b

    def backward(g):
        gc = g.reshape(xc.shape)
        sum_g = np.einsum("bcs->c", gc)
        sum_gx = np.einsum("bcs,bcs->c", gc, xc)
        # reductions against raw x; centering is algebraic, not another pass
        sum_gxhat = (sum_gx - mu * sum_g) * inv_std
        if gamma.requires_grad:
            gamma._accumulate_owned(sum_gxhat)
        if beta.requires_grad:
            beta._accumulate_owned(sum_g.copy())
        if x.requires_grad:
            if train:
                gi = gamma.data * inv_std
                c1 = gi.reshape(gshape)
                c2 = (gi * inv_std * (sum_gxhat / n)).reshape(gshape)
                c0 = (gi / n * (sum_g - mu * inv_std * sum_gxhat)).reshape(gshape)
                gx = g * c1
                gx -= x.data * c2
                gx -= c0
            else:
                gx = g * (gamma.data * inv_std).reshape(gshape)
            x._accumulate_owned(gx)

    return _wrap(out_data, (x, gamma, beta), backward)


def pool3d(x: Tensor, kind: str, window="global", stride: Optional[int] = None) -> Tensor:
    """Spatial pooling; `window="global"` reduces all spatial positions per channel."""
    if kind not in ("max", "avg"):
        raise TensorError(f"unknown pool kind: {kind!r}")
    B, C, D, H, W = x.data.shape
    if window == "global":
        flat = x.data.reshape(B, C, -1)
        if kind == "avg":
            out_data = flat.mean(axis=2).reshape(B, C, 1, 1, 1)

            def backward(g):
                if x.requires_grad:
                    x._accumulate_owned(np.broadcast_to(g / (D * H * W), x.data.shape).copy())
        else:
            idx = flat.argmax(axis=2)  # first max in row-major order
            out_data = np.take_along_axis(flat, idx[:, :, None], axis=2).reshape(B, C, 1, 1, 1)

            def backward(g):
                if x.requires_grad:
                    gflat = np.zeros_like(flat)
                    np.put_along_axis(gflat, idx[:, :, None], g.reshape(B, C, 1), axis=2)
                    x._accumulate_owned(gflat.reshape(x.data.shape))

        return _wrap(out_data, (x,), backward)

    k = int(window)
    if k > min(D, H, W):
        raise TensorError(f"pool window {k} exceeds spatial extents {(D, H, W)}")
    s = stride if stride is not None else k
    Do, Ho, Wo = [(ext - k) // s + 1 for ext in (D, H, W)]
    win = np.lib.stride_tricks.sliding_window_view(x.data, (k, k, k), axis=(2, 3, 4))
    win = win[:, :, ::s, ::s, ::s]  # (B, C, Do, Ho, Wo, k, k, k)
    wflat = np.ascontiguousarray(win).reshape(B, C, Do, Ho, Wo, -1)
    if kind == "avg":
        out_data = wflat.mean(axis=-1)

        def backward(g):
            if x.requires_grad:
                gx = np.zeros_like(x.data)
                gshare = g / (k ** 3)
                for a in range(k):
                    for b in range(k):
                        for c in range(k):
                            gx[:, :, a:a + s * Do:s, b:b + s * Ho:s, c:c + s * Wo:s] += gshare
                x._accumulate(gx)
    else:
        idx = wflat.argmax(axis=-1)
        out_data = np.take_along_axis(wflat, idx[..., None], axis=-1)[..., 0]

        def backward(g):
            if x.requires_grad:
                gx = np.zeros_like(x.data)
                oz, oy, ox = np.unravel_index(idx, (k, k, k))
                bi, ci, di, hi, wi = np.indices(idx.shape)
                np.add.at(gx, (bi, ci, di * s + oz, hi * s + oy, wi * s + ox), g)
                x._accumulate(gx)

    return _wrap(out_data, (x,), backward)


def channel_pool(x: Tensor, kind: str) -> Tensor:
    """Reduce over the channel axis to (B, 1, D, H, W); feeds spatial attention."""
    if kind not in ("max", "avg"):
        raise TensorError(f"unknown pool kind: {kind!r}")
    C = x.data.shape[1]
    if kind == "avg":
        out_data = x.data.mean(axis=1, keepdims=True)

        def backward(g):
            if x.requires_grad:
                x._accumulate(np.broadcast_to(g / C, x.data.shape).copy())
    else:
        idx = x.data.argmax(axis=1)
        out_data = x.data.max(axis=1, keepdims=True)

        def backward(g):
            if x.requires_grad:
                gx = np.zeros_like(x.data)
                np.put_along_axis(gx, idx[:, None], g, axis=1)
                x._accumulate(gx)

    return _wrap(out_data, (x,), backward)


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map y = x @ W.T + b with W of shape (out_features, in_features)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise TensorError("dense expects 2D input and weight")
    if x.data.shape[1] != weight.data.shape[1]:
        raise TensorError(f"dense shape mismatch: input {x.data.shape} vs weight {weight.data.shape}")
    out_data = x.data @ weight.data.T
    if bias is not None:
        if bias.data.shape != (weight.data.shape[0],):
            raise TensorError(f"dense bias shape {bias.data.shape} does not match "
                              f"{weight.data.shape[0]} outputs")
        out_data = out_data + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return _wrap(out_data, parents, backward)


def adam_step(params: Iterable[Parameter], lr: float = 2e-4,
              beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update over `params`; clears gradients afterwards."""
    for p in params:
        if p.grad is None:
            raise MissingGradError("adam_step on a parameter with no gradient")
        p.step += 1
        p.m = beta1 * p.m + (1 - beta1) * p.grad
        p.v = beta2 * p.v + (1 - beta2) * p.grad ** 2
        mhat = p.m / (1 - beta1 ** p.step)
        vhat = p.v / (1 - beta2 ** p.step)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)
        p.grad = None


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.grad = None
