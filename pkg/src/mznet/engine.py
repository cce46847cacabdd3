"""Rank-4 NCHW tensor engine with reverse-mode differentiation.

Every value is a dense (n, c, h, w) array in float64 (float32 allowed for
inference). Operations are pure functions; when a `Tape` is passed and any
input participates in gradients, the op records a closure that knows how to
push gradients back to its inputs. `backward(loss, tape)` replays the tape
in exact reverse order and accumulates gradients additively into leaf
tensors (tensors not produced on the tape).

Multiply counts: each op reports a documented multiply cost to the active
`MacCounter` (see `counting_macs`). The rates are

    conv2d            n * oh * ow * c_out * (c_in / groups) * kh * kw
    layer_norm        4 per input element
    bilinear_resize   4 per output element (0 for same-size identity)
    global_avg_pool   1 per pooled value (n * c)
    local_avg_pool    1 per output element
    simple_gate       1 per output element
    mul / scale       1 per output element
    add / sub / abs / concat / shuffles / pad / crop   0

These rates count multiplications of the mathematical definition, not
implementation temporaries, so an analytic per-layer count can reproduce an
instrumented run exactly.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float64
_SUPPORTED_DTYPES = (np.float32, np.float64)

try:  # optional JIT fast path for depthwise convolutions
    from . import _dwfast
except ImportError:  # pragma: no cover - numba not installed
    _dwfast = None


class ShapeError(ValueError):
    """Raised when an operation receives inconsistently shaped operands."""


class GradError(RuntimeError):
    """Raised for invalid backward requests (non-scalar loss, off-tape tensor)."""


class Tensor:
    """Dense rank-4 NCHW value, optionally participating in gradients.

    `grad` is populated by `backward` only for leaf tensors (those not
    produced by a taped op) with `requires_grad=True`; repeated backward
    calls accumulate additively until `zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in _SUPPORTED_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are rank-4 NCHW, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numel(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1x1x1 tensor, got {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def tensor_from(values, shape=None, requires_grad=False, dtype=None):
    """Build a tensor from nested lists / arrays, reshaping to NCHW if given."""
    arr = np.asarray(values, dtype=dtype or DEFAULT_DTYPE)
    if shape is not None:
        arr = arr.reshape(shape)
    while arr.ndim < 4:
        arr = arr[np.newaxis]
    return Tensor(arr, requires_grad=requires_grad)


def scalar(value, dtype=None):
    return Tensor(np.full((1, 1, 1, 1), value, dtype=dtype or DEFAULT_DTYPE))


@dataclass(frozen=True)
class ConvSpec:
    """Static description of a 2-d convolution (cross-correlation convention)."""

    in_channels: int
    out_channels: int
    kernel: tuple
    stride: tuple = (1, 1)
    dilation: tuple = (1, 1)
    groups: int = 1
    padding: tuple = (0, 0)
    has_bias: bool = True

    def __post_init__(self):
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"channels ({self.in_channels}->{self.out_channels}) not divisible by groups={self.groups}"
            )
        for name in ("kernel", "stride", "dilation"):
            a, b = getattr(self, name)
            if a < 1 or b < 1:
                raise ShapeError(f"{name} must be >= 1, got {(a, b)}")
        if min(self.padding) < 0:
            raise ShapeError(f"padding must be >= 0, got {self.padding}")

    @property
    def depthwise(self):
        return self.groups == self.in_channels == self.out_channels

    def out_size(self, h, w):
        kh, kw = self.kernel
        sh, sw = self.stride
        dh, dw = self.dilation
        ph, pw = self.padding
        oh = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
        ow = (w + 2 * pw - dw * (kw - 1) - 1) // sw + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv output would be empty for input {h}x{w} with {self}")
        return oh, ow

    def weight_shape(self):
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)


def same_conv(in_channels, out_channels, kernel, dilation=(1, 1), groups=1, has_bias=True):
    """ConvSpec with 'same' zero padding p = d*(k-1)/2 per axis (stride 1)."""
    kh, kw = kernel
    dh, dw = dilation
    if (dh * (kh - 1)) % 2 or (dw * (kw - 1)) % 2:
        raise ShapeError(f"'same' padding needs even d*(k-1), got kernel={kernel} dilation={dilation}")
    return ConvSpec(
        in_channels,
        out_channels,
        kernel=kernel,
        dilation=dilation,
        groups=groups,
        padding=(dh * (kh - 1) // 2, dw * (kw - 1) // 2),
        has_bias=has_bias,
    )


# ---------------------------------------------------------------------------
# multiply counting


class MacCounter:
    """Accumulates multiply counts reported by engine ops."""

    def __init__(self):
        self.total = 0

    def add(self, count):
        self.total += int(count)


_ACTIVE_COUNTER = contextvars.ContextVar("mznet_mac_counter", default=None)


@contextlib.contextmanager
def counting_macs():
    """Context manager: `with counting_macs() as c: ...; c.total`."""
    counter = MacCounter()
    token = _ACTIVE_COUNTER.set(counter)
    try:
        yield counter
    finally:
        _ACTIVE_COUNTER.reset(token)


def _count(macs):
    counter = _ACTIVE_COUNTER.get()
    if counter is not None:
        counter.add(macs)


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self):
        self._entries = []
        self._produced = set()

    def __len__(self):
        return len(self._entries)

    def _record(self, out, backward_fn):
        self._entries.append((out, backward_fn))
        self._produced.add(id(out))

    def produced(self, t):
        return id(t) in self._produced


def _wants_grad(tape, *tensors):
    return tape is not None and any(t.requires_grad for t in tensors if isinstance(t, Tensor))


def backward(loss, tape):
    """Populate `grad` of every requires_grad leaf with d(loss)/d(leaf).

    The tape is replayed in exact reverse recording order. Repeated calls
    accumulate into leaf gradients additively.
    """
    if loss.data.size != 1:
        raise GradError(f"loss must be scalar 1x1x1x1, got {loss.shape}")
    if not tape.produced(loss):
        raise GradError("loss tensor was not produced under this tape")
    flowing = {id(loss): np.ones_like(loss.data)}

    def receive(t, g):
        if tape.produced(t):
            acc = flowing.get(id(t))
            flowing[id(t)] = g if acc is None else acc + g
        elif t.requires_grad:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g

    for out, backward_fn in reversed(tape._entries):
        g = flowing.pop(id(out), None)
        if g is None:
            continue
        backward_fn(g, receive)


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def _check_same_shape(a, b, opname):
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b, tape=None):
    _check_same_shape(a, b, "add")
    out = Tensor(a.data + b.data, requires_grad=_wants_grad(tape, a, b))
    if out.requires_grad:
        def bwd(g, receive):
            receive(a, g)
            receive(b, g)
        tape._record(out, bwd)
    return out


def sub(a, b, tape=None):
    _check_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data, requires_grad=_wants_grad(tape, a, b))
    if out.requires_grad:
        def bwd(g, receive):
            receive(a, g)
            receive(b, -g)
        tape._record(out, bwd)
    return out


def mul(a, b, tape=None):
    """Elementwise product; `b` may be (n, c, 1, 1) for per-channel gating."""
    if a.shape != b.shape:
        n, c, _, _ = a.shape
        if b.shape != (n, c, 1, 1):
            raise ShapeError(f"mul: {b.shape} does not match {a.shape} or ({n},{c},1,1)")
    out = Tensor(a.data * b.data, requires_grad=_wants_grad(tape, a, b))
    _count(out.numel())
    if out.requires_grad:
        def bwd(g, receive):
            ga = g * b.data
            gb = g * a.data
            if b.shape != a.shape:
                gb = gb.sum(axis=(2, 3), keepdims=True)
            receive(a, ga)
            receive(b, gb)
        tape._record(out, bwd)
    return out


def scale(a, factor, tape=None):
    out = Tensor(a.data * float(factor), requires_grad=_wants_grad(tape, a))
    _count(out.numel())
    if out.requires_grad:
        def bwd(g, receive):
            receive(a, g * float(factor))
        tape._record(out, bwd)
    return out


def abs_val(a, tape=None):
    out = Tensor(np.abs(a.data), requires_grad=_wants_grad(tape, a))
    if out.requires_grad:
        sign = np.sign(a.data)
        def bwd(g, receive):
            receive(a, g * sign)
        tape._record(out, bwd)
    return out


def mean_all(a, tape=None):
    out = Tensor(np.full((1, 1, 1, 1), a.data.mean(), dtype=a.dtype),
                 requires_grad=_wants_grad(tape, a))
    _count(1)
    if out.requires_grad:
        inv = 1.0 / a.numel()
        def bwd(g, receive):
            receive(a, np.full_like(a.data, g.reshape(()) * inv))
        tape._record(out, bwd)
    return out


def concat_channels(tensors, tape=None):
    if not tensors:
        raise ShapeError("concat_channels: empty input list")
    n, _, h, w = tensors[0].shape
    for t in tensors:
        if t.shape[0] != n or t.shape[2:] != (h, w):
            raise ShapeError(f"concat_channels: incompatible shape {t.shape}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=1),
                 requires_grad=_wants_grad(tape, *tensors))
    if out.requires_grad:
        sizes = [t.shape[1] for t in tensors]
        def bwd(g, receive):
            start = 0
            for t, c in zip(tensors, sizes):
                receive(t, g[:, start:start + c])
                start += c
        tape._record(out, bwd)
    return out


def simple_gate(a, tape=None):
    """Split channels in half and multiply the halves."""
    n, c, h, w = a.shape
    if c % 2:
        raise ShapeError(f"simple_gate needs an even channel count, got {c}")
    half = c // 2
    x1 = a.data[:, :half]
    x2 = a.data[:, half:]
    out = Tensor(x1 * x2, requires_grad=_wants_grad(tape, a))
    _count(out.numel())
    if out.requires_grad:
        def bwd(g, receive):
            ga = np.concatenate([g * x2, g * x1], axis=1)
            receive(a, ga)
        tape._record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# normalization / pooling


def layer_norm(a, gamma, beta, eps=1e-6, tape=None):
    """Channel-axis normalization at each (n, h, w) position."""
    n, c, h, w = a.shape
    if c == 0:
        raise ShapeError("layer_norm: zero-length channel axis")
    for v, name in ((gamma, "gamma"), (beta, "beta")):
        if v.shape != (1, c, 1, 1):
            raise ShapeError(f"layer_norm: {name} must be (1,{c},1,1), got {v.shape}")
    mu = a.data.mean(axis=1, keepdims=True)
    xc = a.data - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    out = Tensor(xn * gamma.data + beta.data, requires_grad=_wants_grad(tape, a, gamma, beta))
    _count(4 * a.numel())
    if out.requires_grad:
        def bwd(g, receive):
            gxn = g * gamma.data
            m1 = gxn.mean(axis=1, keepdims=True)
            m2 = (gxn * xn).mean(axis=1, keepdims=True)
            receive(a, inv * (gxn - m1 - xn * m2))
            receive(gamma, (g * xn).sum(axis=(0, 2, 3), keepdims=True).reshape(1, c, 1, 1))
            receive(beta, g.sum(axis=(0, 2, 3), keepdims=True).reshape(1, c, 1, 1))
        tape._record(out, bwd)
    return out


def global_avg_pool(a, tape=None):
    n, c, h, w = a.shape
    out = Tensor(a.data.mean(axis=(2, 3), keepdims=True), requires_grad=_wants_grad(tape, a))
    _count(n * c)
    if out.requires_grad:
        inv = 1.0 / (h * w)
        def bwd(g, receive):
            receive(a, np.broadcast_to(g * inv, a.shape).copy())
        tape._record(out, bwd)
    return out


def _box_sums(x, rh, rw):
    """Clamped-window box sums over the last two axes, window radius (rh, rw)."""
    h, w = x.shape[-2:]
    ii = np.cumsum(np.cumsum(x, axis=-2), axis=-1)
    ii = np.pad(ii, [(0, 0)] * (x.ndim - 2) + [(1, 0), (1, 0)])
    y0 = np.clip(np.arange(h) - rh, 0, h)
    y1 = np.clip(np.arange(h) + rh + 1, 0, h)
    x0 = np.clip(np.arange(w) - rw, 0, w)
    x1 = np.clip(np.arange(w) + rw + 1, 0, w)
    a = ii[..., y1[:, None], x1[None, :]]
    b = ii[..., y0[:, None], x1[None, :]]
    c = ii[..., y1[:, None], x0[None, :]]
    d = ii[..., y0[:, None], x0[None, :]]
    counts = (y1 - y0)[:, None] * (x1 - x0)[None, :]
    return a - b - c + d, counts


def local_avg_pool(a, window, tape=None):
    """Mean over a centered (window x window) neighborhood, clamped at edges.

    With window >= both spatial dims this is the global mean at every
    position; callers wanting bit-identity with `global_avg_pool` should
    dispatch there in that case.
    """
    n, c, h, w = a.shape
    if window < 1:
        raise ShapeError(f"local_avg_pool window must be >= 1, got {window}")
    r = (window - 1) // 2
    sums, counts = _box_sums(a.data, r, r)
    out = Tensor(sums / counts, requires_grad=_wants_grad(tape, a))
    _count(out.numel())
    if out.requires_grad:
        def bwd(g, receive):
            gsum, _ = _box_sums(g / counts, r, r)
            receive(a, gsum)
        tape._record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# shuffles / resize / pad / crop


def pixel_unshuffle(a, factor, tape=None):
    """Space-to-depth: (n, c, h, w) -> (n, c*f*f, h/f, w/f).

    Output channel index is c_orig * f*f + (i * f + j) for block cell (i, j),
    i.e. row-major within each block, block cell varying fastest.
    """
    n, c, h, w = a.shape
    f = int(factor)
    if f < 1:
        raise ShapeError(f"pixel_unshuffle factor must be >= 1, got {factor}")
    if h % f or w % f:
        raise ShapeError(f"spatial size {h}x{w} not divisible by factor {f}")
    v = a.data.reshape(n, c, h // f, f, w // f, f)
    out_data = np.ascontiguousarray(v.transpose(0, 1, 3, 5, 2, 4)).reshape(n, c * f * f, h // f, w // f)
    out = Tensor(out_data, requires_grad=_wants_grad(tape, a))
    if out.requires_grad:
        def bwd(g, receive):
            gv = g.reshape(n, c, f, f, h // f, w // f)
            receive(a, np.ascontiguousarray(gv.transpose(0, 1, 4, 2, 5, 3)).reshape(n, c, h, w))
        tape._record(out, bwd)
    return out


def pixel_shuffle(a, factor, tape=None):
    """Depth-to-space, the exact inverse permutation of `pixel_unshuffle`."""
    n, c, h, w = a.shape
    f = int(factor)
    if f < 1:
        raise ShapeError(f"pixel_shuffle factor must be >= 1, got {factor}")
    if c % (f * f):
        raise ShapeError(f"channel count {c} not divisible by factor^2 = {f * f}")
    co = c // (f * f)
    v = a.data.reshape(n, co, f, f, h, w)
    out_data = np.ascontiguousarray(v.transpose(0, 1, 4, 2, 5, 3)).reshape(n, co, h * f, w * f)
    out = Tensor(out_data, requires_grad=_wants_grad(tape, a))
    if out.requires_grad:
        def bwd(g, receive):
            gv = g.reshape(n, co, h, f, w, f)
            receive(a, np.ascontiguousarray(gv.transpose(0, 1, 3, 5, 2, 4)).reshape(n, c, h, w))
        tape._record(out, bwd)
    return out


def _resize_axis_weights(in_size, out_size):
    """Half-pixel (align_corners=false) source taps: (lo, hi, w_lo, w_hi)."""
    pos = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    lo_c = np.clip(lo, 0, in_size - 1)
    hi_c = np.clip(lo + 1, 0, in_size - 1)
    return lo_c, hi_c, 1.0 - frac, frac


def bilinear_resize(a, out_h, out_w, tape=None):
    """Bilinear resample with half-pixel centers and edge clamping.

    Resizing to the input size returns the input tensor itself.
    """
    n, c, h, w = a.shape
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize target must be >= 1, got {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        return a
    ylo, yhi, ywl, ywh = _resize_axis_weights(h, out_h)
    xlo, xhi, xwl, xwh = _resize_axis_weights(w, out_w)
    wy_l = ywl[:, None]
    wy_h = ywh[:, None]
    tmp = a.data[:, :, ylo, :] * wy_l + a.data[:, :, yhi, :] * wy_h
    out_data = tmp[:, :, :, xlo] * xwl + tmp[:, :, :, xhi] * xwh
    out = Tensor(out_data.astype(a.dtype, copy=False), requires_grad=_wants_grad(tape, a))
    _count(4 * out.numel())
    if out.requires_grad:
        def bwd(g, receive):
            gtmp = np.zeros((n, c, out_h, w), dtype=g.dtype)
            np.add.at(gtmp.transpose(3, 0, 1, 2), xlo, (g * xwl).transpose(3, 0, 1, 2))
            np.add.at(gtmp.transpose(3, 0, 1, 2), xhi, (g * xwh).transpose(3, 0, 1, 2))
            ga = np.zeros_like(a.data)
            np.add.at(ga.transpose(2, 0, 1, 3), ylo, (gtmp * wy_l).transpose(2, 0, 1, 3))
            np.add.at(ga.transpose(2, 0, 1, 3), yhi, (gtmp * wy_h).transpose(2, 0, 1, 3))
            receive(a, ga)
        tape._record(out, bwd)
    return out


def _reflect_index(size, pad_lo, pad_hi):
    if size < 2 and (pad_lo or pad_hi):
        raise ShapeError(f"reflect pad needs size >= 2, got {size}")
    if pad_lo >= size or pad_hi >= size:
        raise ShapeError(f"reflect pad ({pad_lo},{pad_hi}) too large for size {size}")
    idx = np.arange(-pad_lo, size + pad_hi)
    return np.abs(idx) * (idx < size) + (2 * (size - 1) - idx) * (idx >= size)


def reflect_pad(a, pads, tape=None):
    """Reflect-pad spatial axes; pads = (top, bottom, left, right)."""
    n, c, h, w = a.shape
    pt, pb, pl, pr = pads
    ridx = _reflect_index(h, pt, pb)
    cidx = _reflect_index(w, pl, pr)
    out = Tensor(a.data[:, :, ridx[:, None], cidx[None, :]], requires_grad=_wants_grad(tape, a))
    if out.requires_grad:
        def bwd(g, receive):
            ga = np.zeros_like(a.data)
            np.add.at(ga, (slice(None), slice(None), ridx[:, None], cidx[None, :]), g)
            receive(a, ga)
        tape._record(out, bwd)
    return out


def crop(a, top, left, out_h, out_w, tape=None):
    n, c, h, w = a.shape
    if top < 0 or left < 0 or top + out_h > h or left + out_w > w:
        raise ShapeError(f"crop ({top},{left},{out_h},{out_w}) outside {h}x{w}")
    out = Tensor(a.data[:, :, top:top + out_h, left:left + out_w].copy(),
                 requires_grad=_wants_grad(tape, a))
    if out.requires_grad:
        def bwd(g, receive):
            ga = np.zeros_like(a.data)
            ga[:, :, top:top + out_h, left:left + out_w] = g
            receive(a, ga)
        tape._record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# convolution


def _conv_validate(x, w, b, spec):
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if w.shape != spec.weight_shape():
        raise ShapeError(f"conv2d: weight shape {w.shape} != {spec.weight_shape()}")
    if spec.has_bias:
        if b is None:
            raise ShapeError("conv2d: spec.has_bias but no bias given")
        if b.shape != (1, spec.out_channels, 1, 1):
            raise ShapeError(f"conv2d: bias shape {b.shape} != (1,{spec.out_channels},1,1)")
    elif b is not None:
        raise ShapeError("conv2d: bias given but spec.has_bias is false")


def _pad_zeros(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def conv2d(x, w, b, spec, tape=None):
    """Direct 2-d cross-correlation with stride, dilation and groups.

    weights: (out_channels, in_channels/groups, kh, kw); bias: (1, c, 1, 1).
    """
    _conv_validate(x, w, b, spec)
    n, ci, h, wd = x.shape
    co, cig, kh, kw = w.shape
    sh, sw = spec.stride
    dh, dw = spec.dilation
    oh, ow = spec.out_size(h, wd)
    g = spec.groups
    cog = co // g

    xp = _pad_zeros(x.data, *spec.padding)
    span_h = (oh - 1) * sh + 1
    span_w = (ow - 1) * sw + 1

    if spec.depthwise:
        out_data = np.zeros((n, co, oh, ow), dtype=x.dtype)
        if _dwfast is not None:
            _dwfast.dw_forward(np.ascontiguousarray(xp), w.data[:, 0], dh, dw, sh, sw, out_data)
        else:
            scratch = np.empty_like(out_data)
            wd_ = w.data
            for i in range(kh):
                for j in range(kw):
                    xs = xp[:, :, i * dh:i * dh + span_h:sh, j * dw:j * dw + span_w:sw]
                    np.multiply(xs, wd_[:, 0, i, j].reshape(1, co, 1, 1), out=scratch)
                    out_data += scratch
    else:
        acc = np.zeros((n, g, cog, oh * ow), dtype=x.dtype)
        wt = w.data.reshape(g, cog, cig, kh, kw)
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, :, i * dh:i * dh + span_h:sh, j * dw:j * dw + span_w:sw]
                xr = np.ascontiguousarray(xs).reshape(n, g, cig, oh * ow)
                acc += np.matmul(wt[None, :, :, :, i, j], xr)
        out_data = acc.reshape(n, co, oh, ow)
    if b is not None:
        out_data = out_data + b.data

    out = Tensor(out_data, requires_grad=_wants_grad(tape, x, w) or (b is not None and _wants_grad(tape, b)))
    _count(n * oh * ow * co * cig * kh * kw)

    if out.requires_grad:
        hp, wp = xp.shape[2], xp.shape[3]
        ph, pw = spec.padding

        def bwd(gy, receive):
            if b is not None:
                receive(b, gy.sum(axis=(0, 2, 3), keepdims=True).reshape(1, co, 1, 1))

            gw = np.zeros_like(w.data)
            gxp = np.zeros((n, ci, hp, wp), dtype=gy.dtype)
            if spec.depthwise:
                if _dwfast is not None:
                    gyc = np.ascontiguousarray(gy)
                    xpc = np.ascontiguousarray(xp)
                    _dwfast.dw_input_grad(gyc, w.data[:, 0], dh, dw, sh, sw, gxp)
                    _dwfast.dw_weight_grad(xpc, gyc, dh, dw, sh, sw, gw[:, 0])
                else:
                    scratch = np.empty_like(gy)
                    for i in range(kh):
                        for j in range(kw):
                            sl_h = slice(i * dh, i * dh + span_h, sh)
                            sl_w = slice(j * dw, j * dw + span_w, sw)
                            xs = xp[:, :, sl_h, sl_w]
                            np.einsum("nchw,nchw->c", xs, gy, out=gw[:, 0, i, j], optimize=False)
                            np.multiply(gy, w.data[:, 0, i, j].reshape(1, co, 1, 1), out=scratch)
                            gxp[:, :, sl_h, sl_w] += scratch
            else:
                gyr = gy.reshape(n, g, cog, oh * ow)
                wt = w.data.reshape(g, cog, cig, kh, kw)
                gwt = gw.reshape(g, cog, cig, kh, kw)
                for i in range(kh):
                    for j in range(kw):
                        sl_h = slice(i * dh, i * dh + span_h, sh)
                        sl_w = slice(j * dw, j * dw + span_w, sw)
                        xs = xp[:, :, sl_h, sl_w]
                        xr = np.ascontiguousarray(xs).reshape(n, g, cig, oh * ow)
                        gwt[:, :, :, i, j] = np.matmul(gyr, xr.transpose(0, 1, 3, 2)).sum(axis=0)
                        gxs = np.matmul(wt[None, :, :, :, i, j].transpose(0, 1, 3, 2), gyr)
                        gxp[:, :, sl_h, sl_w] += gxs.reshape(n, ci, oh, ow)
            receive(w, gw)
            if ph or pw:
                receive(x, gxp[:, :, ph:ph + h, pw:pw + wd])
            else:
                receive(x, gxp)

        tape._record(out, bwd)
    return out
