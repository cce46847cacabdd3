"""Network building blocks, each a pure function of (input, params).

Parameters live in flat dicts mapping slash-free dotted paths to engine
Tensors (e.g. "mdcm.d4.weight"). Builders create the parameters for one
block instance under a prefix; forwards read them back. All blocks preserve
(h, w) and map c channels to c channels.

Conventions fixed here:
  - pointwise (1x1) convolutions carry bias; depthwise branches inside the
    multi-dilation and multi-shape modules do not (a shared bias after the
    branch sum would be equivalent, so per-branch biases are degenerate);
  - the large-kernel attention stack is 5x5 depthwise, then 7x7 depthwise
    with dilation 3, then 1x1 pointwise, gating the input multiplicatively;
  - channel attention is global-average-pool -> 1x1 conv -> channel-wise
    multiply; an optional local window replaces the global pool at inference
    (windows covering the whole feature dispatch to the global path so the
    two modes agree bit-exactly);
  - feed-forward tails expand 2x with a 1x1 conv, gate, and project back.
"""

from __future__ import annotations

import numpy as np

from . import engine as en
from .engine import ConvSpec, Tensor, same_conv

LN_EPS = 1e-6

# paths of convolutions whose zero-initialization makes a block the identity
FINAL_PROJECTIONS = ("dam.fuse", "outproj", "ffn.project", "conv2")


def sub_params(params, prefix):
    """View of `params` below `prefix.`, with the prefix stripped."""
    head = prefix + "."
    out = {k[len(head):]: v for k, v in params.items() if k.startswith(head)}
    if not out:
        raise KeyError(f"no parameters under prefix '{prefix}'")
    return out


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def add_conv(params, rng, prefix, spec, zero=False):
    """Create weight (+ bias) tensors for one convolution under `prefix`."""
    wshape = spec.weight_shape()
    fan_in = wshape[1] * wshape[2] * wshape[3]
    wdata = np.zeros(wshape) if zero else _uniform(rng, wshape, fan_in)
    params[prefix + ".weight"] = Tensor(wdata, requires_grad=True)
    if spec.has_bias:
        bdata = np.zeros((1, spec.out_channels, 1, 1)) if zero else _uniform(
            rng, (1, spec.out_channels, 1, 1), fan_in)
        params[prefix + ".bias"] = Tensor(bdata, requires_grad=True)


def add_layer_norm(params, prefix, c):
    params[prefix + ".gamma"] = Tensor(np.ones((1, c, 1, 1)), requires_grad=True)
    params[prefix + ".beta"] = Tensor(np.zeros((1, c, 1, 1)), requires_grad=True)


def _conv(x, p, prefix, spec, tape):
    b = p.get(prefix + ".bias") if spec.has_bias else None
    return en.conv2d(x, p[prefix + ".weight"], b, spec, tape)


def _ln(x, p, prefix, tape):
    return en.layer_norm(x, p[prefix + ".gamma"], p[prefix + ".beta"], LN_EPS, tape)


def _pw(c_in, c_out):
    return ConvSpec(c_in, c_out, kernel=(1, 1))


def _dw(c, k, dilation=1, has_bias=True):
    return same_conv(c, c, kernel=(k, k), dilation=(dilation, dilation), groups=c, has_bias=has_bias)


def _strip(c, kh, kw):
    # pad only along the long axis; the unit axis needs none
    return ConvSpec(c, c, kernel=(kh, kw), groups=c,
                    padding=((kh - 1) // 2, (kw - 1) // 2), has_bias=False)


# ---------------------------------------------------------------------------
# channel attention


def build_sca(params, rng, prefix, c):
    add_conv(params, rng, prefix + ".conv", _pw(c, c))


def sca_forward(x, p, tape=None, tlc_window=None):
    """x * conv1x1(avg_pool(x)); local window pooling when tlc_window is set."""
    n, c, h, w = x.shape
    if tlc_window is not None and tlc_window < max(h, w):
        pooled = en.local_avg_pool(x, tlc_window, tape)
    else:
        pooled = en.global_avg_pool(x, tape)
    attn = _conv(pooled, p, "conv", _pw(c, c), tape)
    return en.mul(x, attn, tape)


# ---------------------------------------------------------------------------
# large-kernel attention


def build_lka(params, rng, prefix, c):
    add_conv(params, rng, prefix + ".dw5", _dw(c, 5))
    add_conv(params, rng, prefix + ".dw7", _dw(c, 7, dilation=3))
    add_conv(params, rng, prefix + ".pw", _pw(c, c))


def lka_forward(x, p, tape=None):
    c = x.shape[1]
    a = _conv(x, p, "dw5", _dw(c, 5), tape)
    a = _conv(a, p, "dw7", _dw(c, 7, dilation=3), tape)
    a = _conv(a, p, "pw", _pw(c, c), tape)
    return en.mul(x, a, tape)


# ---------------------------------------------------------------------------
# multi-dilation convolution


def build_mdcm(params, rng, prefix, c, dilations):
    for d in dilations:
        add_conv(params, rng, f"{prefix}.d{d}", _dw(c, 3, dilation=d, has_bias=False))


def mdcm_forward(x, p, dilations, tape=None):
    """Sum of parallel 3x3 depthwise convolutions, one per dilation rate."""
    c = x.shape[1]
    out = None
    for d in dilations:
        y = _conv(x, p, f"d{d}", _dw(c, 3, dilation=d, has_bias=False), tape)
        out = y if out is None else en.add(out, y, tape)
    return out


# ---------------------------------------------------------------------------
# dual attention


def build_dam(params, rng, prefix, c, use_lka=True, use_sca=True):
    if use_sca:
        build_sca(params, rng, prefix + ".sca", c)
    if use_lka:
        build_lka(params, rng, prefix + ".lka", c)
    add_conv(params, rng, prefix + ".fuse", _pw(c, c))


def dam_forward(x, p, tape=None, tlc_window=None, use_lka=True, use_sca=True):
    """conv1x1(SCA(x) + LKA(x)); disabled branches simply drop out of the sum."""
    c = x.shape[1]
    branches = []
    if use_sca:
        branches.append(sca_forward(x, sub_params(p, "sca"), tape, tlc_window))
    if use_lka:
        branches.append(lka_forward(x, sub_params(p, "lka"), tape))
    if not branches:
        raise ValueError("dual attention needs at least one branch enabled")
    s = branches[0]
    for b in branches[1:]:
        s = en.add(s, b, tape)
    return _conv(s, p, "fuse", _pw(c, c), tape)


# ---------------------------------------------------------------------------
# shared residual wrapper pieces


def _build_ffn(params, rng, prefix, c):
    add_conv(params, rng, prefix + ".expand", _pw(c, 2 * c))
    add_conv(params, rng, prefix + ".project", _pw(c, c))


def _ffn_forward(x, p, tape):
    c = x.shape[1]
    y = _conv(x, p, "expand", _pw(c, 2 * c), tape)
    y = en.simple_gate(y, tape)
    return _conv(y, p, "project", _pw(c, c), tape)


# ---------------------------------------------------------------------------
# multi-scale dual attention block


def build_msdab(params, rng, prefix, c, dilations, use_lka=True, use_sca=True, use_mdcm=True):
    add_layer_norm(params, prefix + ".norm1", c)
    add_conv(params, rng, prefix + ".inproj", _pw(c, c))
    add_conv(params, rng, prefix + ".dwconv", _dw(c, 3))
    if use_mdcm:
        build_mdcm(params, rng, prefix + ".mdcm", c, dilations)
    else:
        add_conv(params, rng, prefix + ".mdcm_sub", _dw(c, 3, has_bias=False))
    build_dam(params, rng, prefix + ".dam", c, use_lka=use_lka, use_sca=use_sca)
    add_layer_norm(params, prefix + ".norm2", c)
    _build_ffn(params, rng, prefix + ".ffn", c)


def msdab_forward(x, p, dilations, tape=None, tlc_window=None,
                  use_lka=True, use_sca=True, use_mdcm=True):
    """Two-residual block: dual-attention-refined multi-scale features + FFN."""
    c = x.shape[1]
    t = _ln(x, p, "norm1", tape)
    t = _conv(t, p, "inproj", _pw(c, c), tape)
    t = _conv(t, p, "dwconv", _dw(c, 3), tape)
    if use_mdcm:
        t = mdcm_forward(t, sub_params(p, "mdcm"), dilations, tape)
    else:
        t = _conv(t, p, "mdcm_sub", _dw(c, 3, has_bias=False), tape)
    t = dam_forward(t, sub_params(p, "dam"), tape, tlc_window, use_lka=use_lka, use_sca=use_sca)
    y = en.add(x, t, tape)
    f = _ffn_forward(_ln(y, p, "norm2", tape), sub_params(p, "ffn"), tape)
    return en.add(y, f, tape)


# ---------------------------------------------------------------------------
# multi-shape convolution (bottleneck)


def build_mscm(params, rng, prefix, c, k, use_sca=True, use_stripe=True, use_square=True):
    if k % 2 == 0 or k < 1:
        raise ValueError(f"multi-shape kernel size must be odd and >= 1, got {k}")
    if use_square:
        add_conv(params, rng, f"{prefix}.kk", _strip(c, k, k))
    if use_stripe:
        add_conv(params, rng, f"{prefix}.k1", _strip(c, k, 1))
        add_conv(params, rng, f"{prefix}.ik", _strip(c, 1, k))
    add_conv(params, rng, f"{prefix}.pp", _strip(c, 1, 1))
    if use_sca:
        build_sca(params, rng, prefix + ".sca", c)


def mscm_forward(x, p, k, tape=None, tlc_window=None,
                 use_sca=True, use_stripe=True, use_square=True):
    """Sum of square / strip / point depthwise kernels plus channel attention."""
    if k % 2 == 0 or k < 1:
        raise ValueError(f"multi-shape kernel size must be odd and >= 1, got {k}")
    c = x.shape[1]
    shapes = []
    if use_square:
        shapes.append(("kk", (k, k)))
    if use_stripe:
        shapes.append(("k1", (k, 1)))
        shapes.append(("ik", (1, k)))
    shapes.append(("pp", (1, 1)))
    out = None
    for name, (kh, kw) in shapes:
        y = _conv(x, p, name, _strip(c, kh, kw), tape)
        out = y if out is None else en.add(out, y, tape)
    if use_sca:
        out = en.add(out, sca_forward(x, sub_params(p, "sca"), tape, tlc_window), tape)
    return out


# ---------------------------------------------------------------------------
# multi-shape large kernel block


def build_mslkb(params, rng, prefix, c, k, use_sca=True, use_stripe=True, use_square=True):
    add_layer_norm(params, prefix + ".norm1", c)
    add_conv(params, rng, prefix + ".inproj", _pw(c, c))
    add_conv(params, rng, prefix + ".dwconv", _dw(c, 3))
    build_mscm(params, rng, prefix + ".mscm", c, k,
               use_sca=use_sca, use_stripe=use_stripe, use_square=use_square)
    add_conv(params, rng, prefix + ".outproj", _pw(c, c))
    add_layer_norm(params, prefix + ".norm2", c)
    _build_ffn(params, rng, prefix + ".ffn", c)


def mslkb_forward(x, p, k, tape=None, tlc_window=None,
                  use_sca=True, use_stripe=True, use_square=True):
    c = x.shape[1]
    t = _ln(x, p, "norm1", tape)
    t = _conv(t, p, "inproj", _pw(c, c), tape)
    t = _conv(t, p, "dwconv", _dw(c, 3), tape)
    t = mscm_forward(t, sub_params(p, "mscm"), k, tape, tlc_window,
                     use_sca=use_sca, use_stripe=use_stripe, use_square=use_square)
    t = _conv(t, p, "outproj", _pw(c, c), tape)
    y = en.add(x, t, tape)
    f = _ffn_forward(_ln(y, p, "norm2", tape), sub_params(p, "ffn"), tape)
    return en.add(y, f, tape)


# ---------------------------------------------------------------------------
# activation-free baseline block


def build_nafblock(params, rng, prefix, c):
    add_layer_norm(params, prefix + ".norm1", c)
    add_conv(params, rng, prefix + ".conv1", _pw(c, 2 * c))
    add_conv(params, rng, prefix + ".dwconv", _dw(2 * c, 3))
    build_sca(params, rng, prefix + ".sca", c)
    add_conv(params, rng, prefix + ".conv2", _pw(c, c))
    add_layer_norm(params, prefix + ".norm2", c)
    _build_ffn(params, rng, prefix + ".ffn", c)


def nafblock_forward(x, p, tape=None, tlc_window=None):
    c = x.shape[1]
    t = _ln(x, p, "norm1", tape)
    t = _conv(t, p, "conv1", _pw(c, 2 * c), tape)
    t = _conv(t, p, "dwconv", _dw(2 * c, 3), tape)
    t = en.simple_gate(t, tape)
    t = sca_forward(t, sub_params(p, "sca"), tape, tlc_window)
    t = _conv(t, p, "conv2", _pw(c, c), tape)
    y = en.add(x, t, tape)
    f = _ffn_forward(_ln(y, p, "norm2", tape), sub_params(p, "ffn"), tape)
    return en.add(y, f, tape)


# ---------------------------------------------------------------------------
# fused skip connection


def build_ffsc(params, rng, prefix, base_width, level):
    c_in = base_width * (2 + 4 + 8 + 16)
    c_out = base_width * (2 ** level)
    add_conv(params, rng, prefix + ".proj", _pw(c_in, c_out))
    build_nafblock(params, rng, prefix + ".naf", c_out)


def ffsc_fuse(encoder_feats, level, p, base_width, tape=None, tlc_window=None):
    """Resize every encoder level to this level's grid, concat, project, refine.

    encoder_feats[k-1] must be (n, 2^k * C, Hs/2^k, Ws/2^k) for k = 1..4; the
    result has 2^level * C channels on the level's own grid.
    """
    if len(encoder_feats) != 4:
        raise ValueError(f"expected 4 encoder features, got {len(encoder_feats)}")
    n = encoder_feats[0].shape[0]
    hs = encoder_feats[0].shape[2] * 2
    ws = encoder_feats[0].shape[3] * 2
    for k, f in enumerate(encoder_feats, start=1):
        want = (n, base_width * (2 ** k), hs // (2 ** k), ws // (2 ** k))
        if f.shape != want:
            raise ValueError(f"encoder feature {k} has shape {f.shape}, expected {want}")
    th, tw = hs // (2 ** level), ws // (2 ** level)
    resized = [en.bilinear_resize(f, th, tw, tape) for f in encoder_feats]
    cat = en.concat_channels(resized, tape)
    c_in = base_width * 30
    c_out = base_width * (2 ** level)
    y = _conv(cat, p, "proj", _pw(c_in, c_out), tape)
    return nafblock_forward(y, sub_params(p, "naf"), tape, tlc_window)


def zero_final_projections(params):
    """Zero every block's closing projection so each block becomes identity."""
    for path, t in params.items():
        parts = path.split(".")
        if len(parts) >= 3 and parts[-3] + "." + parts[-2] in FINAL_PROJECTIONS:
            t.data[...] = 0.0
        elif len(parts) >= 2 and parts[-2] in FINAL_PROJECTIONS:
            t.data[...] = 0.0
