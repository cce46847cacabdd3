"""Full network assembly: stem, encoder, bottleneck, fused-skip decoder,
multi-scale heads, plus parameter/multiply accounting and padded inference.

Layout (unshuffle factor f, base width C, input H x W with Hs = H/f):

    stem      unshuffle(f) + 3x3 conv (3 f^2 -> C)            C    @ Hs
    enc l     MSDAB x enc_blocks[l] at 2^(l-1) C, then a 2x2    2^l C @ Hs/2^l
              stride-2 conv doubling channels; the conv output
              is the skip feature F_l
    middle    one MSLKB at 16C on F_4 (identity when disabled)
    dec l     (l = 4..1) concat with fused skip, 1x1 conv back
              to 2^l C, MSDAB x dec_blocks[l]; a 1x1 conv +
              pixel-shuffle upsample (net channel halving) moves
              to level l-1; a final upsample returns to Hs @ C
    heads     3x3 conv to 3 f^2 + pixel shuffle(f), predicting
              residuals at full, half and quarter resolution
              (half/quarter from decoder levels 1 and 2)

Output = input + full-resolution residual; intermediate predictions are
residuals on bilinearly downsampled input. Head convolutions start at zero
so a fresh model is exactly the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import blocks as bl
from . import engine as en
from .engine import ConvSpec, Tensor

LEVELS = 4
DOWN_FACTOR = 2 ** LEVELS  # spatial reduction from stem grid to bottleneck


@dataclass(frozen=True)
class ModelConfig:
    base_width: int = 32
    unshuffle_factor: int = 2
    encoder_blocks: tuple = (4, 4, 6, 8)
    decoder_blocks: tuple = (4, 4, 6, 6)
    dilations: tuple = ((1, 4, 7, 9),) * 4
    mslkb_k: object = "auto"  # odd int, or "auto" (resolve from crop size)
    use_lka: bool = True
    use_sca: bool = True
    use_mdcm: bool = True
    use_stripe: bool = True
    use_square: bool = True
    use_ffsc: bool = True
    use_mslkb: bool = True
    deep_supervision_levels: int = 3

    def __post_init__(self):
        if self.base_width < 2 or self.base_width % 2:
            raise ValueError(f"base_width must be even and >= 2, got {self.base_width}")
        if self.unshuffle_factor < 1:
            raise ValueError("unshuffle_factor must be >= 1")
        if len(self.encoder_blocks) != LEVELS or len(self.decoder_blocks) != LEVELS:
            raise ValueError("encoder_blocks / decoder_blocks must have 4 entries")
        if any(b < 1 for b in self.encoder_blocks + self.decoder_blocks):
            raise ValueError("block counts must be >= 1")
        if len(self.dilations) != LEVELS:
            raise ValueError("dilations must give one set per level")
        for ds in self.dilations:
            if len(ds) not in (3, 4) or list(ds) != sorted(set(ds)):
                raise ValueError(f"each dilation set must be 3 or 4 strictly increasing rates, got {ds}")
        if self.mslkb_k != "auto":
            k = int(self.mslkb_k)
            if k < 1 or k % 2 == 0:
                raise ValueError(f"mslkb_k must be odd and >= 1, got {self.mslkb_k}")
        if self.deep_supervision_levels not in (1, 2, 3):
            raise ValueError("deep_supervision_levels must be 1, 2 or 3")

    @property
    def divisor(self):
        return self.unshuffle_factor * DOWN_FACTOR

    def resolved_k(self):
        if self.mslkb_k == "auto":
            raise ValueError("mslkb_k is 'auto'; resolve it against a crop size first")
        return int(self.mslkb_k)

    def with_k_for_crop(self, crop_h, crop_w):
        if self.mslkb_k != "auto":
            return self
        return replace(self, mslkb_k=select_kernel_size(crop_h, crop_w, self))


@dataclass
class CostReport:
    """Per-module parameter or multiply totals; rows sum to the total."""

    kind: str
    rows: list = field(default_factory=list)  # (module, count)
    note: str = ""

    @property
    def total(self):
        return sum(c for _, c in self.rows)

    def add(self, module, count):
        self.rows.append((module, int(count)))

    def render(self):
        width = max([len(m) for m, _ in self.rows] + [6])
        lines = [f"{'module':<{width}}  {self.kind:>16}"]
        for module, count in self.rows:
            lines.append(f"{module:<{width}}  {count:>16,}")
        lines.append(f"{'total':<{width}}  {self.total:>16,}")
        if self.note:
            lines.append(self.note)
        return "\n".join(lines)


def select_kernel_size(crop_h, crop_w, config):
    """Largest odd kernel not exceeding the bottleneck feature size."""
    div = config.divisor
    if crop_h % div or crop_w % div:
        raise ValueError(f"crop {crop_h}x{crop_w} not divisible by {div}")
    b = min(crop_h, crop_w) // div
    if b < 1:
        raise ValueError(f"crop {crop_h}x{crop_w} gives an empty bottleneck")
    return b if b % 2 else b - 1


# ---------------------------------------------------------------------------
# construction


def _head_spec(c_in, factor):
    return en.same_conv(c_in, 3 * factor * factor, kernel=(3, 3))


def build_model(config, seed):
    """Deterministically initialize the full parameter tree from a seed."""
    k = config.resolved_k()
    rng = np.random.default_rng(np.random.PCG64(seed))
    c = config.base_width
    f = config.unshuffle_factor
    params = {}

    bl.add_conv(params, rng, "stem.conv", en.same_conv(3 * f * f, c, kernel=(3, 3)))

    for l in range(1, LEVELS + 1):
        cw = c * 2 ** (l - 1)
        for i in range(config.encoder_blocks[l - 1]):
            bl.build_msdab(params, rng, f"enc{l}.msdab{i}", cw, config.dilations[l - 1],
                           use_lka=config.use_lka, use_sca=config.use_sca,
                           use_mdcm=config.use_mdcm)
        bl.add_conv(params, rng, f"enc{l}.down",
                    ConvSpec(cw, 2 * cw, kernel=(2, 2), stride=(2, 2)))

    if config.use_mslkb:
        bl.build_mslkb(params, rng, "mslkb", c * 16, k,
                       use_sca=config.use_sca, use_stripe=config.use_stripe,
                       use_square=config.use_square)

    for l in range(LEVELS, 0, -1):
        cw = c * 2 ** l
        if config.use_ffsc:
            bl.build_ffsc(params, rng, f"ffsc{l}", c, l)
        bl.add_conv(params, rng, f"dec{l}.reduce", ConvSpec(2 * cw, cw, kernel=(1, 1)))
        for i in range(config.decoder_blocks[l - 1]):
            bl.build_msdab(params, rng, f"dec{l}.msdab{i}", cw, config.dilations[l - 1],
                           use_lka=config.use_lka, use_sca=config.use_sca,
                           use_mdcm=config.use_mdcm)
        bl.add_conv(params, rng, f"dec{l}.up", ConvSpec(cw, 2 * cw, kernel=(1, 1)))

    bl.add_conv(params, rng, "head_full.conv", _head_spec(c, f), zero=True)
    bl.add_conv(params, rng, "head_half.conv", _head_spec(2 * c, f), zero=True)
    bl.add_conv(params, rng, "head_quarter.conv", _head_spec(4 * c, f), zero=True)
    return params


# ---------------------------------------------------------------------------
# forward


def _check_input(image, config):
    n, c, h, w = image.shape
    if c != 3:
        raise en.ShapeError(f"expected 3-channel input, got {c}")
    div = config.divisor
    if h % div or w % div:
        raise en.ShapeError(f"input {h}x{w} not divisible by {div}; use infer_padded")


def _upsample(x, params, prefix, tape):
    cw = x.shape[1]
    y = bl._conv(x, params, prefix, ConvSpec(cw, 2 * cw, kernel=(1, 1)), tape)
    return en.pixel_shuffle(y, 2, tape)


def _run_head(x, params, name, factor, tape):
    y = bl._conv(x, params, name + ".conv", _head_spec(x.shape[1], factor), tape)
    return en.pixel_shuffle(y, factor, tape)


def forward(params, image, config, tape=None, tlc_window=None):
    """Run the network; returns (output, (half_pred, quarter_pred))."""
    _check_input(image, config)
    k = config.resolved_k()
    c = config.base_width
    f = config.unshuffle_factor
    n, _, h, w = image.shape

    x = en.pixel_unshuffle(image, f, tape)
    cur = bl._conv(x, params, "stem.conv", en.same_conv(3 * f * f, c, kernel=(3, 3)), tape)

    feats = []
    for l in range(1, LEVELS + 1):
        cw = c * 2 ** (l - 1)
        for i in range(config.encoder_blocks[l - 1]):
            cur = bl.msdab_forward(cur, bl.sub_params(params, f"enc{l}.msdab{i}"),
                                   config.dilations[l - 1], tape, tlc_window,
                                   use_lka=config.use_lka, use_sca=config.use_sca,
                                   use_mdcm=config.use_mdcm)
        cur = bl._conv(cur, params, f"enc{l}.down",
                       ConvSpec(cw, 2 * cw, kernel=(2, 2), stride=(2, 2)), tape)
        feats.append(cur)

    if config.use_mslkb:
        cur = bl.mslkb_forward(cur, bl.sub_params(params, "mslkb"), k, tape, tlc_window,
                               use_sca=config.use_sca, use_stripe=config.use_stripe,
                               use_square=config.use_square)

    half_feat = quarter_feat = None
    for l in range(LEVELS, 0, -1):
        cw = c * 2 ** l
        if config.use_ffsc:
            fused = bl.ffsc_fuse(feats, l, bl.sub_params(params, f"ffsc{l}"), c, tape, tlc_window)
        else:
            fused = feats[l - 1]
        cur = en.concat_channels([cur, fused], tape)
        cur = bl._conv(cur, params, f"dec{l}.reduce", ConvSpec(2 * cw, cw, kernel=(1, 1)), tape)
        for i in range(config.decoder_blocks[l - 1]):
            cur = bl.msdab_forward(cur, bl.sub_params(params, f"dec{l}.msdab{i}"),
                                   config.dilations[l - 1], tape, tlc_window,
                                   use_lka=config.use_lka, use_sca=config.use_sca,
                                   use_mdcm=config.use_mdcm)
        if l == 2:
            quarter_feat = cur
        elif l == 1:
            half_feat = cur
        cur = _upsample(cur, params, f"dec{l}.up", tape)

    out = en.add(image, _run_head(cur, params, "head_full", f, tape), tape)
    half = en.add(en.bilinear_resize(image, h // 2, w // 2, tape),
                  _run_head(half_feat, params, "head_half", f, tape), tape)
    quarter = en.add(en.bilinear_resize(image, h // 4, w // 4, tape),
                     _run_head(quarter_feat, params, "head_quarter", f, tape), tape)
    return out, (half, quarter)


def infer_padded(params, image, config, tlc_window=None):
    """Reflect-pad to a divisible size, run the network, crop back."""
    n, c, h, w = image.shape
    if h < 32 or w < 32:
        raise en.ShapeError(f"inference needs at least 32x32 input, got {h}x{w}")
    div = config.divisor
    ph = (div - h % div) % div
    pw = (div - w % div) % div
    if ph or pw:
        padded = en.reflect_pad(image, (0, ph, 0, pw))
    else:
        padded = image
    out, _ = forward(params, padded, config, tape=None, tlc_window=tlc_window)
    if ph or pw:
        out = en.crop(out, 0, 0, h, w)
    return out


# ---------------------------------------------------------------------------
# cost accounting


def count_params(params):
    """Parameter totals grouped by top-level module."""
    report = CostReport(kind="parameters")
    groups = {}
    for path, t in params.items():
        groups.setdefault(path.split(".")[0], 0)
        groups[path.split(".")[0]] += t.numel()
    for module, count in groups.items():
        report.add(module, count)
    return report


def _conv_macs(spec, h, w):
    oh, ow = spec.out_size(h, w)
    kh, kw = spec.kernel
    return oh * ow * spec.out_channels * (spec.in_channels // spec.groups) * kh * kw, oh, ow


class _Counter:
    """Analytic per-layer multiply enumeration (batch size 1).

    Mirrors the documented per-op rates in `engine`; kept independent of the
    engine's instrumented counting so the two can cross-check each other.
    """

    def __init__(self, report):
        self.report = report
        self.macs = 0

    def flush(self, module):
        self.report.add(module, self.macs)
        self.macs = 0

    def conv(self, spec, h, w):
        m, oh, ow = _conv_macs(spec, h, w)
        self.macs += m
        return oh, ow

    def ln(self, c, h, w):
        self.macs += 4 * c * h * w

    def gap(self, c):
        self.macs += c

    def mul(self, c, h, w):
        self.macs += c * h * w

    def gate(self, c_out, h, w):
        self.macs += c_out * h * w

    def resize(self, c, h, w, oh, ow):
        if (h, w) != (oh, ow):
            self.macs += 4 * c * oh * ow

    def sca(self, c, h, w):
        self.gap(c)
        self.conv(bl._pw(c, c), 1, 1)
        self.mul(c, h, w)

    def lka(self, c, h, w):
        self.conv(bl._dw(c, 5), h, w)
        self.conv(bl._dw(c, 7, dilation=3), h, w)
        self.conv(bl._pw(c, c), h, w)
        self.mul(c, h, w)

    def ffn(self, c, h, w):
        self.ln(c, h, w)
        self.conv(bl._pw(c, 2 * c), h, w)
        self.gate(c, h, w)
        self.conv(bl._pw(c, c), h, w)

    def msdab(self, c, h, w, dilations, cfg):
        self.ln(c, h, w)
        self.conv(bl._pw(c, c), h, w)
        self.conv(bl._dw(c, 3), h, w)
        if cfg.use_mdcm:
            for d in dilations:
                self.conv(bl._dw(c, 3, dilation=d, has_bias=False), h, w)
        else:
            self.conv(bl._dw(c, 3, has_bias=False), h, w)
        if cfg.use_sca:
            self.sca(c, h, w)
        if cfg.use_lka:
            self.lka(c, h, w)
        self.conv(bl._pw(c, c), h, w)  # dual-attention fuse
        self.ffn(c, h, w)

    def mscm(self, c, h, w, k, cfg):
        if cfg.use_square:
            self.conv(bl._strip(c, k, k), h, w)
        if cfg.use_stripe:
            self.conv(bl._strip(c, k, 1), h, w)
            self.conv(bl._strip(c, 1, k), h, w)
        self.conv(bl._strip(c, 1, 1), h, w)
        if cfg.use_sca:
            self.sca(c, h, w)

    def mslkb(self, c, h, w, k, cfg):
        self.ln(c, h, w)
        self.conv(bl._pw(c, c), h, w)
        self.conv(bl._dw(c, 3), h, w)
        self.mscm(c, h, w, k, cfg)
        self.conv(bl._pw(c, c), h, w)
        self.ffn(c, h, w)

    def nafblock(self, c, h, w):
        self.ln(c, h, w)
        self.conv(bl._pw(c, 2 * c), h, w)
        self.conv(bl._dw(2 * c, 3), h, w)
        self.gate(c, h, w)
        self.sca(c, h, w)
        self.conv(bl._pw(c, c), h, w)
        self.ffn(c, h, w)


def count_macs(config, input_h, input_w):
    """Analytic multiply count of one batch-1 forward at the given resolution.

    Non-divisible sizes are padded the way `infer_padded` pads them; the
    effective resolution is stated in the report note.
    """
    k = config.resolved_k()
    div = config.divisor
    h = input_h + (div - input_h % div) % div
    w = input_w + (div - input_w % div) % div
    note = ""
    if (h, w) != (input_h, input_w):
        note = f"(counted at padded resolution {h}x{w})"
    report = CostReport(kind="multiplies", note=note)
    ct = _Counter(report)
    c = config.base_width
    f = config.unshuffle_factor

    hs, ws = h // f, w // f
    ct.conv(en.same_conv(3 * f * f, c, kernel=(3, 3)), hs, ws)
    ct.flush("stem")

    lh, lw = hs, ws
    enc_shapes = []
    for l in range(1, LEVELS + 1):
        cw = c * 2 ** (l - 1)
        for _ in range(config.encoder_blocks[l - 1]):
            ct.msdab(cw, lh, lw, config.dilations[l - 1], config)
        lh, lw = ct.conv(ConvSpec(cw, 2 * cw, kernel=(2, 2), stride=(2, 2)), lh, lw)
        enc_shapes.append((2 * cw, lh, lw))
        ct.flush(f"enc{l}")

    if config.use_mslkb:
        ct.mslkb(16 * c, lh, lw, k, config)
        ct.flush("mslkb")

    for l in range(LEVELS, 0, -1):
        cw = c * 2 ** l
        th, tw = hs // 2 ** l, ws // 2 ** l
        if config.use_ffsc:
            for ck, chh, cww in enc_shapes:
                ct.resize(ck, chh, cww, th, tw)
            ct.conv(bl._pw(30 * c, cw), th, tw)
            ct.nafblock(cw, th, tw)
            ct.flush(f"ffsc{l}")
        ct.conv(ConvSpec(2 * cw, cw, kernel=(1, 1)), th, tw)
        for _ in range(config.decoder_blocks[l - 1]):
            ct.msdab(cw, th, tw, config.dilations[l - 1], config)
        ct.conv(ConvSpec(cw, 2 * cw, kernel=(1, 1)), th, tw)
        ct.flush(f"dec{l}")

    ct.conv(_head_spec(c, f), hs, ws)
    ct.conv(_head_spec(2 * c, f), hs // 2, ws // 2)
    ct.conv(_head_spec(4 * c, f), hs // 4, ws // 4)
    # residual bases for the intermediate predictions
    ct.resize(3, h, w, h // 2, w // 2)
    ct.resize(3, h, w, h // 4, w // 4)
    ct.flush("heads")
    return report
