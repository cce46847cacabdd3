"""Synthetic aligned (moire, clean) pair generation and translation recovery.

The physical chain behind screen-capture moire is simulated directly: the
clean image is rendered on an RGB-striped subpixel grid (4x supersampled),
optically blurred, sampled through a Bayer RGGB mosaic at a configurable
stride, bilinearly demosaiced, color-shifted, and area-resized back.
Interference between the stripe period and the mosaic stride produces the
banding. The capture warp (rotation + mild perspective) is applied to the
subpixel pattern's coordinates rather than to the image content, so pairs
stay exactly aligned while the artifact orientation and scale vary.

Parameters are chosen for artifact salience, not fidelity to any specific
camera; every stage is deterministic in the pair's spec.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .engine import Tensor
from . import imageio

SUPERSAMPLE = 4
STRIPE_LEAK = 0.15
STRIPE_DEPTH = 0.55  # modulation depth of the subpixel pattern
MAX_MISALIGN = 16.0
INSPECTION_NOISE_AMP = 0.05


class AlignmentError(RuntimeError):
    """Raised when translation estimation has no well-defined answer."""


@dataclass(frozen=True)
class SynthSpec:
    seed: int
    display_period: float = 3.0      # subpixel stripe width, supersampled px
    rotation_deg: float = 5.0
    persp_x: float = 0.0             # perspective terms of the warp homography
    persp_y: float = 0.0
    blur_sigma: float = 0.6          # relative to the camera sampling pitch
    cfa_stride: int = 2
    color_gain: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not 2.0 <= self.display_period <= 6.0:
            raise ValueError(f"display_period out of range [2, 6]: {self.display_period}")
        if not -15.0 <= self.rotation_deg <= 15.0:
            raise ValueError(f"rotation_deg out of range [-15, 15]: {self.rotation_deg}")
        if not 0.3 <= self.blur_sigma <= 1.5:
            raise ValueError(f"blur_sigma out of range [0.3, 1.5]: {self.blur_sigma}")
        if self.cfa_stride not in (1, 2, 3):
            raise ValueError(f"cfa_stride must be 1, 2 or 3: {self.cfa_stride}")
        if len(self.color_gain) != 3 or any(not 0.5 <= g <= 1.5 for g in self.color_gain):
            raise ValueError(f"color_gain out of range [0.5, 1.5]: {self.color_gain}")
        if abs(self.persp_x) > 1e-3 or abs(self.persp_y) > 1e-3:
            raise ValueError(f"perspective terms too strong: {(self.persp_x, self.persp_y)}")


@dataclass(frozen=True)
class SynthRanges:
    """Sampling ranges for dataset generation."""

    period: tuple = (2.0, 6.0)
    rotation: tuple = (-15.0, 15.0)
    perspective: float = 2e-4
    blur: tuple = (0.3, 1.5)
    strides: tuple = (1, 2, 3)
    gain: tuple = (0.8, 1.2)

    def draw(self, rng, seed):
        return SynthSpec(
            seed=seed,
            display_period=float(rng.uniform(*self.period)),
            rotation_deg=float(rng.uniform(*self.rotation)),
            persp_x=float(rng.uniform(-self.perspective, self.perspective)),
            persp_y=float(rng.uniform(-self.perspective, self.perspective)),
            blur_sigma=float(rng.uniform(*self.blur)),
            cfa_stride=int(rng.choice(self.strides)),
            color_gain=tuple(float(g) for g in rng.uniform(*self.gain, size=3)),
        )


@dataclass
class ImagePair:
    moire: Tensor
    clean: Tensor
    spec: SynthSpec
    true_offset: tuple = None  # (dx, dy) of the moire image, or None

    def __post_init__(self):
        if self.moire.shape != self.clean.shape:
            raise ValueError(f"pair shapes differ: {self.moire.shape} vs {self.clean.shape}")


# ---------------------------------------------------------------------------
# resampling primitives (plain float64 (3, h, w) arrays)


def _resize_chw(img, out_h, out_w):
    c, h, w = img.shape
    if (out_h, out_w) == (h, w):
        return img.copy()

    def taps(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        lo = np.floor(pos).astype(np.int64)
        frac = pos - lo
        return np.clip(lo, 0, n_in - 1), np.clip(lo + 1, 0, n_in - 1), frac

    ylo, yhi, fy = taps(h, out_h)
    xlo, xhi, fx = taps(w, out_w)
    tmp = img[:, ylo, :] * (1 - fy)[:, None] + img[:, yhi, :] * fy[:, None]
    return tmp[:, :, xlo] * (1 - fx) + tmp[:, :, xhi] * fx


def _reflect(idx, size):
    idx = np.asarray(idx)
    period = 2 * max(size - 1, 1)
    idx = np.mod(idx, period)
    return np.where(idx >= size, period - idx, idx)


def _shift_axis(img, shift, axis):
    """1-d bilinear shift with reflect fill: out[i] = in[i - shift]."""
    size = img.shape[axis]
    pos = np.arange(size) - shift
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    lo_r = _reflect(lo, size)
    hi_r = _reflect(lo + 1, size)
    a = np.take(img, lo_r, axis=axis)
    b = np.take(img, hi_r, axis=axis)
    shape = [1, 1, 1]
    shape[axis] = size
    f = frac.reshape(shape)
    return a * (1 - f) + b * f


def translate_chw(img, dx, dy):
    """Shift content right by dx and down by dy (bilinear, reflect fill)."""
    out = _shift_axis(img, dy, axis=1)
    return _shift_axis(out, dx, axis=2)


def _gaussian_blur(img, sigma):
    if sigma <= 0:
        return img
    radius = max(1, int(math.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    k /= k.sum()
    c, h, w = img.shape
    pad_r = np.pad(img, ((0, 0), (radius, radius), (0, 0)), mode="reflect")
    tmp = np.zeros_like(img)
    for i, kv in enumerate(k):
        tmp += kv * pad_r[:, i:i + h, :]
    pad_c = np.pad(tmp, ((0, 0), (0, 0), (radius, radius)), mode="reflect")
    out = np.zeros_like(img)
    for i, kv in enumerate(k):
        out += kv * pad_c[:, :, i:i + w]
    return out


def _stripe_mask(hs, ws, spec):
    """(3, hs, ws) RGB subpixel emission mask under the capture warp.

    Stripe coordinates are rotated about the center and perspective-divided,
    so the pattern's orientation and local period vary while the image
    content underneath stays put. The mask's spatial mean is ~1 per channel
    and the stripe swing is scaled by STRIPE_DEPTH.
    """
    theta = math.radians(spec.rotation_deg)
    cy, cx = (hs - 1) / 2.0, (ws - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(hs, dtype=np.float64) - cy,
                         np.arange(ws, dtype=np.float64) - cx, indexing="ij")
    denom = 1.0 + spec.persp_x * xs + spec.persp_y * ys
    u = (math.cos(theta) * xs + math.sin(theta) * ys) / denom
    chan = np.mod(np.floor(u / spec.display_period), 3).astype(np.int64)
    lit = 3.0 - 2.0 * STRIPE_LEAK
    mask = np.full((3, hs, ws), STRIPE_LEAK)
    for c in range(3):
        mask[c][chan == c] = lit
    return 1.0 + STRIPE_DEPTH * (mask - 1.0)


def _downscale_area(img, factor):
    """Integer-factor box-average downscale of a (c, h, w) image."""
    c, h, w = img.shape
    f = int(factor)
    return img.reshape(c, h // f, f, w // f, f).mean(axis=(2, 4))


# ---------------------------------------------------------------------------
# Bayer mosaic / demosaic


def _bayer_masks(h, w):
    """RGGB masks: R at (even, even), G at (even, odd) and (odd, even), B at (odd, odd)."""
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    r = ((ys % 2 == 0) & (xs % 2 == 0)).astype(np.float64)
    g = ((ys + xs) % 2 == 1).astype(np.float64)
    b = ((ys % 2 == 1) & (xs % 2 == 1)).astype(np.float64)
    return r, g, b


def _conv3_reflect(plane, kernel):
    p = np.pad(plane, 1, mode="reflect")
    out = np.zeros_like(plane)
    for i in range(3):
        for j in range(3):
            if kernel[i, j]:
                out += kernel[i, j] * p[i:i + plane.shape[0], j:j + plane.shape[1]]
    return out


def bayer_mosaic(img):
    """Sample a (3, h, w) image through an RGGB mosaic -> (h, w) raw plane."""
    _, h, w = img.shape
    r, g, b = _bayer_masks(h, w)
    return img[0] * r + img[1] * g + img[2] * b


def bilinear_demosaic(raw):
    """Plain bilinear RGGB demosaic of an (h, w) raw plane -> (3, h, w)."""
    h, w = raw.shape
    r_m, g_m, b_m = _bayer_masks(h, w)
    cross = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=np.float64)
    diag = np.array([[1, 0, 1], [0, 0, 0], [1, 0, 1]], dtype=np.float64)
    full = cross + diag

    def interp(mask, kernel):
        num = _conv3_reflect(raw * mask, kernel)
        den = _conv3_reflect(mask, kernel)
        return np.where(den > 0, num / np.maximum(den, 1e-12), 0.0)

    g = raw * g_m + (1 - g_m) * interp(g_m, cross)
    r = raw * r_m + (1 - r_m) * interp(r_m, full)
    b = raw * b_m + (1 - b_m) * interp(b_m, full)
    return np.stack([r, g, b])


# ---------------------------------------------------------------------------
# pair generation


def _as_chw(t):
    data = t.data if hasattr(t, "data") else np.asarray(t, dtype=np.float64)
    if data.ndim == 4:
        if data.shape[0] != 1:
            raise ValueError("expected a single image")
        data = data[0]
    if data.ndim != 3 or data.shape[0] != 3:
        raise ValueError(f"expected (3, h, w) image, got {data.shape}")
    return np.asarray(data, dtype=np.float64)


def generate_pair(clean, spec):
    """Simulate screen-capture moire over `clean`; returns an aligned pair."""
    base = _as_chw(clean)
    _, h, w = base.shape
    if h < 64 or w < 64:
        raise ValueError(f"clean image must be at least 64x64, got {h}x{w}")

    hs, ws = h * SUPERSAMPLE, w * SUPERSAMPLE
    scene = _resize_chw(base, hs, ws)
    scene = scene * _stripe_mask(hs, ws, spec)
    scene = _gaussian_blur(scene, spec.blur_sigma * spec.cfa_stride)

    stride = spec.cfa_stride
    sensor = scene[:, ::stride, ::stride]
    raw = bayer_mosaic(sensor)
    rgb = bilinear_demosaic(raw)
    rgb = rgb * np.asarray(spec.color_gain, dtype=np.float64).reshape(3, 1, 1)
    # sensor-to-output: box average for the integer part, bilinear remainder
    ratio = rgb.shape[1] // h
    if ratio > 1 and rgb.shape[1] % (h * ratio) == 0 and rgb.shape[2] % (w * ratio) == 0:
        rgb = _downscale_area(rgb, ratio)
    moire = np.clip(_resize_chw(rgb, h, w), 0.0, 1.0)

    return ImagePair(
        moire=Tensor(moire[np.newaxis]),
        clean=Tensor(base[np.newaxis].copy()),
        spec=spec,
    )


def inject_misalignment(pair, dx, dy):
    """Translate the moire image by (dx, dy) pixels and record the offset."""
    if abs(dx) > MAX_MISALIGN or abs(dy) > MAX_MISALIGN:
        raise ValueError(f"offset ({dx}, {dy}) exceeds +-{MAX_MISALIGN} px")
    moire = translate_chw(_as_chw(pair.moire), dx, dy)
    return ImagePair(
        moire=Tensor(moire[np.newaxis]),
        clean=pair.clean,
        spec=pair.spec,
        true_offset=(float(dx), float(dy)),
    )


# ---------------------------------------------------------------------------
# translation estimation


def _gray(t):
    return _as_chw(t).mean(axis=0)


def estimate_translation(a, b, search_radius=8):
    """Offset (dx, dy) such that `b` is approximately `a` shifted by it.

    Integer-pixel normalized cross-correlation search over the window,
    refined to subpixel by a quadratic fit of the correlation peak. Raises
    AlignmentError for constant images.
    """
    if search_radius < 1 or search_radius > 16:
        raise ValueError(f"search_radius must be in [1, 16], got {search_radius}")
    ga = _gray(a)
    gb = _gray(b)
    if ga.shape != gb.shape:
        raise ValueError(f"shape mismatch {ga.shape} vs {gb.shape}")
    if ga.std() < 1e-9 or gb.std() < 1e-9:
        raise AlignmentError("constant image: translation is undefined")
    h, w = ga.shape
    r = int(search_radius)
    size = 2 * r + 1
    ncc = np.full((size, size), -2.0)
    for iy, dy in enumerate(range(-r, r + 1)):
        ay0, ay1 = max(0, -dy), min(h, h - dy)
        if ay1 - ay0 < 8:
            continue
        for ix, dx in enumerate(range(-r, r + 1)):
            ax0, ax1 = max(0, -dx), min(w, w - dx)
            if ax1 - ax0 < 8:
                continue
            pa = ga[ay0:ay1, ax0:ax1]
            pb = gb[ay0 + dy:ay1 + dy, ax0 + dx:ax1 + dx]
            va = pa - pa.mean()
            vb = pb - pb.mean()
            den = math.sqrt(float((va * va).sum()) * float((vb * vb).sum()))
            if den < 1e-12:
                continue
            ncc[iy, ix] = float((va * vb).sum()) / den
    if ncc.max() <= -2.0:
        raise AlignmentError("no valid overlap inside the search window")
    iy, ix = np.unravel_index(int(np.argmax(ncc)), ncc.shape)
    dy_i, dx_i = iy - r, ix - r

    def refine(cm, c0, cp):
        denom = cm - 2.0 * c0 + cp
        if denom >= -1e-12 or (1.0 - c0) < 1e-12:
            return 0.0
        return float(np.clip(0.5 * (cm - cp) / denom, -0.5, 0.5))

    ddx = ddy = 0.0
    if 0 < ix < size - 1 and ncc[iy, ix - 1] > -2.0 and ncc[iy, ix + 1] > -2.0:
        ddx = refine(ncc[iy, ix - 1], ncc[iy, ix], ncc[iy, ix + 1])
    if 0 < iy < size - 1 and ncc[iy - 1, ix] > -2.0 and ncc[iy + 1, ix] > -2.0:
        ddy = refine(ncc[iy - 1, ix], ncc[iy, ix], ncc[iy + 1, ix])
    return (float(dx_i + ddx), float(dy_i + ddy))


# ---------------------------------------------------------------------------
# procedural base images


def random_clean_image(seed, h=128, w=128):
    """Procedural textured RGB image (value-noise octaves + soft shapes)."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    img = np.zeros((3, h, w))
    for cell, amp in ((8, 0.5), (16, 0.3), (32, 0.2)):
        grid = rng.uniform(0, 1, size=(3, max(2, h // cell), max(2, w // cell)))
        img += amp * _resize_chw(grid, h, w)
    ys, xs = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    for _ in range(4):
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        radius = rng.uniform(0.08, 0.3)
        color = rng.uniform(0, 1, size=3)
        d2 = (ys - cy) ** 2 + (xs - cx) ** 2
        blob = np.exp(-d2 / (2 * radius * radius))
        img = img * (1 - 0.6 * blob) + color.reshape(3, 1, 1) * 0.6 * blob
    lo, hi = img.min(), img.max()
    img = 0.05 + 0.9 * (img - lo) / max(hi - lo, 1e-9)
    return Tensor(img[np.newaxis])


def inspection_base_image(seed, h=128, w=128, level=None, noise_amp=INSPECTION_NOISE_AMP):
    """Solid panel color plus seeded per-pixel noise (inspection preset).

    The noise field depends only on (seed, h, w, noise_amp), so a recorded
    (seed, base_level) pair reproduces the image exactly.
    """
    level_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    noise_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    lvl = float(level_rng.uniform(0.35, 0.65)) if level is None else float(level)
    noise = noise_rng.uniform(-noise_amp, noise_amp, size=(1, h, w))
    img = np.clip(lvl + np.broadcast_to(noise, (3, h, w)), 0.0, 1.0)
    return Tensor(img[np.newaxis].copy()), lvl


# ---------------------------------------------------------------------------
# dataset generation


MANIFEST_COLUMNS = (
    "index", "moire", "gt", "preset", "seed", "display_period", "rotation_deg",
    "persp_x", "persp_y", "blur_sigma", "cfa_stride", "gain_r", "gain_g",
    "gain_b", "base_level", "noise_amp", "true_dx", "true_dy",
)


def make_dataset(clean_dir, n, ranges, out_dir, preset="natural", seed=0,
                 misalign=0.0, size=(128, 128)):
    """Write n pairs plus manifest.tsv; returns the manifest rows.

    natural: cycles through PPM images found in clean_dir.
    inspection: synthesizes solid-color-plus-noise base images of `size`.
    """
    if preset not in ("natural", "inspection"):
        raise ValueError(f"unknown preset '{preset}'")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sources = []
    if preset == "natural":
        sources = sorted(Path(clean_dir).glob("*.ppm"))
        if not sources:
            raise FileNotFoundError(f"no .ppm images in {clean_dir}")
    rows = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        pair_seed = int(rng.integers(0, 2 ** 31))
        base_level = noise_amp = None
        if preset == "natural":
            clean = imageio.read_ppm(sources[i % len(sources)])
        else:
            clean, base_level = inspection_base_image(pair_seed, *size)
            noise_amp = INSPECTION_NOISE_AMP
        spec = ranges.draw(rng, pair_seed)
        pair = generate_pair(clean, spec)
        if misalign:
            dx = float(rng.uniform(-misalign, misalign))
            dy = float(rng.uniform(-misalign, misalign))
            pair = inject_misalignment(pair, dx, dy)
        moire_name = f"{i:05d}_moire.ppm"
        gt_name = f"{i:05d}_gt.ppm"
        imageio.write_ppm(out / moire_name, pair.moire)
        imageio.write_ppm(out / gt_name, pair.clean)
        rows.append({
            "index": i, "moire": moire_name, "gt": gt_name, "preset": preset,
            "seed": spec.seed, "display_period": spec.display_period,
            "rotation_deg": spec.rotation_deg, "persp_x": spec.persp_x,
            "persp_y": spec.persp_y, "blur_sigma": spec.blur_sigma,
            "cfa_stride": spec.cfa_stride, "gain_r": spec.color_gain[0],
            "gain_g": spec.color_gain[1], "gain_b": spec.color_gain[2],
            "base_level": base_level, "noise_amp": noise_amp,
            "true_dx": pair.true_offset[0] if pair.true_offset else None,
            "true_dy": pair.true_offset[1] if pair.true_offset else None,
        })
    write_manifest(out / "manifest.tsv", rows)
    return rows


def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def write_manifest(path, rows):
    lines = ["\t".join(MANIFEST_COLUMNS)]
    for row in rows:
        lines.append("\t".join(_fmt(row[c]) for c in MANIFEST_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path):
    text = Path(path).read_text(encoding="utf-8").rstrip("\n")
    lines = text.split("\n")
    header = lines[0].split("\t")
    if tuple(header) != MANIFEST_COLUMNS:
        raise ValueError(f"unexpected manifest columns in {path}")
    rows = []
    for line in lines[1:]:
        vals = line.split("\t")
        row = dict(zip(MANIFEST_COLUMNS, vals))
        for key in ("display_period", "rotation_deg", "persp_x", "persp_y",
                    "blur_sigma", "gain_r", "gain_g", "gain_b", "base_level",
                    "noise_amp", "true_dx", "true_dy"):
            row[key] = None if row[key] == "-" else float(row[key])
        row["index"] = int(row["index"])
        row["seed"] = int(row["seed"])
        row["cfa_stride"] = int(row["cfa_stride"])
        rows.append(row)
    return rows
