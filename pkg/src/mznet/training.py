"""Loss construction, Adam, cosine schedule, and the training loop.

Training is deterministic for a fixed seed: data order, crops, flips and
initialization all derive from recorded seeds, and the loop makes no
wall-clock-dependent decisions. Losses average over micro-batches so that
gradient accumulation reproduces the equivalent large batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import engine as en
from . import model as md
from .checkpoint import save_checkpoint
from .engine import ConvSpec, Tape, Tensor
from .imageio import read_ppm
from .metrics import psnr
from .synth import read_manifest


class TrainingAbort(RuntimeError):
    """Raised when training hits a non-finite loss or gradient."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 2
    crop: int = 128
    lr_init: float = 2e-4
    lr_min: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.9
    adam_eps: float = 1e-8
    lambda_perceptual: float = 1.0
    grad_accum_steps: int = 1
    seed: int = 0
    proxy_seed: int = 77
    supervision_weights: tuple = (1.0, 1.0, 1.0)
    augment_flips: bool = True

    def __post_init__(self):
        if self.lr_min > self.lr_init:
            raise ValueError("lr_min must be <= lr_init")
        for b in (self.adam_beta1, self.adam_beta2):
            if not 0.0 <= b < 1.0:
                raise ValueError(f"betas must be in [0, 1), got {b}")
        if self.batch_size < 1 or self.crop < 1 or self.epochs < 1:
            raise ValueError("epochs, batch size and crop must be positive")
        if self.crop % 32:
            raise ValueError(f"crop must be divisible by 32, got {self.crop}")
        if self.grad_accum_steps < 1 or self.batch_size % self.grad_accum_steps:
            raise ValueError("batch_size must be divisible by grad_accum_steps")
        if self.lambda_perceptual < 0:
            raise ValueError("lambda_perceptual must be >= 0")
        if len(self.supervision_weights) != 3:
            raise ValueError("supervision_weights needs 3 entries")


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params):
        state = cls()
        for path, p in params.items():
            state.m[path] = np.zeros_like(p.data)
            state.v[path] = np.zeros_like(p.data)
        return state


# ---------------------------------------------------------------------------
# perceptual proxy: frozen random strided conv pyramid


PROXY_CHANNELS = (16, 16, 32, 32, 64)  # post-gate widths of the 5 layers
PROXY_TAIL_LAYERS = 3


@lru_cache(maxsize=4)
def build_proxy(proxy_seed):
    """Seed-initialized frozen feature pyramid; identical seed, identical net."""
    rng = np.random.default_rng(np.random.PCG64(int(proxy_seed)))
    layers = []
    c_in = 3
    for c_out in PROXY_CHANNELS:
        spec = ConvSpec(c_in, 2 * c_out, kernel=(3, 3), stride=(2, 2),
                        padding=(1, 1), has_bias=True)
        fan_in = c_in * 9
        bound = 1.0 / math.sqrt(fan_in)
        w = Tensor(rng.uniform(-bound, bound, size=spec.weight_shape()))
        b = Tensor(rng.uniform(-bound, bound, size=(1, 2 * c_out, 1, 1)))
        layers.append((spec, w, b))
        c_in = c_out
    return tuple(layers)


def _proxy_features(x, layers, tape):
    feats = []
    cur = x
    for spec, w, b in layers:
        cur = en.conv2d(cur, w, b, spec, tape)
        cur = en.simple_gate(cur, tape)
        feats.append(cur)
    return feats


def perceptual_proxy(a, b, proxy_seed, tape=None):
    """L1 distance between frozen random features of a and b (scalar tensor).

    Per-layer distances are means over the feature count, summed over the
    last PROXY_TAIL_LAYERS layers.
    """
    if a.shape != b.shape:
        raise en.ShapeError(f"perceptual proxy: shape mismatch {a.shape} vs {b.shape}")
    layers = build_proxy(proxy_seed)
    fa = _proxy_features(a, layers, tape)
    fb = _proxy_features(b, layers, tape)
    total = None
    for xa, xb in zip(fa[-PROXY_TAIL_LAYERS:], fb[-PROXY_TAIL_LAYERS:]):
        d = en.mean_all(en.abs_val(en.sub(xa, xb, tape), tape), tape)
        total = d if total is None else en.add(total, d, tape)
    return total


# ---------------------------------------------------------------------------
# loss


def loss_total(preds, gt, cfg, tape=None, supervised=3):
    """Deep-supervised L1 (+ perceptual proxy) across full/half/quarter scales.

    `supervised` limits supervision to the first k scales. Returns
    (total tensor, components dict with float l1/perceptual sums).
    """
    n, c, h, w = gt.shape
    if len(preds) != 3:
        raise ValueError(f"expected 3 predictions, got {len(preds)}")
    total = None
    l1_sum = 0.0
    perc_sum = 0.0
    for pred, s, weight in list(zip(preds, (1, 2, 4), cfg.supervision_weights))[:supervised]:
        target = en.bilinear_resize(gt, h // s, w // s) if s > 1 else gt
        if pred.shape != target.shape:
            raise en.ShapeError(f"prediction {pred.shape} vs target {target.shape}")
        l1 = en.mean_all(en.abs_val(en.sub(pred, target, tape), tape), tape)
        term = l1
        l1_sum += l1.item()
        if cfg.lambda_perceptual > 0:
            perc = perceptual_proxy(pred, target, cfg.proxy_seed, tape)
            perc_sum += perc.item()
            term = en.add(term, en.scale(perc, cfg.lambda_perceptual, tape), tape)
        term = en.scale(term, weight, tape)
        total = term if total is None else en.add(total, term, tape)
    return total, {"l1": l1_sum, "perceptual": perc_sum}


# ---------------------------------------------------------------------------
# optimizer / schedule


def adam_step(params, state, lr, cfg):
    """Standard bias-corrected Adam over every tensor with a gradient."""
    if lr <= 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for path, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingAbort(f"non-finite gradient in parameter '{path}'")
        m = state.m[path]
        v = state.v[path]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def cosine_lr(step, total_steps, cfg):
    """lr_min + (lr_init - lr_min) * (1 + cos(pi * step / total)) / 2."""
    if total_steps <= 0:
        raise ValueError("total_steps must be > 0")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    cos = math.cos(math.pi * step / total_steps)
    return cfg.lr_min + (cfg.lr_init - cfg.lr_min) * 0.5 * (1.0 + cos)


# ---------------------------------------------------------------------------
# dataset


class PairDataset:
    """Aligned (moire, clean) pairs loaded from a manifest directory."""

    def __init__(self, data_dir):
        self.dir = Path(data_dir)
        self.rows = read_manifest(self.dir / "manifest.tsv")
        if not self.rows:
            raise ValueError(f"empty dataset in {data_dir}")
        self._cache = {}

    def __len__(self):
        return len(self.rows)

    def get(self, idx):
        if idx not in self._cache:
            row = self.rows[idx]
            moire = read_ppm(self.dir / row["moire"]).data[0]
            clean = read_ppm(self.dir / row["gt"]).data[0]
            self._cache[idx] = (moire, clean)
        return self._cache[idx]

    def sample_batch(self, indices, crop, rng, flips=True):
        """Aligned random crops (+ optional flips); same window on both images."""
        ms, cs = [], []
        for idx in indices:
            moire, clean = self.get(idx)
            _, h, w = moire.shape
            if h < crop or w < crop:
                raise ValueError(f"pair {idx} is {h}x{w}, smaller than crop {crop}")
            top = int(rng.integers(0, h - crop + 1))
            left = int(rng.integers(0, w - crop + 1))
            m = moire[:, top:top + crop, left:left + crop]
            c = clean[:, top:top + crop, left:left + crop]
            if flips:
                if rng.integers(0, 2):
                    m = m[:, :, ::-1]
                    c = c[:, :, ::-1]
                if rng.integers(0, 2):
                    m = m[:, ::-1, :]
                    c = c[:, ::-1, :]
            ms.append(m)
            cs.append(c)
        return Tensor(np.ascontiguousarray(np.stack(ms))), Tensor(np.ascontiguousarray(np.stack(cs)))


# ---------------------------------------------------------------------------
# loop


def _zero_grads(params):
    for p in params.values():
        p.grad = None


def _fmt_row(vals):
    out = []
    for v in vals:
        out.append(f"{v:.10g}" if isinstance(v, float) else str(v))
    return "\t".join(out) + "\n"


def train(params, dataset, train_cfg, model_cfg, out_dir, start_step=0,
          optim_state=None, max_steps=None, progress=None):
    """Seeded epoch loop with aligned crops, flips and gradient accumulation.

    Writes an append-only TSV log and a rotating per-epoch checkpoint under
    `out_dir`; returns (params, optim_state, last_log_row). Resuming from
    `start_step` replays the data stream so the schedule and batch order
    match an uninterrupted run. `max_steps` caps the optimizer steps taken
    in this call without changing the lr schedule (which always spans the
    full configured run). `progress(step, total_steps, row)` may return
    truthy to stop early.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(dataset)
    if n < train_cfg.batch_size:
        raise ValueError(f"dataset of {n} pairs smaller than batch {train_cfg.batch_size}")
    micro = train_cfg.batch_size // train_cfg.grad_accum_steps
    steps_per_epoch = n // train_cfg.batch_size
    total_steps = train_cfg.epochs * steps_per_epoch
    if start_step > total_steps:
        raise ValueError(f"start_step {start_step} beyond schedule of {total_steps}")
    model_cfg = model_cfg.with_k_for_crop(train_cfg.crop, train_cfg.crop)

    if optim_state is None:
        optim_state = OptimState.for_params(params)
        optim_state.t = start_step
    rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 0xDA7A]))

    log_path = out / "train_log.tsv"
    log = open(log_path, "a" if start_step else "w", encoding="utf-8")
    if not start_step:
        log.write("step\tepoch\tlr\tl1\tperceptual\ttotal\ttrain_psnr\n")

    last_row = None
    stop = False
    ckpt_path = out / "ckpt_last.mznt"
    try:
        for epoch in range(train_cfg.epochs):
            perm = rng.permutation(n)
            for b in range(steps_per_epoch):
                gstep = epoch * steps_per_epoch + b
                batch_idx = perm[b * train_cfg.batch_size:(b + 1) * train_cfg.batch_size]
                groups = [batch_idx[i * micro:(i + 1) * micro]
                          for i in range(train_cfg.grad_accum_steps)]
                # draws are consumed even when replaying skipped steps, so a
                # resumed run sees the same stream as an uninterrupted one
                batches = [dataset.sample_batch(g, train_cfg.crop, rng,
                                                flips=train_cfg.augment_flips) for g in groups]
                if gstep < start_step:
                    continue
                lr = cosine_lr(gstep, total_steps, train_cfg)
                _zero_grads(params)
                l1_v = perc_v = total_v = 0.0
                preds_np, gts_np = [], []
                for moire, clean in batches:
                    tape = Tape()
                    pred, (half, quarter) = md.forward(params, moire, model_cfg, tape)
                    loss, parts = loss_total(
                        (pred, half, quarter), clean, train_cfg, tape,
                        supervised=model_cfg.deep_supervision_levels)
                    loss = en.scale(loss, 1.0 / train_cfg.grad_accum_steps, tape)
                    value = loss.item()
                    if not math.isfinite(value):
                        raise TrainingAbort(f"non-finite loss at step {gstep}")
                    total_v += value
                    l1_v += parts["l1"] / train_cfg.grad_accum_steps
                    perc_v += parts["perceptual"] / train_cfg.grad_accum_steps
                    en.backward(loss, tape)
                    preds_np.append(pred.data)
                    gts_np.append(clean.data)
                adam_step(params, optim_state, lr, train_cfg)
                train_psnr = psnr(np.concatenate(preds_np), np.concatenate(gts_np))
                last_row = (gstep + 1, epoch, lr, l1_v, perc_v, total_v, train_psnr)
                log.write(_fmt_row(last_row))
                if progress is not None and progress(gstep + 1, total_steps, last_row):
                    stop = True
                if max_steps is not None and gstep + 1 - start_step >= max_steps:
                    stop = True
                if stop:
                    break
            if last_row is not None and last_row[0] > start_step:
                log.flush()
                save_checkpoint(ckpt_path, params, model_cfg, last_row[0],
                                train_cfg.proxy_seed, optim_state=optim_state)
            if stop:
                break
    finally:
        log.close()
    final_step = last_row[0] if last_row else start_step
    save_checkpoint(ckpt_path, params, model_cfg, final_step, train_cfg.proxy_seed,
                    optim_state=optim_state)
    return params, optim_state, last_row
