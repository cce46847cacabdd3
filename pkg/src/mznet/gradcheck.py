"""Finite-difference verification of reverse-mode gradients.

Central differences at f64 step 1e-5 against taped backward, on randomized
small shapes, for inputs, weights and biases alike. The finite-difference
side only ever calls forward evaluations, so it stays independent of the
backward implementation it checks.
"""

from __future__ import annotations

import numpy as np

from . import blocks as bl
from . import engine as en
from . import model as md
from .engine import Tape, Tensor

FD_STEP = 1e-5
DEFAULT_TOL = 1e-4


def rel_error(a, b, floor=1e-3):
    """|a-b| scaled by the larger magnitude, floored to keep noise benign."""
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradcheck_case(forward, leaves, rng, tol=DEFAULT_TOL, step=FD_STEP, samples=5):
    """Check d(mean(forward() * M))/d(leaf) for sampled elements of every leaf.

    `forward(tape)` must recompute the output from the live leaf tensors.
    Returns a list of (leaf_name, flat_index, fd, analytic, err) failures.
    """
    probe = forward(None)
    m = rng.standard_normal(probe.shape)

    def scalar():
        return float((forward(None).data * m).mean())

    for t in leaves.values():
        t.zero_grad()
    tape = Tape()
    out = forward(tape)
    loss = en.mean_all(en.mul(out, Tensor(m), tape), tape)
    en.backward(loss, tape)

    failures = []
    for name, t in leaves.items():
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        count = min(samples, t.numel())
        idxs = rng.choice(t.numel(), size=count, replace=False)
        for idx in idxs:
            orig = t.data.flat[idx]
            t.data.flat[idx] = orig + step
            fp = scalar()
            t.data.flat[idx] = orig - step
            fm = scalar()
            t.data.flat[idx] = orig
            fd = (fp - fm) / (2.0 * step)
            analytic = float(grad.flat[idx])
            err = rel_error(fd, analytic)
            if err >= tol:
                failures.append((name, int(idx), fd, analytic, err))
    return failures


def _rand_t(rng, shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _leaves(x, params):
    leaves = {"input": x}
    leaves.update(params)
    return leaves


def _block_cases(dilations):
    """Case name -> builder(rng) -> (forward(tape), leaves dict)."""

    def mdcm(rng):
        c = int(rng.choice([4, 8]))
        x = _rand_t(rng, (1, c, 8, 8))
        p = {}
        bl.build_mdcm(p, rng, "m", c, dilations)
        sub = bl.sub_params(p, "m")
        return (lambda tape: bl.mdcm_forward(x, sub, dilations, tape)), _leaves(x, p)

    def sca(rng):
        c = int(rng.choice([4, 8]))
        x = _rand_t(rng, (2, c, 6, 6))
        p = {}
        bl.build_sca(p, rng, "s", c)
        sub = bl.sub_params(p, "s")
        return (lambda tape: bl.sca_forward(x, sub, tape)), _leaves(x, p)

    def lka(rng):
        c = 4
        x = _rand_t(rng, (1, c, 10, 10))
        p = {}
        bl.build_lka(p, rng, "l", c)
        sub = bl.sub_params(p, "l")
        return (lambda tape: bl.lka_forward(x, sub, tape)), _leaves(x, p)

    def dam(rng):
        c = 4
        x = _rand_t(rng, (1, c, 8, 8))
        p = {}
        bl.build_dam(p, rng, "d", c)
        sub = bl.sub_params(p, "d")
        return (lambda tape: bl.dam_forward(x, sub, tape)), _leaves(x, p)

    def msdab(rng):
        c = 8
        x = _rand_t(rng, (1, c, 8, 8))
        p = {}
        bl.build_msdab(p, rng, "b", c, dilations)
        sub = bl.sub_params(p, "b")
        return (lambda tape: bl.msdab_forward(x, sub, dilations, tape)), _leaves(x, p)

    def mscm(rng):
        c = 4
        k = int(rng.choice([3, 5]))
        x = _rand_t(rng, (1, c, 9, 9))
        p = {}
        bl.build_mscm(p, rng, "m", c, k)
        sub = bl.sub_params(p, "m")
        return (lambda tape: bl.mscm_forward(x, sub, k, tape)), _leaves(x, p)

    def mslkb(rng):
        c = 4
        k = 7
        x = _rand_t(rng, (1, c, 12, 12))
        p = {}
        bl.build_mslkb(p, rng, "b", c, k)
        sub = bl.sub_params(p, "b")
        return (lambda tape: bl.mslkb_forward(x, sub, k, tape)), _leaves(x, p)

    def nafblock(rng):
        c = int(rng.choice([4, 8]))
        x = _rand_t(rng, (1, c, 7, 7))
        p = {}
        bl.build_nafblock(p, rng, "n", c)
        sub = bl.sub_params(p, "n")
        return (lambda tape: bl.nafblock_forward(x, sub, tape)), _leaves(x, p)

    def ffsc(rng):
        base = 2
        level = int(rng.integers(1, 5))
        hs = 16
        feats = [_rand_t(rng, (1, base * 2 ** k, hs // 2 ** k, hs // 2 ** k))
                 for k in range(1, 5)]
        p = {}
        bl.build_ffsc(p, rng, "f", base, level)
        sub = bl.sub_params(p, "f")
        leaves = {f"feat{k}": f for k, f in enumerate(feats, start=1)}
        leaves.update(p)
        return (lambda tape: bl.ffsc_fuse(feats, level, sub, base, tape)), leaves

    return {
        "mdcm": mdcm, "sca": sca, "lka": lka, "dam": dam, "msdab": msdab,
        "mscm": mscm, "mslkb": mslkb, "nafblock": nafblock, "ffsc": ffsc,
    }


def tiny_model_case(rng, supervise_all=True):
    """Whole-network gradient case on a 32x32 input with a 4-wide config.

    Head convolutions are re-randomized (they initialize to zero, which
    would block gradient flow into the trunk and make the check vacuous).
    """
    cfg = md.ModelConfig(base_width=4, encoder_blocks=(1, 1, 1, 1),
                         decoder_blocks=(1, 1, 1, 1), mslkb_k=1)
    params = md.build_model(cfg, seed=int(rng.integers(0, 2 ** 31)))
    for path, t in params.items():
        if path.startswith("head_"):
            t.data[...] = 0.1 * rng.standard_normal(t.shape)
    x = Tensor(rng.uniform(0, 1, size=(1, 3, 32, 32)), requires_grad=True)
    weights = [rng.standard_normal((1, 3, s, s)) for s in (32, 16, 8)]

    def fwd(tape):
        out, (half, quarter) = md.forward(params, x, cfg, tape)
        preds = (out, half, quarter) if supervise_all else (out,)
        total = None
        for pred, m in zip(preds, weights):
            term = en.mean_all(en.mul(pred, Tensor(m), tape), tape)
            total = term if total is None else en.add(total, term, tape)
        return total

    leaves = {"input": x}
    leaves.update(params)
    return fwd, leaves


def run_gradient_suite(trials=20, tol=DEFAULT_TOL, seed=0, dilations=(1, 4, 7, 9),
                       samples=5, model_trials=2, verbose=False):
    """All block cases x `trials`, plus whole-model cases; returns (failures, total)."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    cases = _block_cases(tuple(dilations))
    failures = 0
    total = 0
    for name, builder in cases.items():
        bad = []
        for _ in range(trials):
            forward, leaves = builder(rng)
            bad += gradcheck_case(forward, leaves, rng, tol=tol, samples=samples)
            total += 1
        failures += len(bad)
        if verbose:
            status = "ok" if not bad else f"{len(bad)} FAILED ({bad[:3]})"
            print(f"gradcheck {name:<10} {trials} trials: {status}")
    for _ in range(model_trials):
        fwd, leaves = tiny_model_case(rng)
        # whole model: sample a few elements of every leaf would be slow, so
        # check a random subset of the parameter tree plus the input
        picked = {"input": leaves["input"]}
        names = [k for k in leaves if k != "input"]
        for k in rng.choice(names, size=min(12, len(names)), replace=False):
            picked[k] = leaves[k]
        bad = gradcheck_case(fwd, picked, rng, tol=tol, samples=3)
        failures += len(bad)
        total += 1
        if verbose:
            status = "ok" if not bad else f"{len(bad)} FAILED ({bad[:3]})"
            print(f"gradcheck model      1 trial : {status}")
    return failures, total
