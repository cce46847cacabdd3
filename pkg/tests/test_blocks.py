import numpy as np
import pytest

from mznet import blocks as bl
from mznet import engine as en
from mznet.engine import Tape, Tensor

from oracles import conv2d_oracle, finite_diff, global_pool_oracle, rel_err

RNG = np.random.default_rng
DILATIONS = (1, 4, 7, 9)


def rand_t(rng, shape, grad=False):
    return Tensor(rng.standard_normal(shape), requires_grad=grad)


def delta_kernel(c, k):
    """Depthwise center-impulse kernel: convolution becomes the identity."""
    w = np.zeros((c, 1, k, k))
    w[:, 0, k // 2, k // 2] = 1.0
    return w


# ---------------------------------------------------------------------------
# MDCM


def test_mdcm_delta_kernels_sum_to_multiple():
    rng = RNG(0)
    c = 6
    x = rand_t(rng, (1, c, 10, 10))
    p = {}
    bl.build_mdcm(p, rng, "m", c, DILATIONS)
    for d in DILATIONS:
        p[f"m.d{d}.weight"].data[...] = delta_kernel(c, 3)
    y = bl.mdcm_forward(x, bl.sub_params(p, "m"), DILATIONS)
    assert np.allclose(y.data, 4.0 * x.data)

    three = (1, 4, 7)
    p2 = {}
    bl.build_mdcm(p2, rng, "m", c, three)
    for d in three:
        p2[f"m.d{d}.weight"].data[...] = delta_kernel(c, 3)
    y2 = bl.mdcm_forward(x, bl.sub_params(p2, "m"), three)
    assert np.allclose(y2.data, 3.0 * x.data)


def test_mdcm_equals_sum_of_branches():
    rng = RNG(1)
    c = 4
    x = rand_t(rng, (1, c, 12, 12))
    p = {}
    bl.build_mdcm(p, rng, "m", c, DILATIONS)
    y = bl.mdcm_forward(x, bl.sub_params(p, "m"), DILATIONS)
    total = np.zeros_like(y.data)
    for d in DILATIONS:
        spec = en.same_conv(c, c, (3, 3), dilation=(d, d), groups=c, has_bias=False)
        total = total + en.conv2d(x, p[f"m.d{d}.weight"], None, spec).data
    assert np.array_equal(y.data, total) or np.max(np.abs(y.data - total)) < 1e-12


def test_mdcm_matches_conv_oracle():
    rng = RNG(2)
    c = 3
    x = rng.standard_normal((1, c, 8, 8))
    p = {}
    bl.build_mdcm(p, rng, "m", c, DILATIONS)
    y = bl.mdcm_forward(Tensor(x), bl.sub_params(p, "m"), DILATIONS)
    ref = np.zeros_like(y.data)
    for d in DILATIONS:
        ref += conv2d_oracle(x, p[f"m.d{d}.weight"].data, dilation=(d, d),
                             groups=c, padding=(d, d))
    assert np.max(np.abs(y.data - ref)) < 1e-6


# ---------------------------------------------------------------------------
# SCA


def test_sca_identity_conv_constant_input():
    rng = RNG(3)
    c = 4
    p = {}
    bl.build_sca(p, rng, "s", c)
    p["s.conv.weight"].data[...] = np.eye(c).reshape(c, c, 1, 1)
    p["s.conv.bias"].data[...] = 0.0
    ks = np.arange(1.0, c + 1).reshape(1, c, 1, 1)
    x = Tensor(np.broadcast_to(ks, (1, c, 5, 5)).copy())
    y = bl.sca_forward(x, bl.sub_params(p, "s"))
    assert np.allclose(y.data, np.broadcast_to(ks * ks, y.shape))


def test_sca_zero_conv_annihilates():
    rng = RNG(4)
    c = 4
    p = {}
    bl.build_sca(p, rng, "s", c)
    p["s.conv.weight"].data[...] = 0.0
    p["s.conv.bias"].data[...] = 0.0
    x = rand_t(rng, (2, c, 6, 6))
    y = bl.sca_forward(x, bl.sub_params(p, "s"))
    assert np.all(y.data == 0.0)


def test_sca_matches_composed_oracles():
    rng = RNG(5)
    c = 5
    x = rng.standard_normal((2, c, 7, 7))
    p = {}
    bl.build_sca(p, rng, "s", c)
    y = bl.sca_forward(Tensor(x), bl.sub_params(p, "s"))
    pooled = global_pool_oracle(x)
    attn = conv2d_oracle(pooled, p["s.conv.weight"].data, p["s.conv.bias"].data)
    assert np.max(np.abs(y.data - x * attn)) < 1e-6


# ---------------------------------------------------------------------------
# LKA


def lka_unit_attention(p, c):
    # delta depthwise stages pass features through; the pointwise stage then
    # outputs a constant 1 so the gating multiplies by unit attention
    p["l.dw5.weight"].data[...] = delta_kernel(c, 5)
    p["l.dw5.bias"].data[...] = 0.0
    p["l.dw7.weight"].data[...] = delta_kernel(c, 7)
    p["l.dw7.bias"].data[...] = 0.0
    p["l.pw.weight"].data[...] = 0.0
    p["l.pw.bias"].data[...] = 1.0


def test_lka_unit_attention_is_identity():
    rng = RNG(6)
    c = 3
    p = {}
    bl.build_lka(p, rng, "l", c)
    lka_unit_attention(p, c)
    x = rand_t(rng, (1, c, 9, 9))
    y = bl.lka_forward(x, bl.sub_params(p, "l"))
    assert np.allclose(y.data, x.data)


def test_lka_impulse_support_radius():
    # 5x5 span 5 plus dilated 7x7 span 19: half-width (5-1)/2 + (19-1)/2 = 11
    rng = RNG(7)
    c = 1
    p = {}
    bl.build_lka(p, rng, "l", c)
    p["l.dw5.weight"].data[...] = 1.0
    p["l.dw5.bias"].data[...] = 0.0
    p["l.dw7.weight"].data[...] = 1.0
    p["l.dw7.bias"].data[...] = 0.0
    p["l.pw.weight"].data[...] = 1.0
    p["l.pw.bias"].data[...] = 0.0
    size = 31
    mid = size // 2
    x = np.zeros((1, c, size, size))
    x[0, 0, mid, mid] = 1.0
    ones = Tensor(np.ones_like(x))
    attn_path = bl.lka_forward(Tensor(x), bl.sub_params(p, "l"))
    # gate the all-ones input instead to read the attention map directly
    a = en.conv2d(Tensor(x), p["l.dw5.weight"], p["l.dw5.bias"], en.same_conv(c, c, (5, 5), groups=c))
    a = en.conv2d(a, p["l.dw7.weight"], p["l.dw7.bias"], en.same_conv(c, c, (7, 7), dilation=(3, 3), groups=c))
    nz = np.argwhere(a.data[0, 0] != 0)
    radius = max(max(abs(r - mid), abs(cc - mid)) for r, cc in nz)
    assert radius == 11
    assert attn_path.shape == (1, c, size, size)
    assert ones.shape == x.shape


def test_lka_matches_composed_conv_oracles():
    rng = RNG(8)
    c = 3
    x = rng.standard_normal((1, c, 10, 10))
    p = {}
    bl.build_lka(p, rng, "l", c)
    y = bl.lka_forward(Tensor(x), bl.sub_params(p, "l"))
    a = conv2d_oracle(x, p["l.dw5.weight"].data, p["l.dw5.bias"].data,
                      groups=c, padding=(2, 2))
    a = conv2d_oracle(a, p["l.dw7.weight"].data, p["l.dw7.bias"].data,
                      groups=c, dilation=(3, 3), padding=(9, 9))
    a = conv2d_oracle(a, p["l.pw.weight"].data, p["l.pw.bias"].data)
    assert np.max(np.abs(y.data - x * a)) < 1e-6


# ---------------------------------------------------------------------------
# DAM


def test_dam_zeroed_lka_reduces_to_sca():
    rng = RNG(9)
    c = 4
    p = {}
    bl.build_dam(p, rng, "d", c)
    # zero LKA's pointwise stage so that branch contributes nothing
    p["d.lka.pw.weight"].data[...] = 0.0
    p["d.lka.pw.bias"].data[...] = 0.0
    # fusing conv = identity
    p["d.fuse.weight"].data[...] = np.eye(c).reshape(c, c, 1, 1)
    p["d.fuse.bias"].data[...] = 0.0
    x = rand_t(rng, (1, c, 6, 6))
    y = bl.dam_forward(x, bl.sub_params(p, "d"))
    sca = bl.sca_forward(x, bl.sub_params(p, "d.sca"))
    assert np.allclose(y.data, sca.data)


def test_dam_both_branches_zero_gives_bias():
    rng = RNG(10)
    c = 4
    p = {}
    bl.build_dam(p, rng, "d", c)
    p["d.lka.pw.weight"].data[...] = 0.0
    p["d.lka.pw.bias"].data[...] = 0.0
    p["d.sca.conv.weight"].data[...] = 0.0
    p["d.sca.conv.bias"].data[...] = 0.0
    x = rand_t(rng, (1, c, 5, 5))
    y = bl.dam_forward(x, bl.sub_params(p, "d"))
    assert np.allclose(y.data, np.broadcast_to(p["d.fuse.bias"].data, y.shape))


def test_dam_composition_of_verified_subops():
    rng = RNG(11)
    c = 4
    p = {}
    bl.build_dam(p, rng, "d", c)
    x = rand_t(rng, (2, c, 6, 6))
    y = bl.dam_forward(x, bl.sub_params(p, "d"))
    sca = bl.sca_forward(x, bl.sub_params(p, "d.sca"))
    lka = bl.lka_forward(x, bl.sub_params(p, "d.lka"))
    fused = en.conv2d(en.add(sca, lka), p["d.fuse.weight"], p["d.fuse.bias"],
                      en.ConvSpec(c, c, kernel=(1, 1)))
    assert np.max(np.abs(y.data - fused.data)) < 1e-12


# ---------------------------------------------------------------------------
# MSDAB / MSLKB / NAFBlock: identity and shape laws


def test_msdab_zeroed_projections_is_identity():
    rng = RNG(12)
    c = 8
    p = {}
    bl.build_msdab(p, rng, "b", c, DILATIONS)
    bl.zero_final_projections(p)
    x = rand_t(rng, (1, c, 11, 13))
    y = bl.msdab_forward(x, bl.sub_params(p, "b"), DILATIONS)
    assert np.array_equal(y.data, x.data)


@pytest.mark.parametrize("hw", [(8, 8), (9, 7), (16, 5)])
def test_msdab_shape_preservation(hw):
    rng = RNG(13)
    c = 4
    p = {}
    bl.build_msdab(p, rng, "b", c, DILATIONS)
    x = rand_t(rng, (2, c, *hw))
    y = bl.msdab_forward(x, bl.sub_params(p, "b"), DILATIONS)
    assert y.shape == x.shape


def test_msdab_gradient_fd():
    rng = RNG(14)
    c = 8
    p = {}
    bl.build_msdab(p, rng, "b", c, DILATIONS)
    x = Tensor(rng.standard_normal((1, c, 8, 8)), requires_grad=True)
    m = rng.standard_normal(x.shape)
    sub = bl.sub_params(p, "b")

    def scalar():
        return float((bl.msdab_forward(x, sub, DILATIONS).data * m).mean())

    tape = Tape()
    out = bl.msdab_forward(x, sub, DILATIONS, tape)
    loss = en.mean_all(en.mul(out, Tensor(m), tape), tape)
    en.backward(loss, tape)
    leaves = {"input": x, **p}
    for name, leaf in leaves.items():
        grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        idxs = rng.choice(leaf.numel(), size=min(4, leaf.numel()), replace=False)
        fd = finite_diff(scalar, leaf.data, idxs)
        for idx, g in fd.items():
            assert rel_err(g, grad.flat[idx]) < 1e-4, name


def test_mscm_k1_degenerates_to_pointwise_sum():
    rng = RNG(15)
    c = 4
    p = {}
    bl.build_mscm(p, rng, "m", c, 1)
    x = rand_t(rng, (1, c, 6, 6))
    y = bl.mscm_forward(x, bl.sub_params(p, "m"), 1)
    scale = np.zeros((1, c, 1, 1))
    for name in ("kk", "k1", "ik", "pp"):
        scale += p[f"m.{name}.weight"].data.reshape(1, c, 1, 1)
    sca = bl.sca_forward(x, bl.sub_params(p, "m.sca"))
    assert np.max(np.abs(y.data - (scale * x.data + sca.data))) < 1e-12


def test_mscm_delta_kernels_no_sca():
    rng = RNG(16)
    c = 4
    k = 5
    p = {}
    bl.build_mscm(p, rng, "m", c, k)
    p["m.kk.weight"].data[...] = delta_kernel(c, k)
    w_k1 = np.zeros((c, 1, k, 1)); w_k1[:, 0, k // 2, 0] = 1.0
    w_1k = np.zeros((c, 1, 1, k)); w_1k[:, 0, 0, k // 2] = 1.0
    p["m.k1.weight"].data[...] = w_k1
    p["m.ik.weight"].data[...] = w_1k
    p["m.pp.weight"].data[...] = 1.0
    p["m.sca.conv.weight"].data[...] = 0.0
    p["m.sca.conv.bias"].data[...] = 0.0
    x = rand_t(rng, (1, c, 9, 9))
    y = bl.mscm_forward(x, bl.sub_params(p, "m"), k)
    assert np.allclose(y.data, 4.0 * x.data)


def test_mscm_k5_matches_per_branch_oracles():
    rng = RNG(17)
    c = 3
    k = 5
    x = rng.standard_normal((1, c, 9, 9))
    p = {}
    bl.build_mscm(p, rng, "m", c, k)
    y = bl.mscm_forward(Tensor(x), bl.sub_params(p, "m"), k)
    ref = conv2d_oracle(x, p["m.kk.weight"].data, groups=c, padding=(2, 2))
    ref += conv2d_oracle(x, p["m.k1.weight"].data, groups=c, padding=(2, 0))
    ref += conv2d_oracle(x, p["m.ik.weight"].data, groups=c, padding=(0, 2))
    ref += conv2d_oracle(x, p["m.pp.weight"].data, groups=c, padding=(0, 0))
    pooled = global_pool_oracle(x)
    attn = conv2d_oracle(pooled, p["m.sca.conv.weight"].data, p["m.sca.conv.bias"].data)
    ref += x * attn
    assert np.max(np.abs(y.data - ref)) < 1e-6


def test_mscm_rejects_even_k():
    rng = RNG(18)
    with pytest.raises(ValueError):
        bl.build_mscm({}, rng, "m", 4, 4)
    p = {}
    bl.build_mscm(p, rng, "m", 4, 3)
    with pytest.raises(ValueError):
        bl.mscm_forward(rand_t(rng, (1, 4, 6, 6)), bl.sub_params(p, "m"), 4)


def test_mslkb_zeroed_projections_is_identity():
    rng = RNG(19)
    c = 6
    p = {}
    bl.build_mslkb(p, rng, "b", c, 7)
    bl.zero_final_projections(p)
    x = rand_t(rng, (1, c, 12, 12))
    y = bl.mslkb_forward(x, bl.sub_params(p, "b"), 7)
    assert np.array_equal(y.data, x.data)


def test_mslkb_k23_shape_on_24x24():
    rng = RNG(20)
    c = 4
    p = {}
    bl.build_mslkb(p, rng, "b", c, 23)
    x = rand_t(rng, (1, c, 24, 24))
    y = bl.mslkb_forward(x, bl.sub_params(p, "b"), 23)
    assert y.shape == x.shape


def test_mslkb_gradient_fd():
    rng = RNG(21)
    c = 4
    p = {}
    bl.build_mslkb(p, rng, "b", c, 7)
    x = Tensor(rng.standard_normal((1, c, 12, 12)), requires_grad=True)
    m = rng.standard_normal(x.shape)
    sub = bl.sub_params(p, "b")

    def scalar():
        return float((bl.mslkb_forward(x, sub, 7).data * m).mean())

    tape = Tape()
    loss = en.mean_all(en.mul(bl.mslkb_forward(x, sub, 7, tape), Tensor(m), tape), tape)
    en.backward(loss, tape)
    for name, leaf in {"input": x, **p}.items():
        grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        idxs = rng.choice(leaf.numel(), size=min(3, leaf.numel()), replace=False)
        fd = finite_diff(scalar, leaf.data, idxs)
        for idx, g in fd.items():
            assert rel_err(g, grad.flat[idx]) < 1e-4, name


def test_nafblock_identity_and_shape():
    rng = RNG(22)
    c = 6
    p = {}
    bl.build_nafblock(p, rng, "n", c)
    bl.zero_final_projections(p)
    x = rand_t(rng, (2, c, 9, 5))
    y = bl.nafblock_forward(x, bl.sub_params(p, "n"))
    assert np.array_equal(y.data, x.data)


def test_nafblock_gradient_fd():
    rng = RNG(23)
    c = 4
    p = {}
    bl.build_nafblock(p, rng, "n", c)
    x = Tensor(rng.standard_normal((1, c, 7, 7)), requires_grad=True)
    m = rng.standard_normal(x.shape)
    sub = bl.sub_params(p, "n")

    def scalar():
        return float((bl.nafblock_forward(x, sub).data * m).mean())

    tape = Tape()
    loss = en.mean_all(en.mul(bl.nafblock_forward(x, sub, tape), Tensor(m), tape), tape)
    en.backward(loss, tape)
    for name, leaf in {"input": x, **p}.items():
        grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        idxs = rng.choice(leaf.numel(), size=min(4, leaf.numel()), replace=False)
        fd = finite_diff(scalar, leaf.data, idxs)
        for idx, g in fd.items():
            assert rel_err(g, grad.flat[idx]) < 1e-4, name


# ---------------------------------------------------------------------------
# FFSC


def make_ffsc_inputs(rng, base, hs, constant=None):
    feats = []
    for k in range(1, 5):
        shape = (1, base * 2 ** k, hs // 2 ** k, hs // 2 ** k)
        if constant is None:
            feats.append(rand_t(rng, shape))
        else:
            feats.append(Tensor(np.full(shape, constant[k - 1])))
    return feats


def test_ffsc_same_level_input_passes_unresized():
    rng = RNG(24)
    base = 2
    feats = make_ffsc_inputs(rng, base, 16)
    level = 2
    p = {}
    bl.build_ffsc(p, rng, "f", base, level)
    th = 16 // 2 ** level
    resized = [en.bilinear_resize(f, th, th) for f in feats]
    assert resized[level - 1] is feats[level - 1]


@pytest.mark.parametrize("level", [1, 2, 3, 4])
def test_ffsc_output_shape_law(level):
    rng = RNG(25)
    base = 2
    feats = make_ffsc_inputs(rng, base, 16)
    p = {}
    bl.build_ffsc(p, rng, "f", base, level)
    y = bl.ffsc_fuse(feats, level, bl.sub_params(p, "f"), base)
    assert y.shape == (1, base * 2 ** level, 16 // 2 ** level, 16 // 2 ** level)


def test_ffsc_constant_propagation_and_affine_map():
    rng = RNG(26)
    base = 2
    consts = (0.3, -0.7, 1.1, 0.05)
    feats = make_ffsc_inputs(rng, base, 16, constant=consts)
    level = 3
    p = {}
    bl.build_ffsc(p, rng, "f", base, level)
    th = 16 // 2 ** level
    resized = [en.bilinear_resize(f, th, th) for f in feats]
    cat = en.concat_channels(resized)
    # bilinear of a constant is that constant
    start = 0
    for k, v in enumerate(consts, start=1):
        cc = base * 2 ** k
        assert np.max(np.abs(cat.data[:, start:start + cc] - v)) < 1e-15
        start += cc
    # the projection of a constant map is verified against the conv oracle
    proj = en.conv2d(cat, p["f.proj.weight"], p["f.proj.bias"],
                     en.ConvSpec(30 * base, base * 2 ** level, kernel=(1, 1)))
    ref = conv2d_oracle(cat.data, p["f.proj.weight"].data, p["f.proj.bias"].data)
    assert np.max(np.abs(proj.data - ref)) < 1e-6


def test_ffsc_wrong_channel_count_rejected():
    rng = RNG(27)
    base = 2
    feats = make_ffsc_inputs(rng, base, 16)
    feats[2] = rand_t(rng, (1, 99, 2, 2))
    p = {}
    bl.build_ffsc(p, rng, "f", base, 1)
    with pytest.raises(ValueError):
        bl.ffsc_fuse(feats, 1, bl.sub_params(p, "f"), base)


def test_blocks_are_pure_given_input_and_params():
    rng = RNG(28)
    c = 4
    p = {}
    bl.build_msdab(p, rng, "b", c, DILATIONS)
    x = rand_t(rng, (1, c, 8, 8))
    x_before = x.data.copy()
    y1 = bl.msdab_forward(x, bl.sub_params(p, "b"), DILATIONS)
    y2 = bl.msdab_forward(x, bl.sub_params(p, "b"), DILATIONS)
    assert np.array_equal(x.data, x_before)
    assert np.array_equal(y1.data, y2.data)
