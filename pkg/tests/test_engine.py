import numpy as np
import pytest

from mznet import engine as en
from mznet.engine import ConvSpec, GradError, ShapeError, Tape, Tensor, same_conv

from oracles import (conv2d_oracle, finite_diff, global_pool_oracle,
                     local_pool_oracle, rel_err, resize_oracle)

RNG = np.random.default_rng


def t(arr, grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------------------
# conv2d


def test_conv_all_ones_counting():
    x = t(np.ones((1, 1, 3, 3)))
    w = t(np.ones((1, 1, 3, 3)))
    y = en.conv2d(x, w, None, same_conv(1, 1, (3, 3), groups=1, has_bias=False))
    assert y.data[0, 0, 1, 1] == 9.0
    for corner in ((0, 0), (0, 2), (2, 0), (2, 2)):
        assert y.data[0, 0, corner[0], corner[1]] == 4.0


@pytest.mark.parametrize("d", [1, 4, 7, 9])
def test_conv_dilation_impulse_support(d):
    # single impulse through a dilated all-ones 3x3 depthwise kernel lands
    # nonzeros exactly at offsets {0, +-d} per axis (span 2d+1)
    size = 2 * d + 5
    x = np.zeros((1, 1, size, size))
    mid = size // 2
    x[0, 0, mid, mid] = 1.0
    w = t(np.ones((1, 1, 3, 3)))
    spec = same_conv(1, 1, (3, 3), dilation=(d, d), groups=1, has_bias=False)
    y = en.conv2d(t(x), w, None, spec)
    nz = np.argwhere(y.data[0, 0] != 0)
    offsets = sorted({(int(r - mid), int(c - mid)) for r, c in nz})
    expected = sorted({(a, b) for a in (-d, 0, d) for b in (-d, 0, d)})
    assert offsets == expected


def test_conv_grouped_matches_oracle():
    rng = RNG(7)
    x = rng.standard_normal((2, 4, 9, 9))
    w = rng.standard_normal((6, 2, 3, 3))
    b = rng.standard_normal((1, 6, 1, 1))
    spec = ConvSpec(4, 6, kernel=(3, 3), groups=2, padding=(1, 1))
    y = en.conv2d(t(x), t(w), t(b), spec)
    ref = conv2d_oracle(x, w, b, groups=2, padding=(1, 1))
    assert np.max(np.abs(y.data - ref)) < 1e-6


@pytest.mark.parametrize("case", [
    dict(ci=3, co=5, k=(3, 3), stride=(2, 2), dilation=(1, 1), groups=1, pad=(1, 1)),
    dict(ci=4, co=4, k=(3, 3), stride=(1, 1), dilation=(4, 4), groups=4, pad=(4, 4)),
    dict(ci=4, co=4, k=(5, 1), stride=(1, 1), dilation=(1, 1), groups=4, pad=(2, 0)),
    dict(ci=4, co=4, k=(1, 5), stride=(1, 1), dilation=(1, 1), groups=4, pad=(0, 2)),
    dict(ci=6, co=2, k=(2, 2), stride=(2, 2), dilation=(1, 1), groups=2, pad=(0, 0)),
    dict(ci=2, co=2, k=(7, 7), stride=(1, 1), dilation=(3, 3), groups=2, pad=(9, 9)),
    dict(ci=3, co=8, k=(1, 1), stride=(1, 1), dilation=(1, 1), groups=1, pad=(0, 0)),
])
def test_conv_shapes_match_oracle(case):
    rng = RNG(11)
    x = rng.standard_normal((2, case["ci"], 12, 10))
    cig = case["ci"] // case["groups"]
    w = rng.standard_normal((case["co"], cig, *case["k"]))
    b = rng.standard_normal((1, case["co"], 1, 1))
    spec = ConvSpec(case["ci"], case["co"], kernel=case["k"], stride=case["stride"],
                    dilation=case["dilation"], groups=case["groups"], padding=case["pad"])
    y = en.conv2d(t(x), t(w), t(b), spec)
    ref = conv2d_oracle(x, w, b, stride=case["stride"], dilation=case["dilation"],
                        groups=case["groups"], padding=case["pad"])
    assert y.data.shape == ref.shape
    assert np.max(np.abs(y.data - ref)) < 1e-6


def test_conv_linearity():
    rng = RNG(3)
    x = rng.standard_normal((1, 4, 8, 8))
    y = rng.standard_normal((1, 4, 8, 8))
    w = rng.standard_normal((4, 1, 3, 3))
    spec = same_conv(4, 4, (3, 3), groups=4, has_bias=False)
    a, b = 1.7, -0.4

    def conv(v):
        return en.conv2d(t(v), t(w), None, spec).data

    lhs = conv(a * x + b * y)
    rhs = a * conv(x) + b * conv(y)
    assert np.max(np.abs(lhs - rhs)) < 1e-6


def test_conv_determinism():
    rng = RNG(5)
    x = rng.standard_normal((2, 8, 16, 16))
    w = rng.standard_normal((8, 1, 5, 5))
    spec = same_conv(8, 8, (5, 5), groups=8, has_bias=False)
    y1 = en.conv2d(t(x), t(w), None, spec).data
    y2 = en.conv2d(t(x), t(w), None, spec).data
    assert np.array_equal(y1, y2)


def test_conv_errors():
    x = t(np.zeros((1, 4, 8, 8)))
    w = t(np.zeros((4, 1, 3, 3)))
    with pytest.raises(ShapeError):
        en.conv2d(x, w, None, same_conv(6, 4, (3, 3), groups=1, has_bias=False))
    with pytest.raises(ShapeError):
        ConvSpec(4, 6, kernel=(3, 3), groups=4)  # 6 not divisible by 4
    with pytest.raises(ShapeError):
        en.conv2d(x, w, None, same_conv(4, 4, (3, 3), groups=4))  # bias missing


def test_conv_gradients_against_fd():
    rng = RNG(13)
    for spec, shape in [
        (same_conv(4, 4, (3, 3), dilation=(2, 2), groups=4), (1, 4, 6, 6)),
        (ConvSpec(4, 6, kernel=(3, 3), groups=2, padding=(1, 1), stride=(2, 2)), (2, 4, 7, 7)),
        (ConvSpec(3, 5, kernel=(1, 1)), (1, 3, 5, 5)),
    ]:
        x = Tensor(rng.standard_normal(shape), requires_grad=True)
        w = Tensor(rng.standard_normal(spec.weight_shape()), requires_grad=True)
        b = Tensor(rng.standard_normal((1, spec.out_channels, 1, 1)), requires_grad=True)
        m = rng.standard_normal(en.conv2d(x, w, b, spec).shape)

        def scalar():
            return float((en.conv2d(x, w, b, spec).data * m).mean())

        tape = Tape()
        loss = en.mean_all(en.mul(en.conv2d(x, w, b, spec, tape), Tensor(m), tape), tape)
        en.backward(loss, tape)
        for leaf in (x, w, b):
            idxs = rng.choice(leaf.numel(), size=min(8, leaf.numel()), replace=False)
            fd = finite_diff(scalar, leaf.data, idxs)
            for idx, g in fd.items():
                assert rel_err(g, leaf.grad.flat[idx]) < 1e-4


# ---------------------------------------------------------------------------
# pixel shuffle / unshuffle


def test_unshuffle_defining_permutation():
    x = t(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    y = en.pixel_unshuffle(x, 2)
    assert y.shape == (1, 4, 1, 1)
    assert list(y.data.reshape(4)) == [1.0, 2.0, 3.0, 4.0]
    back = en.pixel_shuffle(y, 2)
    assert np.array_equal(back.data, x.data)


def test_shuffle_roundtrip_random():
    rng = RNG(2)
    x = t(rng.standard_normal((2, 3, 8, 12)))
    y = en.pixel_shuffle(en.pixel_unshuffle(x, 2), 2)
    assert np.array_equal(y.data, x.data)
    z = en.pixel_unshuffle(en.pixel_shuffle(t(rng.standard_normal((1, 36, 4, 5))), 3), 3)
    assert z.shape == (1, 36, 4, 5)


def test_shuffle_shape_law():
    x = t(np.zeros((2, 8, 6, 10)))
    assert en.pixel_shuffle(x, 2).shape == (2, 2, 12, 20)
    assert en.pixel_unshuffle(t(np.zeros((1, 1, 768, 768))), 2).shape == (1, 4, 384, 384)


def test_shuffle_errors():
    with pytest.raises(ShapeError):
        en.pixel_unshuffle(t(np.zeros((1, 1, 3, 4))), 2)
    with pytest.raises(ShapeError):
        en.pixel_shuffle(t(np.zeros((1, 3, 4, 4))), 2)


# ---------------------------------------------------------------------------
# bilinear resize


def test_resize_identity_is_same_tensor():
    x = t(np.random.default_rng(0).standard_normal((1, 2, 5, 7)))
    assert en.bilinear_resize(x, 5, 7) is x


def test_resize_hand_computed_upsample():
    # frozen from the half-pixel sampling formula, confirmed by the oracle
    x = t(np.array([0.0, 1.0]).reshape(1, 1, 1, 2))
    y = en.bilinear_resize(x, 1, 4)
    expected = np.array([0.0, 0.25, 0.75, 1.0])
    assert np.allclose(y.data.reshape(4), expected, atol=1e-15)
    ref = resize_oracle(x.data, 1, 4)
    assert np.allclose(ref.reshape(4), expected, atol=1e-15)


def test_resize_constant_stays_constant():
    x = t(np.full((1, 3, 5, 5), 0.37))
    for (oh, ow) in ((3, 9), (11, 2), (7, 7)):
        y = en.bilinear_resize(x, oh, ow)
        assert np.max(np.abs(y.data - 0.37)) < 1e-15


def test_resize_matches_oracle_random():
    rng = RNG(4)
    x = rng.standard_normal((2, 3, 6, 9))
    for (oh, ow) in ((3, 5), (12, 18), (6, 4)):
        y = en.bilinear_resize(t(x), oh, ow)
        assert np.max(np.abs(y.data - resize_oracle(x, oh, ow))) < 1e-12


def test_resize_gradient_fd():
    rng = RNG(6)
    x = Tensor(rng.standard_normal((1, 2, 4, 6)), requires_grad=True)
    m = rng.standard_normal((1, 2, 7, 3))

    def scalar():
        return float((en.bilinear_resize(x, 7, 3).data * m).mean())

    tape = Tape()
    loss = en.mean_all(en.mul(en.bilinear_resize(x, 7, 3, tape), Tensor(m), tape), tape)
    en.backward(loss, tape)
    fd = finite_diff(scalar, x.data, range(x.numel()))
    for idx, g in fd.items():
        assert rel_err(g, x.grad.flat[idx]) < 1e-4


# ---------------------------------------------------------------------------
# layer norm


def test_layer_norm_two_channel():
    x = t(np.array([1.0, 3.0]).reshape(1, 2, 1, 1))
    gamma = t(np.ones((1, 2, 1, 1)))
    beta = t(np.zeros((1, 2, 1, 1)))
    y = en.layer_norm(x, gamma, beta, eps=0.0)
    assert np.allclose(y.data.reshape(2), [-1.0, 1.0])


def test_layer_norm_constant_channels_gives_beta():
    x = t(np.full((2, 3, 4, 4), 0.8))
    gamma = t(np.full((1, 3, 1, 1), 2.0))
    beta = t(np.arange(3.0).reshape(1, 3, 1, 1))
    y = en.layer_norm(x, gamma, beta)
    assert np.allclose(y.data, np.broadcast_to(beta.data, y.shape), atol=1e-9)


def test_layer_norm_gradient_fd():
    rng = RNG(8)
    x = Tensor(rng.standard_normal((2, 4, 3, 3)), requires_grad=True)
    gamma = Tensor(rng.standard_normal((1, 4, 1, 1)), requires_grad=True)
    beta = Tensor(rng.standard_normal((1, 4, 1, 1)), requires_grad=True)
    m = rng.standard_normal(x.shape)

    def scalar():
        return float((en.layer_norm(x, gamma, beta).data * m).mean())

    tape = Tape()
    loss = en.mean_all(en.mul(en.layer_norm(x, gamma, beta, tape=tape), Tensor(m), tape), tape)
    en.backward(loss, tape)
    for leaf in (x, gamma, beta):
        fd = finite_diff(scalar, leaf.data, range(min(leaf.numel(), 20)))
        for idx, g in fd.items():
            assert rel_err(g, leaf.grad.flat[idx]) < 1e-4


# ---------------------------------------------------------------------------
# pooling


def test_global_pool_values():
    x = t(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    assert en.global_avg_pool(x).data.reshape(()) == 2.5
    const = t(np.full((2, 3, 5, 5), 0.4))
    assert np.allclose(en.global_avg_pool(const).data, 0.4)


def test_global_pool_matches_loop_oracle():
    rng = RNG(9)
    x = rng.standard_normal((2, 3, 6, 5))
    y = en.global_avg_pool(t(x))
    assert np.max(np.abs(y.data - global_pool_oracle(x))) < 1e-12


@pytest.mark.parametrize("window", [1, 3, 5, 9])
def test_local_pool_matches_loop_oracle(window):
    rng = RNG(10)
    x = rng.standard_normal((1, 2, 7, 6))
    y = en.local_avg_pool(t(x), window)
    assert np.max(np.abs(y.data - local_pool_oracle(x, window))) < 1e-10


def test_local_pool_gradient_fd():
    rng = RNG(12)
    x = Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True)
    m = rng.standard_normal(x.shape)

    def scalar():
        return float((en.local_avg_pool(x, 3).data * m).mean())

    tape = Tape()
    loss = en.mean_all(en.mul(en.local_avg_pool(x, 3, tape), Tensor(m), tape), tape)
    en.backward(loss, tape)
    fd = finite_diff(scalar, x.data, range(x.numel()))
    for idx, g in fd.items():
        assert rel_err(g, x.grad.flat[idx]) < 1e-4


# ---------------------------------------------------------------------------
# simple gate


def test_simple_gate_values():
    x = t(np.array([2.0, 3.0]).reshape(1, 2, 1, 1))
    assert en.simple_gate(x).data.reshape(()) == 6.0
    rng = RNG(1)
    v = rng.standard_normal((1, 3, 4, 4))
    ones_then_v = np.concatenate([np.ones_like(v), v], axis=1)
    assert np.array_equal(en.simple_gate(t(ones_then_v)).data, v)
    with pytest.raises(ShapeError):
        en.simple_gate(t(np.zeros((1, 3, 2, 2))))


def test_simple_gate_gradient_fd():
    rng = RNG(14)
    x = Tensor(rng.standard_normal((1, 4, 3, 3)), requires_grad=True)
    m = rng.standard_normal((1, 2, 3, 3))

    def scalar():
        return float((en.simple_gate(x).data * m).mean())

    tape = Tape()
    loss = en.mean_all(en.mul(en.simple_gate(x, tape), Tensor(m), tape), tape)
    en.backward(loss, tape)
    fd = finite_diff(scalar, x.data, range(x.numel()))
    for idx, g in fd.items():
        assert rel_err(g, x.grad.flat[idx]) < 1e-4


# ---------------------------------------------------------------------------
# tape / backward


def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((1, 2, 3, 3)), requires_grad=True)
    tape = Tape()
    loss = en.mean_all(x, tape)
    en.backward(loss, tape)
    assert np.allclose(x.grad, np.full_like(x.data, 1.0 / x.numel()))


def test_backward_quadratic():
    x = Tensor(np.random.default_rng(1).standard_normal((1, 1, 2, 2)), requires_grad=True)
    tape = Tape()
    half = en.scale(en.mean_all(en.mul(x, x, tape), tape), 0.5, tape)
    en.backward(half, tape)
    assert np.allclose(x.grad, x.data / x.numel())


def test_backward_accumulates_additively():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    tape = Tape()
    loss = en.mean_all(x, tape)
    en.backward(loss, tape)
    first = x.grad.copy()
    en.backward(loss, tape)
    assert np.allclose(x.grad, 2 * first)


def test_backward_rejects_nonscalar_and_offtape():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    tape = Tape()
    y = en.mul(x, x, tape)
    with pytest.raises(GradError):
        en.backward(y, tape)
    loss = Tensor(np.ones((1, 1, 1, 1)))
    with pytest.raises(GradError):
        en.backward(loss, tape)


def test_shared_input_fan_out():
    x = Tensor(np.full((1, 1, 1, 1), 3.0), requires_grad=True)
    tape = Tape()
    # loss = x*x + x -> d/dx = 2x + 1 = 7
    loss = en.add(en.mul(x, x, tape), x, tape)
    loss = en.mean_all(loss, tape)
    en.backward(loss, tape)
    assert np.allclose(x.grad, 7.0)


def test_float32_forward_supported():
    x = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
    w = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
    y = en.conv2d(x, w, None, same_conv(1, 1, (3, 3), groups=1, has_bias=False))
    assert y.dtype == np.float32
    assert y.data[0, 0, 1, 1] == 9.0


# ---------------------------------------------------------------------------
# pad / crop round trips


def test_reflect_pad_then_crop_roundtrip():
    rng = RNG(15)
    x = t(rng.standard_normal((1, 3, 6, 7)))
    padded = en.reflect_pad(x, (2, 3, 1, 4))
    assert padded.shape == (1, 3, 11, 12)
    back = en.crop(padded, 2, 1, 6, 7)
    assert np.array_equal(back.data, x.data)


def test_reflect_pad_gradient_fd():
    rng = RNG(16)
    x = Tensor(rng.standard_normal((1, 1, 4, 4)), requires_grad=True)
    m = rng.standard_normal((1, 1, 7, 6))

    def scalar():
        return float((en.reflect_pad(x, (2, 1, 1, 1)).data * m).mean())

    tape = Tape()
    loss = en.mean_all(en.mul(en.reflect_pad(x, (2, 1, 1, 1), tape), Tensor(m), tape), tape)
    en.backward(loss, tape)
    fd = finite_diff(scalar, x.data, range(x.numel()))
    for idx, g in fd.items():
        assert rel_err(g, x.grad.flat[idx]) < 1e-4


def test_mac_counting_context():
    x = t(np.zeros((1, 3, 8, 8)))
    w = t(np.zeros((5, 3, 3, 3)))
    b = t(np.zeros((1, 5, 1, 1)))
    with en.counting_macs() as counter:
        en.conv2d(x, w, b, same_conv(3, 5, (3, 3)))
    assert counter.total == 8 * 8 * 5 * 3 * 9
    with en.counting_macs() as counter:
        en.bilinear_resize(x, 8, 8)  # identity: free
        en.bilinear_resize(x, 4, 4)
    assert counter.total == 4 * (3 * 4 * 4)
