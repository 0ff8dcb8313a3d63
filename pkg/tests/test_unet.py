import numpy as np
import pytest

from suturenet import tensorcore as tc
from suturenet import trainer, unet
from helpers import max_rel_error, numerical_grad


def hand_count(depth, base, cin, cout):
    """Per-layer closed-form trainable parameter count, written independently of the builder."""
    def conv3(i, o):
        return 9 * i * o + o

    def bn(c):
        return 2 * c

    total, c, widths = 0, cin, []
    for level in range(depth):
        f = base * 2 ** level
        total += conv3(c, f) + bn(f) + conv3(f, f) + bn(f)
        widths.append(f)
        c = f
    f = base * 2 ** depth
    total += conv3(c, f) + bn(f) + conv3(f, f) + bn(f)
    c = f
    for level in reversed(range(depth)):
        f = widths[level]
        total += conv3(c + f, f) + bn(f) + conv3(f, f) + bn(f)
        c = f
    return total + c * cout + cout


def test_default_param_count():
    model = unet.build(unet.UNetConfig(), 0)
    assert hand_count(4, 16, 3, 2) == 1_965_586
    assert unet.param_count(model) == 1_965_586


def test_toy_param_count_by_hand():
    # depth 1, base 1, in 1, out 1:
    # enc 1->1: (9+1)+2, 1->1: (9+1)+2   = 24
    # bottleneck 1->2: (18+2)+4, 2->2: (36+2)+4 = 66
    # dec (2+1)->1: (27+1)+2, 1->1: (9+1)+2 = 42
    # head 1x1 1->1: 1+1 = 2
    cfg = unet.UNetConfig(depth=1, base_filters=1, in_channels=1, out_channels=1, input_width=4, input_height=4)
    assert unet.param_count(unet.build(cfg, 0)) == 24 + 66 + 42 + 2


def test_param_scaling_with_base_filters():
    def conv_weights(base):
        m = unet.build(unet.UNetConfig(depth=2, base_filters=base, input_width=16, input_height=16), 0)
        return sum(t.data.size for k, t in m.params.items() if k.endswith("conv.weight"))

    ratio = conv_weights(16) / conv_weights(8)
    assert abs(ratio - 4.0) / 4.0 < 0.05


def test_structure_toy_config():
    m = unet.build(unet.UNetConfig(depth=1, base_filters=4, input_width=8, input_height=8), 0)
    convs = [k for k in m.params if k.endswith("conv.weight")]
    assert sum(k.startswith("enc") for k in convs) == 2
    assert sum(k.startswith("bottleneck") for k in convs) == 2
    assert sum(k.startswith("dec") for k in convs) == 2
    assert "head.weight" in m.params and m.params["head.weight"].shape[2:] == (1, 1)


def test_default_config_shapes_and_schedule():
    cfg = unet.UNetConfig()
    assert cfg.bottleneck_filters == 256
    assert cfg.dropout_schedule[0] == pytest.approx(0.3) and cfg.dropout_schedule[-1] == pytest.approx(0.5)
    assert all(0.3 <= r <= 0.5 for r in cfg.dropout_schedule)
    assert (cfg.input_width, cfg.input_height) == (512, 288)


def test_default_forward_shape():
    m = unet.build(unet.UNetConfig(), 0)
    out = m.forward(np.random.default_rng(0).random((1, 3, 288, 512)), mode="infer")
    assert out.shape == (1, 2, 288, 512)
    assert ((out.data > 0) & (out.data < 1)).all()


def test_indivisible_input_rejected():
    with pytest.raises(ValueError, match="divisible by 2\\*\\*depth = 16"):
        unet.UNetConfig(input_width=500, input_height=288)


def test_wrong_input_size_rejected():
    m = unet.build(unet.UNetConfig(depth=1, base_filters=2, input_width=8, input_height=8), 0)
    with pytest.raises(tc.ShapeError):
        m.forward(np.zeros((1, 3, 8, 16)))


def test_build_is_deterministic():
    cfg = unet.UNetConfig(depth=2, base_filters=4, input_width=16, input_height=16)
    a, b = unet.build(cfg, 5), unet.build(cfg, 5)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


def test_infer_is_deterministic_and_train_is_stochastic():
    cfg = unet.UNetConfig(depth=2, base_filters=4, input_width=16, input_height=16)
    m = unet.build(cfg, 1)
    x = np.random.default_rng(2).random((2, 3, 16, 16))
    np.testing.assert_array_equal(m.forward(x, "infer").data, m.forward(x, "infer").data)
    t1 = m.forward(x, "train", np.random.default_rng(1)).data
    t2 = m.forward(x, "train", np.random.default_rng(2)).data
    assert not np.array_equal(t1, t2)


def test_untrained_output_not_saturated():
    cfg = unet.UNetConfig(depth=2, base_filters=4, input_width=32, input_height=32)
    for seed in range(10):
        m = unet.build(cfg, seed)
        x = np.random.default_rng(100 + seed).random((2, 3, 32, 32))
        # one train step populates running statistics close to the batch statistics
        m.forward(x, "train", np.random.default_rng(seed))
        fg = m.forward(x, "train", np.random.default_rng(seed)).data[:, 0]
        assert 0.05 < fg.mean() < 0.95


@pytest.mark.parametrize("hw", [(16, 32), (48, 16)])
def test_shape_preservation(hw):
    h, w = hw
    m = unet.build(unet.UNetConfig(depth=3, base_filters=2, input_width=w, input_height=h), 0)
    assert m.forward(np.zeros((1, 3, h, w))).shape == (1, 2, h, w)


def tiny_unet_gradcheck(seed):
    """Worst relative error of d(loss)/d(params and input) on the depth-1, base-2, 16x16 net."""
    rng = np.random.default_rng(seed)
    cfg = unet.UNetConfig(depth=1, base_filters=2, input_width=16, input_height=16)
    m = unet.build(cfg, rng)
    x = tc.Tensor(rng.random((2, 3, 16, 16)), requires_grad=True)
    target = rng.random((2, 2, 16, 16))

    def f_tensor():
        return trainer.loss(m.forward(x, "train", np.random.default_rng(seed)), target)

    m.zero_grad()
    x.grad = None
    f_tensor().backward()
    worst = 0.0
    for t in list(m.params.values()) + [x]:
        num = numerical_grad(lambda: f_tensor().item(), t.data)
        worst = max(worst, max_rel_error(t.grad, num))
    return worst


def test_end_to_end_gradcheck():
    assert tiny_unet_gradcheck(0) < 1e-3


def test_sgd_step_decreases_loss():
    cfg = unet.UNetConfig(depth=1, base_filters=4, input_width=16, input_height=16,
                          dropout_schedule=[0.3])
    decreased = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        m = unet.build(cfg, rng)
        x = rng.random((2, 3, 16, 16))
        target = np.zeros((2, 2, 16, 16))
        target[:, 0, 6:10, 6:10] = 1.0
        target[:, 1] = 1.0 - target[:, 0]

        def value():
            return trainer.loss(m.forward(x, "train", np.random.default_rng(1000 + seed)), target)

        before = value()
        m.zero_grad()
        before.backward()
        for p in m.params.values():
            p.data = p.data - 1e-3 * p.grad
        decreased += value().item() < before.item()
    assert decreased >= 19


def dropout_free_twin(m):
    cfg = unet.UNetConfig(**{**m.config.to_dict(), "dropout_schedule": [0.0] * m.config.depth})
    twin = unet.build(cfg, 0)
    twin.load_state_arrays(m.state_arrays())
    return twin


def test_recalibrated_infer_equals_dropout_free_batch_statistics():
    cfg = unet.UNetConfig(depth=2, base_filters=4, input_width=16, input_height=16)
    for seed in range(5):
        m = unet.build(cfg, seed)
        x = np.random.default_rng(seed).random((3, 3, 16, 16))
        twin = dropout_free_twin(m)
        m.recalibrate_batchnorm([x])
        np.testing.assert_allclose(m.forward(x, "infer").data, twin.forward(x, "train").data, atol=1e-10)


def test_recalibration_pools_exact_moments_across_batches():
    cfg = unet.UNetConfig(depth=1, base_filters=3, input_width=16, input_height=16)
    m = unet.build(cfg, 4)
    x = np.random.default_rng(9).random((5, 3, 16, 16))
    first = tc.conv2d(x, m.params["enc0.c1.conv.weight"], m.params["enc0.c1.conv.bias"]).data
    m.recalibrate_batchnorm([x[:2], x[2:3], x[3:]])
    rs = m.buffers["enc0.c1.bn"]
    np.testing.assert_allclose(rs.mean, first.mean(axis=(0, 2, 3)), atol=1e-12)
    np.testing.assert_allclose(rs.var, first.var(axis=(0, 2, 3)), atol=1e-12)


def test_recalibration_needs_a_batch_and_calibrate_is_not_a_public_mode():
    m = unet.build(unet.UNetConfig(depth=1, base_filters=2, input_width=16, input_height=16), 0)
    with pytest.raises(ValueError, match="at least one batch"):
        m.recalibrate_batchnorm([])
    with pytest.raises(ValueError, match="mode"):
        m.forward(np.zeros((1, 3, 16, 16)), "calibrate")
