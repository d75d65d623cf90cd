"""Model construction: module plumbing, attention blocks, config
validation, and the classifier families.

The channel attention case was recomputed by hand: descriptors [1, 2],
relu(1*0.5 + 2*(-0.25) + 0.1) = 0.1 through the bottleneck, scores
[0.3, -0.3], doubled by the shared path, squashed, then multiplied back
onto the feature maps.
"""

import math

import numpy as np
import pytest
from conftest import small_classifier, tiny_resnet_config

from advbench import ops
from advbench.autodiff import Tensor
from advbench.nn import (
    CBAM,
    BottleneckBlock,
    ChannelAttention,
    ModelConfig,
    Module,
    Sequential,
    SpatialAttention,
    build_model,
    predict,
)


def test_module_attribute_routing_and_errors():
    m = Module()
    m.w = Tensor(np.ones(2), requires_grad=True)
    m.child = Module()
    m.plain = 5
    assert dict(m.named_parameters()) == {"w": m.w}
    assert m.plain == 5
    with pytest.raises(AttributeError, match="has no attribute 'missing'"):
        m.missing


def test_named_parameters_nest_with_dot_prefixes():
    model = small_classifier(seed=1)
    names = [name for name, _ in model.named_parameters()]
    assert "stem.weight" in names
    assert "stages.0.0.conv1.weight" in names
    assert len(names) == len(set(names))


def test_named_buffers_cover_batch_norm_stats():
    buffers = dict(small_classifier(seed=1).named_buffers())
    assert "stem_bn.running_mean" in buffers
    assert "stem_bn.running_var" in buffers


def test_train_eval_propagates_to_children():
    model = small_classifier(seed=1)
    assert model.training
    model.eval()
    assert all(not m.training for m in model.modules())
    model.train()
    assert all(m.training for m in model.modules())


def test_zero_grad_clears_every_parameter():
    model = small_classifier(seed=1)
    for p in model.parameters():
        p.grad = np.ones_like(p.data)
    model.zero_grad()
    assert all(np.count_nonzero(p.grad) == 0 for p in model.parameters())


def test_sequential_applies_children_in_order():
    class AddOne(Module):
        def forward(self, x):
            return x + 1.0

    class Double(Module):
        def forward(self, x):
            return x * 2.0

    out = Sequential(AddOne(), Double())(Tensor(np.array([1.0])))
    assert out.data[0] == 4.0


def test_channel_attention_matches_hand_computation():
    ca = ChannelAttention(2, 2, rng=np.random.default_rng(0))
    ca.fc1.weight.data = np.array([[0.5], [-0.25]])
    ca.fc1.bias.data = np.array([0.1])
    ca.fc2.weight.data = np.array([[1.0, -2.0]])
    ca.fc2.bias.data = np.array([0.2, -0.1])
    x = Tensor(np.array([1.0, 2.0]).reshape(1, 2, 1, 1))
    out = ca(x)
    assert np.allclose(out.data.reshape(-1),
                       [0.6456563062257954, 0.7086873875484091], atol=1e-12)


def test_channel_attention_with_zero_mlp_halves_features():
    ca = ChannelAttention(4, 2, rng=np.random.default_rng(1))
    for p in ca.parameters():
        p.data[...] = 0.0
    x = Tensor(np.random.default_rng(1).normal(size=(2, 4, 3, 3)))
    assert np.allclose(ca(x).data, 0.5 * x.data, atol=1e-12)


def test_spatial_attention_with_zero_conv_halves_features():
    sa = SpatialAttention(3, rng=np.random.default_rng(2))
    for p in sa.parameters():
        p.data[...] = 0.0
    x = Tensor(np.random.default_rng(2).normal(size=(2, 4, 5, 5)))
    assert np.allclose(sa(x).data, 0.5 * x.data, atol=1e-12)


def test_cbam_with_zero_weights_quarters_features():
    cb = CBAM(4, reduction=2, kernel_size=3, rng=np.random.default_rng(3))
    for p in cb.parameters():
        p.data[...] = 0.0
    x = Tensor(np.random.default_rng(3).normal(size=(1, 4, 4, 4)))
    assert np.allclose(cb(x).data, 0.25 * x.data, atol=1e-12)


def test_cbam_preserves_shape_and_damps_magnitudes():
    rng = np.random.default_rng(4)
    cb = CBAM(8, reduction=4, kernel_size=3, rng=rng)
    for _ in range(5):
        x = rng.normal(size=(2, 8, 4, 4))
        out = cb(Tensor(x)).data
        assert out.shape == x.shape
        # Both gates live in (0, 1), so attention can only shrink values
        # and never flips their sign.
        assert np.all(np.abs(out) <= np.abs(x) + 1e-12)
        assert np.all(out * x >= -1e-12)


def test_attention_constructor_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="channels 6 not divisible by reduction 4"):
        ChannelAttention(6, 4, rng=rng)
    with pytest.raises(ValueError, match="spatial kernel must be odd and positive"):
        SpatialAttention(4, rng=rng)


BAD_CONFIGS = [
    (dict(family="dense"), "model.family must be 'resnet' or 'vgg'"),
    (dict(stages=()), "model.stages must list at least one"),
    (dict(stages=((0, 8),)), r"model.stages\[0\] must be positive"),
    (dict(block_kind="wide"), "model.block_kind must be 'basic' or 'bottleneck'"),
    (dict(block_kind="bottleneck", stages=((1, 6),)), r"width 6 not divisible by 4"),
    (dict(family="vgg", cbam=True), "model.cbam is only defined for the resnet family"),
    (dict(cbam=True, cbam_reduction=0), "model.cbam_reduction must be positive"),
    (dict(cbam=True, cbam_reduction=3), "not divisible by cbam_reduction 3"),
    (dict(cbam=True, spatial_kernel=4), "model.spatial_kernel must be odd"),
    (dict(num_classes=0), "model.num_classes must be positive"),
    (dict(input_channels=0), "model.input_channels must be positive"),
    (dict(input_size=0), "model.input_size must be positive"),
]


def test_model_config_validation_messages():
    for overrides, message in BAD_CONFIGS:
        config = ModelConfig(**{**dict(stages=((1, 8),)), **overrides})
        with pytest.raises(ValueError, match=message):
            config.validate()


def test_model_config_coerces_and_round_trips():
    config = ModelConfig(stages=[[2, 8], [1, 16]])
    assert config.stages == ((2, 8), (1, 16))
    gated = tiny_resnet_config(cbam=True, cbam_reduction=2, spatial_kernel=3)
    assert ModelConfig(**gated.to_dict()) == gated


def test_build_model_is_deterministic():
    a = build_model(tiny_resnet_config(), seed=5)
    b = build_model(tiny_resnet_config(), seed=5)
    for (name_a, pa), (name_b, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert name_a == name_b
        assert np.array_equal(pa.data, pb.data)
    c = build_model(tiny_resnet_config(), seed=6)
    assert any(not np.array_equal(pa.data, pc.data)
               for (_, pa), (_, pc) in zip(a.named_parameters(), c.named_parameters()))


def test_cbam_adds_only_attention_parameters():
    stages = ((1, 4), (1, 8))
    plain = build_model(tiny_resnet_config(stages=stages), seed=3)
    gated = build_model(tiny_resnet_config(stages=stages, cbam=True, cbam_reduction=4,
                                           spatial_kernel=3), seed=3)
    plain_params = dict(plain.named_parameters())
    gated_params = dict(gated.named_parameters())
    extra = set(gated_params) - set(plain_params)
    assert extra
    assert all(".attention." in name for name in extra)
    for name in plain_params:
        assert gated_params[name].data.shape == plain_params[name].data.shape
    groups = {name.split(".attention.")[1].rsplit(".", 1)[0] for name in extra}
    assert groups == {"channel.fc1", "channel.fc2", "spatial.conv"}


def test_parameter_count_matches_shape_arithmetic():
    # Stem 72+16, stage blocks (576+32, 576+32), (1152+64, 2304+64, shortcut
    # 128+32), (2304+64, 2304+64), head 160+10: summed by hand to 10978.
    config = ModelConfig(family="resnet", stages=((2, 8), (2, 16)), block_kind="basic",
                         num_classes=10, input_channels=1, input_size=28)
    model = build_model(config, seed=0)
    assert sum(p.data.size for p in model.parameters()) == 10978


def test_bottleneck_depth_plan_constructs():
    config = ModelConfig(family="resnet", stages=((3, 256), (4, 512), (6, 1024), (3, 2048)),
                         block_kind="bottleneck", num_classes=10,
                         input_channels=3, input_size=32)
    model = build_model(config, seed=0)
    blocks = [m for m in model.modules() if isinstance(m, BottleneckBlock)]
    assert len(blocks) == 16
    model.eval()
    x = np.random.default_rng(0).random((1, 3, 32, 32), dtype=np.float32)
    assert model(Tensor(x)).data.shape == (1, 10)


def test_small_bottleneck_with_attention_runs():
    config = tiny_resnet_config(stages=((1, 8),), block_kind="bottleneck",
                                cbam=True, cbam_reduction=4, spatial_kernel=3)
    model = build_model(config, seed=1)
    out = model(Tensor(np.zeros((2, 1, 8, 8), dtype=np.float32)))
    assert out.data.shape == (2, 2)


def test_vgg_constructs_and_classifies():
    config = ModelConfig(family="vgg", stages=((1, 4), (1, 8)), num_classes=5,
                         input_channels=1, input_size=8)
    model = build_model(config, seed=2)
    assert model.fc.weight.data.shape == (8 * 2 * 2, 256)
    out = model(Tensor(np.zeros((2, 1, 8, 8), dtype=np.float32)))
    assert out.data.shape == (2, 5)


def test_vgg_rejects_too_many_pooling_stages():
    config = ModelConfig(family="vgg", stages=((1, 4), (1, 4), (1, 4)), num_classes=2,
                         input_channels=1, input_size=4)
    with pytest.raises(ValueError, match="too small for 3 pooling stages"):
        build_model(config, seed=0)


def test_input_shape_validation():
    model = small_classifier(seed=0)
    with pytest.raises(ValueError, match=r"expected input \[N, 1, 8, 8\]"):
        model(Tensor(np.zeros((2, 3, 8, 8), dtype=np.float32)))


def test_predict_breaks_ties_toward_lowest_index():
    class Zeros(Module):
        def forward(self, x):
            return Tensor(np.zeros((x.shape[0], 3), dtype=np.float32))

    labels = predict(Zeros(), np.zeros((4, 1, 2, 2), dtype=np.float32))
    assert np.array_equal(labels, np.zeros(4, dtype=np.int64))


def test_initial_loss_sits_in_the_chance_band():
    # Freshly initialized logits have spread of order one, so the loss
    # lands near ln(K): well above zero, nowhere near divergence.
    model = small_classifier(seed=9, num_classes=10)
    model.eval()
    rng = np.random.default_rng(10)
    x = rng.random((64, 1, 8, 8), dtype=np.float32)
    labels = rng.integers(0, 10, size=64)
    loss = ops.softmax_cross_entropy(model(Tensor(x)), labels).item()
    assert 0.5 * math.log(10) < loss < 2.5 * math.log(10)


def test_untrained_model_predicts_near_chance():
    model = small_classifier(seed=9, num_classes=10)
    model.eval()
    rng = np.random.default_rng(11)
    x = rng.random((1000, 1, 8, 8), dtype=np.float32)
    labels = rng.integers(0, 10, size=1000)
    accuracy = float((predict(model, x) == labels).mean())
    assert abs(accuracy - 0.1) < 0.05


def test_eval_forward_is_deterministic():
    model = small_classifier(seed=4)
    model.eval()
    x = np.random.default_rng(5).random((3, 1, 8, 8), dtype=np.float32)
    assert np.array_equal(model(Tensor(x)).data, model(Tensor(x)).data)
