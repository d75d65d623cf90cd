"""Model definitions: residual and VGG-style classifiers with optional
convolutional block attention, built on the taped ops."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autodiff import Tensor, amax, as_tensor, concat, no_grad, reshape, tensor_mean

__all__ = [
    "Module",
    "Sequential",
    "Conv2d",
    "Dense",
    "BatchNorm2d",
    "ChannelAttention",
    "SpatialAttention",
    "CBAM",
    "BasicBlock",
    "BottleneckBlock",
    "ResNet",
    "VGG",
    "ModelConfig",
    "build_model",
    "predict",
]

VGG_HEAD_UNITS = 256


class Module:
    """Composable layer: tracks parameters, buffers, and submodules by
    attribute name, in construction order."""

    def __init__(self):
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._modules.pop(name, None)
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._parameters.pop(name, None)
            self._modules[name] = value
        else:
            object.__setattr__(self, name, value)

    def __getattr__(self, name):
        for store in ("_parameters", "_buffers", "_modules"):
            d = object.__getattribute__(self, store)
            if name in d:
                return d[name]
        raise AttributeError(f"{type(self).__name__} has no attribute {name!r}")

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def modules(self):
        yield self
        for child in self._modules.values():
            yield from child.modules()

    def named_parameters(self, prefix: str = ""):
        for name, p in self._parameters.items():
            yield prefix + name, p
        for child_name, child in self._modules.items():
            yield from child.named_parameters(prefix + child_name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for child_name, child in self._modules.items():
            yield from child.named_buffers(prefix + child_name + ".")

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, x):
        return self.forward(x)


class Sequential(Module):
    def __init__(self, *mods: Module):
        super().__init__()
        for i, m in enumerate(mods):
            setattr(self, str(i), m)

    def forward(self, x):
        for m in self._modules.values():
            x = m(x)
        return x


def _he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, *, stride=1, padding=0,
                 bias=True, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        k = kernel_size
        fan_in = in_channels * k * k
        self.weight = Tensor(
            _he_normal(rng, (out_channels, in_channels, k, k), fan_in, dtype), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Dense(Module):
    def __init__(self, in_features, out_features, *, bias=True,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.weight = Tensor(
            _he_normal(rng, (in_features, out_features), in_features, dtype), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x):
        return ops.dense(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, num_features, *, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.gamma = Tensor(np.ones(num_features, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(num_features, dtype=dtype))
        self.register_buffer("running_var", np.ones(num_features, dtype=dtype))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return ops.batch_norm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


class ChannelAttention(Module):
    """Channel gate: a shared bottleneck MLP scores average- and max-pooled
    channel descriptors; their sum passes through a sigmoid."""

    def __init__(self, channels, reduction, *, rng, dtype=np.float32):
        super().__init__()
        if channels % reduction:
            raise ValueError(f"channels {channels} not divisible by reduction {reduction}")
        self.fc1 = Dense(channels, channels // reduction, rng=rng, dtype=dtype)
        self.fc2 = Dense(channels // reduction, channels, rng=rng, dtype=dtype)

    def forward(self, x):
        n, c = x.shape[0], x.shape[1]
        avg = reshape(ops.global_pool(x, "avg"), (n, c))
        mx = reshape(ops.global_pool(x, "max"), (n, c))
        gate = ops.sigmoid(
            self.fc2(ops.relu(self.fc1(avg))) + self.fc2(ops.relu(self.fc1(mx)))
        )
        return x * reshape(gate, (n, c, 1, 1))


class SpatialAttention(Module):
    """Spatial gate: a k x k conv over the channel-wise mean and max maps."""

    def __init__(self, kernel_size=7, *, rng, dtype=np.float32):
        super().__init__()
        if kernel_size % 2 == 0 or kernel_size < 1:
            raise ValueError(f"spatial kernel must be odd and positive, got {kernel_size}")
        self.conv = Conv2d(2, 1, kernel_size, padding=(kernel_size - 1) // 2, rng=rng, dtype=dtype)

    def forward(self, x):
        stats = concat([tensor_mean(x, axis=1, keepdims=True), amax(x, axis=1, keepdims=True)], axis=1)
        return x * ops.sigmoid(self.conv(stats))


class CBAM(Module):
    """Channel attention followed by spatial attention."""

    def __init__(self, channels, reduction=4, kernel_size=7, *, rng, dtype=np.float32):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction, rng=rng, dtype=dtype)
        self.spatial = SpatialAttention(kernel_size, rng=rng, dtype=dtype)

    def forward(self, x):
        return self.spatial(self.channel(x))


def _shortcut(in_channels, out_channels, stride, rng, dtype):
    if stride == 1 and in_channels == out_channels:
        return None
    return Sequential(
        Conv2d(in_channels, out_channels, 1, stride=stride, bias=False, rng=rng, dtype=dtype),
        BatchNorm2d(out_channels, dtype=dtype),
    )


class BasicBlock(Module):
    """Two 3x3 convs; attention, when present, gates the conv branch
    before the residual addition."""

    def __init__(self, in_channels, out_channels, stride, *, attention=False,
                 reduction=4, spatial_kernel=7, rng, dtype=np.float32):
        super().__init__()
        self.conv1 = Conv2d(in_channels, out_channels, 3, stride=stride, padding=1,
                            bias=False, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(out_channels, dtype=dtype)
        self.conv2 = Conv2d(out_channels, out_channels, 3, padding=1, bias=False, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(out_channels, dtype=dtype)
        self.attention = CBAM(out_channels, reduction, spatial_kernel, rng=rng, dtype=dtype) \
            if attention else None
        self.shortcut = _shortcut(in_channels, out_channels, stride, rng, dtype)

    def forward(self, x):
        h = ops.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        if self.attention is not None:
            h = self.attention(h)
        s = x if self.shortcut is None else self.shortcut(x)
        return ops.relu(h + s)


class BottleneckBlock(Module):
    """1x1 reduce, 3x3, 1x1 expand (x4), with the same attention placement."""

    def __init__(self, in_channels, out_channels, stride, *, attention=False,
                 reduction=4, spatial_kernel=7, rng, dtype=np.float32):
        super().__init__()
        mid = out_channels // 4
        self.conv1 = Conv2d(in_channels, mid, 1, bias=False, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(mid, dtype=dtype)
        self.conv2 = Conv2d(mid, mid, 3, stride=stride, padding=1, bias=False, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(mid, dtype=dtype)
        self.conv3 = Conv2d(mid, out_channels, 1, bias=False, rng=rng, dtype=dtype)
        self.bn3 = BatchNorm2d(out_channels, dtype=dtype)
        self.attention = CBAM(out_channels, reduction, spatial_kernel, rng=rng, dtype=dtype) \
            if attention else None
        self.shortcut = _shortcut(in_channels, out_channels, stride, rng, dtype)

    def forward(self, x):
        h = ops.relu(self.bn1(self.conv1(x)))
        h = ops.relu(self.bn2(self.conv2(h)))
        h = self.bn3(self.conv3(h))
        if self.attention is not None:
            h = self.attention(h)
        s = x if self.shortcut is None else self.shortcut(x)
        return ops.relu(h + s)


@dataclass
class ModelConfig:
    """Architecture description; every field is validated before use."""

    family: str = "resnet"
    stages: tuple = ((3, 16), (3, 32), (3, 64))
    block_kind: str = "basic"
    cbam: bool = False
    cbam_reduction: int = 4
    spatial_kernel: int = 7
    num_classes: int = 10
    input_channels: int = 3
    input_size: int = 32

    def __post_init__(self):
        self.stages = tuple((int(n), int(w)) for n, w in self.stages)

    def validate(self) -> "ModelConfig":
        if self.family not in ("resnet", "vgg"):
            raise ValueError(f"model.family must be 'resnet' or 'vgg', got {self.family!r}")
        if not self.stages:
            raise ValueError("model.stages must list at least one (count, width) stage")
        for i, (count, width) in enumerate(self.stages):
            if count < 1 or width < 1:
                raise ValueError(f"model.stages[{i}] must be positive, got ({count}, {width})")
        if self.block_kind not in ("basic", "bottleneck"):
            raise ValueError(f"model.block_kind must be 'basic' or 'bottleneck', got {self.block_kind!r}")
        if self.family == "resnet" and self.block_kind == "bottleneck":
            for i, (_, width) in enumerate(self.stages):
                if width % 4:
                    raise ValueError(f"model.stages[{i}] width {width} not divisible by 4 (bottleneck)")
        if self.family == "vgg" and self.cbam:
            raise ValueError("model.cbam is only defined for the resnet family")
        if self.cbam:
            if self.cbam_reduction < 1:
                raise ValueError(f"model.cbam_reduction must be positive, got {self.cbam_reduction}")
            for i, (_, width) in enumerate(self.stages):
                if width % self.cbam_reduction:
                    raise ValueError(
                        f"model.stages[{i}] width {width} not divisible by "
                        f"cbam_reduction {self.cbam_reduction}"
                    )
            if self.spatial_kernel % 2 == 0 or self.spatial_kernel < 1:
                raise ValueError(f"model.spatial_kernel must be odd, got {self.spatial_kernel}")
        for name in ("num_classes", "input_channels", "input_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"model.{name} must be positive, got {getattr(self, name)}")
        return self

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "stages": [list(s) for s in self.stages],
            "block_kind": self.block_kind,
            "cbam": self.cbam,
            "cbam_reduction": self.cbam_reduction,
            "spatial_kernel": self.spatial_kernel,
            "num_classes": self.num_classes,
            "input_channels": self.input_channels,
            "input_size": self.input_size,
        }


class _Classifier(Module):
    """Shared input validation for the concrete families."""

    config: ModelConfig

    def _check_input(self, x):
        x = as_tensor(x)
        cfg = self.config
        if x.data.ndim != 4 or x.data.shape[1] != cfg.input_channels \
                or x.data.shape[2] != cfg.input_size or x.data.shape[3] != cfg.input_size:
            raise ValueError(
                f"expected input [N, {cfg.input_channels}, {cfg.input_size}, {cfg.input_size}], "
                f"got shape {x.data.shape}"
            )
        return x


class ResNet(_Classifier):
    def __init__(self, config: ModelConfig, rng, dtype=np.float32):
        super().__init__()
        object.__setattr__(self, "config", config)
        block = BasicBlock if config.block_kind == "basic" else BottleneckBlock
        expansion = 1 if config.block_kind == "basic" else 4
        stem_width = config.stages[0][1] // expansion
        self.stem = Conv2d(config.input_channels, stem_width, 3, padding=1,
                           bias=False, rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm2d(stem_width, dtype=dtype)
        in_ch = stem_width
        stage_mods = []
        for si, (count, width) in enumerate(config.stages):
            blocks = []
            for bi in range(count):
                stride = 2 if si > 0 and bi == 0 else 1
                blocks.append(block(
                    in_ch, width, stride, attention=config.cbam,
                    reduction=config.cbam_reduction, spatial_kernel=config.spatial_kernel,
                    rng=rng, dtype=dtype,
                ))
                in_ch = width
            stage_mods.append(Sequential(*blocks))
        self.stages = Sequential(*stage_mods)
        self.head = Dense(in_ch, config.num_classes, rng=rng, dtype=dtype)

    def forward(self, x):
        x = self._check_input(x)
        h = ops.relu(self.stem_bn(self.stem(x)))
        h = self.stages(h)
        h = ops.global_pool(h, "avg")
        h = reshape(h, (h.shape[0], h.shape[1]))
        return self.head(h)


class VGG(_Classifier):
    def __init__(self, config: ModelConfig, rng, dtype=np.float32):
        super().__init__()
        object.__setattr__(self, "config", config)
        in_ch = config.input_channels
        size = config.input_size
        stage_mods = []
        for count, width in config.stages:
            layers = []
            for _ in range(count):
                layers.append(Conv2d(in_ch, width, 3, padding=1, bias=False, rng=rng, dtype=dtype))
                layers.append(BatchNorm2d(width, dtype=dtype))
                in_ch = width
            stage_mods.append(Sequential(*layers))
            size //= 2
        if size < 1:
            raise ValueError(
                f"model.input_size {config.input_size} too small for {len(config.stages)} pooling stages"
            )
        self.features = Sequential(*stage_mods)
        self.flat_dim = in_ch * size * size
        self.fc = Dense(self.flat_dim, VGG_HEAD_UNITS, rng=rng, dtype=dtype)
        self.head = Dense(VGG_HEAD_UNITS, config.num_classes, rng=rng, dtype=dtype)

    def forward(self, x):
        x = self._check_input(x)
        h = x
        for stage in self.features._modules.values():
            mods = list(stage._modules.values())
            for conv, bn in zip(mods[0::2], mods[1::2]):
                h = ops.relu(bn(conv(h)))
            h = ops.max_pool2d(h, 2, 2)
        h = reshape(h, (h.shape[0], self.flat_dim))
        return self.head(ops.relu(self.fc(h)))


def build_model(config: ModelConfig, seed: int, dtype=np.float32) -> Module:
    """Construct a model; identical (config, seed) gives bit-identical
    parameters."""
    config.validate()
    rng = np.random.default_rng(seed)
    if config.family == "resnet":
        return ResNet(config, rng, dtype)
    return VGG(config, rng, dtype)


def predict(model: Module, batch) -> np.ndarray:
    """Argmax class labels; ties resolve to the lowest index."""
    with no_grad():
        logits = model(as_tensor(batch))
    return np.argmax(logits.data, axis=1)
