"""U-Net with a single foreground heatmap output.

Encoder blocks are ``[conv3x3 -> BN -> ELU] x 2 -> dropout -> maxpool``,
decoder blocks are ``upsample -> concat(skip) -> [conv3x3 -> BN -> ELU] x 2
-> dropout`` and the head is a 1x1 convolution followed by a sigmoid.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensorcore as tc


def default_dropout_schedule(depth, low=0.3, high=0.5):
    """Rates for encoder levels 0..depth-1, rising linearly toward the bottleneck."""
    if depth == 1:
        return [low]
    return [float(r) for r in np.linspace(low, high, depth)]


@dataclass
class UNetConfig:
    depth: int = 4
    base_filters: int = 16
    in_channels: int = 3
    out_channels: int = 2
    dropout_schedule: list = field(default=None)
    input_width: int = 512
    input_height: int = 288

    def __post_init__(self):
        if self.dropout_schedule is None:
            self.dropout_schedule = default_dropout_schedule(self.depth)
        else:
            self.dropout_schedule = [float(r) for r in self.dropout_schedule]
        self.validate()

    @property
    def bottleneck_filters(self):
        return self.base_filters * 2 ** self.depth

    @property
    def divisor(self):
        return 2 ** self.depth

    def validate(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_filters < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("filter and channel counts must be positive")
        d = self.divisor
        if self.input_width % d or self.input_height % d:
            raise ValueError(
                f"input size {self.input_width}x{self.input_height} must be divisible by "
                f"2**depth = {d} in both dimensions"
            )
        if len(self.dropout_schedule) != self.depth:
            raise ValueError(
                f"dropout_schedule needs {self.depth} rates (one per level), got {len(self.dropout_schedule)}"
            )
        for r in self.dropout_schedule:
            if not 0.0 <= r < 1.0:
                raise ValueError(f"dropout rate {r} outside [0, 1)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _he_conv(rng, cout, cin, k):
    std = np.sqrt(2.0 / (cin * k * k))
    return rng.standard_normal((cout, cin, k, k)) * std


class UNetModel:
    """Parameters, batch-norm running statistics, and the forward pass."""

    def __init__(self, config, params, buffers):
        self.config = config
        self.params = params
        self.buffers = buffers

    # -- layer helpers --------------------------------------------------

    def _conv_bn_elu(self, x, prefix, mode):
        p = self.params
        x = tc.conv2d(x, p[f"{prefix}.conv.weight"], p[f"{prefix}.conv.bias"], padding="same")
        if mode == "calibrate":
            # batch statistics, pooled into exact first and second moments
            scratch = tc.RunningStats(x.shape[1])
            x = tc.batchnorm(x, p[f"{prefix}.bn.gamma"], p[f"{prefix}.bn.beta"], mode="train",
                             running_stats=scratch, momentum=0.0)
            n = x.data.size // x.shape[1]
            acc = self._moments[prefix]
            acc[0] += n
            acc[1] += n * scratch.mean
            acc[2] += n * (scratch.var + scratch.mean ** 2)
            return tc.elu(x)
        x = tc.batchnorm(x, p[f"{prefix}.bn.gamma"], p[f"{prefix}.bn.beta"], mode=mode,
                         running_stats=self.buffers[f"{prefix}.bn"])
        return tc.elu(x)

    def _double(self, x, prefix, mode):
        x = self._conv_bn_elu(x, f"{prefix}.c1", mode)
        return self._conv_bn_elu(x, f"{prefix}.c2", mode)

    def forward(self, batch, mode="infer", rng=None):
        """Run the network on an ``N x C x H x W`` batch; returns ``N x out x H x W``."""
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        return self._run(batch, mode, rng)

    def _run(self, batch, mode, rng=None):
        cfg = self.config
        x = tc.as_tensor(batch)
        expected = (cfg.in_channels, cfg.input_height, cfg.input_width)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise tc.ShapeError(f"UNet input must be N x {expected[0]} x {expected[1]} x {expected[2]}, got {x.shape}")
        drop = "infer" if mode == "calibrate" else mode

        skips = []
        for level in range(cfg.depth):
            x = self._double(x, f"enc{level}", mode)
            x = tc.dropout(x, cfg.dropout_schedule[level], mode=drop, rng=rng)
            skips.append(x)
            x = tc.maxpool2x2(x)
        x = self._double(x, "bottleneck", mode)
        for level in reversed(range(cfg.depth)):
            x = tc.upsample_nearest2x(x)
            x = tc.concat_channels(x, skips[level])
            x = self._double(x, f"dec{level}", mode)
            x = tc.dropout(x, cfg.dropout_schedule[level], mode=drop, rng=rng)
        x = tc.conv2d(x, self.params["head.weight"], self.params["head.bias"], padding="same")
        return tc.sigmoid(x)

    __call__ = forward

    def recalibrate_batchnorm(self, batches):
        """Replace the running statistics with exact per-channel moments over ``batches``.

        Each batch is normalised with its own statistics and dropout is off,
        so the stored variance matches what inference sees.  Dropout inflates
        activation variance during training; without this pass the moving
        averages carry that inflation into infer mode.
        """
        self._moments = {name[:-3]: [0, 0.0, 0.0] for name in self.buffers}
        seen = False
        for batch in batches:
            self._run(batch, "calibrate")
            seen = True
        if not seen:
            raise ValueError("recalibrate_batchnorm needs at least one batch")
        for name, rs in self.buffers.items():
            n, s1, s2 = self._moments[name[:-3]]
            rs.mean = s1 / n
            rs.var = np.maximum(s2 / n - rs.mean ** 2, 0.0)
        del self._moments

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def state_arrays(self):
        """All persistent arrays: trainable parameters then running statistics."""
        out = OrderedDict((name, t.data) for name, t in self.params.items())
        for name, rs in self.buffers.items():
            out[f"{name}.running_mean"] = rs.mean
            out[f"{name}.running_var"] = rs.var
        return out

    def load_state_arrays(self, arrays):
        for name, t in self.params.items():
            a = np.asarray(arrays[name], dtype=tc.DTYPE)
            if a.shape != t.shape:
                raise tc.ShapeError(f"parameter {name}: stored shape {a.shape} != model shape {t.shape}")
            t.data = a.copy()
        for name, rs in self.buffers.items():
            rs.mean = np.array(arrays[f"{name}.running_mean"], dtype=tc.DTYPE)
            rs.var = np.array(arrays[f"{name}.running_var"], dtype=tc.DTYPE)

    def copy(self):
        clone = build(self.config, np.random.default_rng(0))
        clone.load_state_arrays(self.state_arrays())
        return clone


def build(config, rng):
    """Create a He-initialised model for ``config`` using ``rng``."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    config.validate()
    params = OrderedDict()
    buffers = OrderedDict()

    def add_conv_bn(prefix, cin, cout):
        params[f"{prefix}.conv.weight"] = tc.Tensor(_he_conv(rng, cout, cin, 3), requires_grad=True)
        params[f"{prefix}.conv.bias"] = tc.Tensor(np.zeros(cout), requires_grad=True)
        params[f"{prefix}.bn.gamma"] = tc.Tensor(np.ones(cout), requires_grad=True)
        params[f"{prefix}.bn.beta"] = tc.Tensor(np.zeros(cout), requires_grad=True)
        buffers[f"{prefix}.bn"] = tc.RunningStats(cout)

    cin = config.in_channels
    widths = []
    for level in range(config.depth):
        f = config.base_filters * 2 ** level
        add_conv_bn(f"enc{level}.c1", cin, f)
        add_conv_bn(f"enc{level}.c2", f, f)
        widths.append(f)
        cin = f
    f = config.bottleneck_filters
    add_conv_bn("bottleneck.c1", cin, f)
    add_conv_bn("bottleneck.c2", f, f)
    cin = f
    for level in reversed(range(config.depth)):
        f = widths[level]
        add_conv_bn(f"dec{level}.c1", cin + f, f)
        add_conv_bn(f"dec{level}.c2", f, f)
        cin = f
    params["head.weight"] = tc.Tensor(_he_conv(rng, config.out_channels, cin, 1), requires_grad=True)
    params["head.bias"] = tc.Tensor(np.zeros(config.out_channels), requires_grad=True)
    for name, t in params.items():
        t.name = name
    return UNetModel(config, params, buffers)


def param_count(model):
    """Trainable element count (conv weights/biases and BN gamma/beta)."""
    return int(sum(t.data.size for t in model.params.values()))


def forward(model, batch, mode="infer", rng=None):
    return model.forward(batch, mode=mode, rng=rng)
