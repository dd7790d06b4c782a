"""Residual 2D classifier, 3D volume encoder, and their weighted-logit hybrid."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from . import ops
from .ops import conv_output_size
from .tensor import Tensor, as_tensor, no_grad

CANONICAL_2D_WIDTHS = (64, 128, 256, 512)
CANONICAL_3D_WIDTHS = (64, 128, 256)
CANONICAL_HIDDEN = 512


class Module:
    """Minimal parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; buffers are
    numpy arrays listed in ``_buffer_names``. Submodules (and lists of them)
    are discovered in attribute-definition order, which fixes the naming
    and ordering used by checkpoints.
    """

    _buffer_names: tuple[str, ...] = ()

    def __init__(self) -> None:
        self.training = True

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield f"{name}.{i}", m

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((prefix + name, value))
        for name, child in self._children():
            out.extend(child.named_parameters(f"{prefix}{name}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = [(prefix + n, getattr(self, n)) for n in self._buffer_names]
        for name, child in self._children():
            out.extend(child.named_buffers(f"{prefix}{name}."))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {n: p.data for n, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Copy arrays into this module; names and shapes must match exactly."""
        mine = self.state_dict()
        check_manifest({n: a.shape for n, a in mine.items()},
                       {n: np.shape(a) for n, a in state.items()})
        for name, target in mine.items():
            target[...] = state[name]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, x):
        return self.forward(x)


class ManifestMismatch(ValueError):
    """A checkpoint's tensor names or shapes disagree with the network."""

    def __init__(self, name: str, detail: str) -> None:
        super().__init__(f"parameter {name!r}: {detail}")
        self.name = name


def check_manifest(expected: dict[str, tuple], found: dict[str, tuple]) -> None:
    for name, shape in expected.items():
        if name not in found:
            raise ManifestMismatch(name, "missing from checkpoint")
        if tuple(found[name]) != tuple(shape):
            raise ManifestMismatch(name, f"shape {tuple(found[name])} != expected {tuple(shape)}")
    for name in found:
        if name not in expected:
            raise ManifestMismatch(name, "not present in the network")


def _to_channel_major(x) -> Tensor:
    x = as_tensor(x)
    return ops.transpose(x, (1, 0) + tuple(range(2, x.ndim)))


def _pooled_rows(h: Tensor) -> Tensor:
    """Global-pool ``[C, N, ...]`` activations into ``[N, C]`` features."""
    pooled = ops.adaptive_avg_pool_to_one(h)
    return ops.transpose(ops.reshape(pooled, pooled.shape[:2]), (1, 0))


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


class Conv(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, *, stride: int = 1,
                 padding: int = 0, bias: bool = True, dims: int = 2,
                 rng: np.random.Generator) -> None:
        super().__init__()
        shape = (out_ch, in_ch) + (kernel,) * dims
        self.weight = _he_normal(rng, shape, in_ch * kernel ** dims)
        if bias:
            self.bias = Tensor(np.zeros(out_ch), requires_grad=True)
        else:
            self.bias = None
        self.stride, self.padding, self.dims, self.kernel = stride, padding, dims, kernel
        self.in_ch, self.out_ch = in_ch, out_ch

    def forward(self, x: Tensor) -> Tensor:
        # channel-major activations, see ops.conv_cm
        return ops.conv_cm(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def out_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        sp = tuple(conv_output_size(s, self.kernel, self.stride, self.padding) for s in shape[2:])
        return (shape[0], self.out_ch) + sp


class BatchNorm(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.channels = channels

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.running_mean, self.running_var, self.gamma,
                              self.beta, training=self.training, channel_axis=0)


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, *, rng: np.random.Generator) -> None:
        super().__init__()
        self.weight = _he_normal(rng, (out_features, in_features), in_features)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)
        self.in_features, self.out_features = in_features, out_features

    def forward(self, x: Tensor) -> Tensor:
        return ops.dense(x, self.weight, self.bias)


# -- 2D residual network -----------------------------------------------------------

@dataclass
class TwoDNetConfig:
    num_classes: int = 4
    width_multiplier: float = 1.0
    blocks_per_stage: Sequence[int] = (2, 2, 2, 2)
    input_channels: int = 3

    def widths(self) -> tuple[int, ...]:
        if self.width_multiplier * 64 < 4:
            raise ValueError(f"width_multiplier {self.width_multiplier} gives fewer than 4 stem channels")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.blocks_per_stage) != 4 or min(self.blocks_per_stage) < 1:
            raise ValueError("blocks_per_stage needs four positive entries")
        return tuple(int(round(w * self.width_multiplier)) for w in CANONICAL_2D_WIDTHS)


class BasicBlock(Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.conv1 = Conv(in_ch, out_ch, 3, stride=stride, padding=1, bias=False, rng=rng)
        self.bn1 = BatchNorm(out_ch)
        self.conv2 = Conv(out_ch, out_ch, 3, stride=1, padding=1, bias=False, rng=rng)
        self.bn2 = BatchNorm(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv(in_ch, out_ch, 1, stride=stride, bias=False, rng=rng)
            self.proj_bn = BatchNorm(out_ch)
        else:
            self.proj = self.proj_bn = None

    def forward(self, x: Tensor) -> Tensor:
        h = ops.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        skip = x if self.proj is None else self.proj_bn(self.proj(x))
        return ops.relu(ops.add(h, skip))


class TwoDNet(Module):
    """ResNet-18 layout: 7x7/2 stem, four residual stages, global pool, dense head."""

    def __init__(self, cfg: TwoDNetConfig, init_seed: int = 0) -> None:
        super().__init__()
        widths = cfg.widths()
        rng = np.random.default_rng(init_seed)
        self.cfg = cfg
        self.stem = Conv(cfg.input_channels, widths[0], 7, stride=2, padding=3, bias=False, rng=rng)
        self.stem_bn = BatchNorm(widths[0])
        blocks = []
        in_ch = widths[0]
        for stage, (w, n) in enumerate(zip(widths, cfg.blocks_per_stage)):
            for b in range(n):
                stride = 2 if stage > 0 and b == 0 else 1
                blocks.append(BasicBlock(in_ch, w, stride, rng))
                in_ch = w
        self.blocks = blocks
        self.head = Dense(in_ch, cfg.num_classes, rng=rng)

    def features(self, x) -> Tensor:
        """Pooled ``[N, width]`` features for batch-major ``[N, C, H, W]`` input."""
        h = ops.relu(self.stem_bn(self.stem(_to_channel_major(x))))
        for block in self.blocks:
            h = block(h)
        return _pooled_rows(h)

    def forward(self, x) -> Tensor:
        return self.head(self.features(x))


def build_two_d(cfg: TwoDNetConfig, init_seed: int = 0) -> TwoDNet:
    return TwoDNet(cfg, init_seed)


# -- 3D encoder -----------------------------------------------------------------------

@dataclass
class ThreeDNetConfig:
    num_classes: int = 4
    width_multiplier: float = 1.0
    hidden_width: Optional[int] = None
    input_channels: int = 3
    pool_kernel: int = 3

    def widths(self) -> tuple[int, ...]:
        if self.width_multiplier * 64 < 4:
            raise ValueError(f"width_multiplier {self.width_multiplier} gives fewer than 4 channels")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        return tuple(int(round(w * self.width_multiplier)) for w in CANONICAL_3D_WIDTHS)

    def hidden(self) -> int:
        if self.hidden_width is not None:
            return self.hidden_width
        return int(round(CANONICAL_HIDDEN * self.width_multiplier))


class ThreeDNet(Module):
    """Three 3x3x3 conv/BN/ReLU stages, average pool, global pool, two dense layers."""

    def __init__(self, cfg: ThreeDNetConfig, init_seed: int = 0) -> None:
        super().__init__()
        w1, w2, w3 = cfg.widths()
        rng = np.random.default_rng(init_seed)
        self.cfg = cfg
        self.conv1 = Conv(cfg.input_channels, w1, 3, padding=1, dims=3, rng=rng)
        self.bn1 = BatchNorm(w1)
        self.conv2 = Conv(w1, w2, 3, padding=1, dims=3, rng=rng)
        self.bn2 = BatchNorm(w2)
        self.conv3 = Conv(w2, w3, 3, padding=1, dims=3, rng=rng)
        self.bn3 = BatchNorm(w3)
        self.fc1 = Dense(w3, cfg.hidden(), rng=rng)
        self.fc2 = Dense(cfg.hidden(), cfg.num_classes, rng=rng)

    def forward(self, x) -> Tensor:
        h = _to_channel_major(x)
        for conv, bn in ((self.conv1, self.bn1), (self.conv2, self.bn2), (self.conv3, self.bn3)):
            h = ops.relu(bn(conv(h)))
        h = _pooled_rows(ops.avg_pool(h, self.cfg.pool_kernel, "3D"))
        return self.fc2(ops.relu(self.fc1(h)))

    def layer_table(self) -> list[tuple[str, Optional[int], object, Optional[int]]]:
        """(type, in-channels, out-channels, kernel) rows in forward order."""
        rows = []
        for i, (conv, bn) in enumerate(((self.conv1, self.bn1), (self.conv2, self.bn2),
                                        (self.conv3, self.bn3)), start=1):
            rows.append((f"3D Conv {i}", conv.in_ch, conv.out_ch, conv.kernel))
            rows.append(("Batch Norm", None, bn.channels, None))
        rows.append(("Average Pool", None, None, self.cfg.pool_kernel))
        rows.append(("Adaptive Average Pooling 3D", None, None, 1))
        rows.append(("Dense", self.fc1.in_features, self.fc1.out_features, None))
        rows.append(("Dense", self.fc2.in_features, self.fc2.out_features, None))
        return rows

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Shape inference for ``(N, C, D, H, W)`` inputs without computing."""
        s = tuple(input_shape)
        if s[1] != self.conv1.in_ch:
            raise ValueError(f"expected {self.conv1.in_ch} input channels, got {s[1]}")
        for conv in (self.conv1, self.conv2, self.conv3):
            s = conv.out_shape(s)
        k = self.cfg.pool_kernel
        if min(s[2:]) < k:
            raise ValueError(f"volume {s[2:]} too small for the {k}-wide pool")
        return (s[0], self.fc2.out_features)


def build_three_d(cfg: ThreeDNetConfig, init_seed: int = 0) -> ThreeDNet:
    return ThreeDNet(cfg, init_seed)


# -- hybrid -----------------------------------------------------------------------------

@dataclass
class HybridOutput:
    o2d: Tensor
    o3d: Optional[Tensor]
    oh: np.ndarray
    s2d: Tensor
    s3d: Optional[Tensor]


@dataclass
class HybridModel:
    two_d: TwoDNet
    three_d: Optional[ThreeDNet]
    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError("need alpha >= 0, beta >= 0 and alpha + beta > 0")

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = self.two_d.named_parameters("two_d.")
        if self.three_d is not None:
            out += self.three_d.named_parameters("three_d.")
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"two_d.{k}": v for k, v in self.two_d.state_dict().items()}
        if self.three_d is not None:
            state.update({f"three_d.{k}": v for k, v in self.three_d.state_dict().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        mine = self.state_dict()
        check_manifest({n: a.shape for n, a in mine.items()},
                       {n: np.shape(a) for n, a in state.items()})
        for name, target in mine.items():
            target[...] = state[name]

    def train(self, mode: bool = True) -> "HybridModel":
        self.two_d.train(mode)
        if self.three_d is not None:
            self.three_d.train(mode)
        return self

    def eval(self) -> "HybridModel":
        return self.train(False)

    def num_parameters(self) -> int:
        n = self.two_d.num_parameters()
        return n + (self.three_d.num_parameters() if self.three_d is not None else 0)

    def combine(self, o2d: np.ndarray, o3d: np.ndarray) -> np.ndarray:
        return self.alpha * o2d + self.beta * o3d


def hybrid_forward(model: HybridModel, images, volumes, training: bool) -> HybridOutput:
    """Run both branches and form ``oh = alpha*o2d + beta*o3d``.

    ``oh`` is assembled from the exact arrays stored in ``o2d`` and ``o3d``.
    When ``training`` is false nothing is recorded on the tape.
    """
    if model.three_d is None:
        raise ValueError("hybrid_forward needs a 3D branch")
    if len(images) != len(volumes):
        raise ValueError(f"batch misalignment: {len(images)} images vs {len(volumes)} volumes")
    model.train(training)

    def _run():
        o2d = model.two_d(images)
        o3d = model.three_d(volumes)
        return HybridOutput(o2d, o3d, model.combine(o2d.data, o3d.data),
                            ops.softmax(o2d), ops.softmax(o3d))

    if training:
        return _run()
    with no_grad():
        return _run()
