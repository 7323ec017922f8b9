"""Boosted multi-exit networks.

A model is a chain of blocks ``b_1 .. b_N``; head ``n`` reads the output of
block ``n`` and produces raw logits ``f_n``.  The prediction at exit ``n`` is
the ensemble ``F_n = t_n * F_{n-1} + f_n`` with ``F_0 = 0``, where the
previous ensemble is optionally detached from the graph.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

BACKBONE_KINDS = ("multi-exit-mlp", "multi-exit-cnn")
ACTIVATIONS = {"tanh": nn.Tanh, "relu": nn.ReLU}


class ConfigError(ValueError):
    """Raised for structurally invalid model, training or run configuration."""


@dataclass(frozen=True)
class ExitSpec:
    index: int
    block_cost: float
    temperature: float = 0.5
    loss_weight: float = 1.0

    def __post_init__(self):
        if self.index < 1:
            raise ConfigError(f"exit index must be >= 1, got {self.index}")
        if not self.block_cost > 0:
            raise ConfigError(f"exit {self.index}: block_cost must be > 0")
        if self.temperature < 0 or self.loss_weight < 0:
            raise ConfigError(f"exit {self.index}: temperature and loss_weight must be >= 0")


@dataclass(frozen=True)
class ModelConfig:
    """Static description of a multi-exit backbone.

    ``input_shape`` is ``(features,)`` for the MLP and ``(channels, H, W)`` for
    the CNN.  ``widths[n]`` is the hidden width (MLP) or channel count (CNN)
    of block ``n + 1``.
    """

    num_exits: int
    backbone_kind: str
    input_shape: tuple[int, ...]
    widths: tuple[int, ...]
    num_classes: int
    exit_specs: tuple[ExitSpec, ...]
    gradient_rescaling_enabled: bool = True
    stop_gradient_enabled: bool = True
    activation: str = "tanh"
    strides: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.num_exits < 1:
            raise ConfigError("num_exits must be >= 1")
        if self.backbone_kind not in BACKBONE_KINDS:
            raise ConfigError(f"unknown backbone_kind {self.backbone_kind!r}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if len(self.exit_specs) != self.num_exits:
            raise ConfigError(
                f"got {len(self.exit_specs)} exit specs for {self.num_exits} exits"
            )
        if sorted(s.index for s in self.exit_specs) != list(range(1, self.num_exits + 1)):
            raise ConfigError("exit spec indices must be exactly 1..N")
        if len(self.widths) != self.num_exits:
            raise ConfigError("widths must have one entry per block")
        if any(w < 1 for w in self.widths):
            raise ConfigError("widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.backbone_kind == "multi-exit-mlp" and len(self.input_shape) != 1:
            raise ConfigError("multi-exit-mlp expects input_shape=(features,)")
        if self.backbone_kind == "multi-exit-cnn":
            if len(self.input_shape) != 3:
                raise ConfigError("multi-exit-cnn expects input_shape=(C, H, W)")
            if self.strides is not None and len(self.strides) != self.num_exits:
                raise ConfigError("strides must have one entry per block")

    @property
    def specs(self) -> tuple[ExitSpec, ...]:
        """Exit specs ordered by index."""
        return tuple(sorted(self.exit_specs, key=lambda s: s.index))

    @property
    def temperatures(self) -> list[float]:
        return [s.temperature for s in self.specs]

    @property
    def loss_weights(self) -> list[float]:
        return [s.loss_weight for s in self.specs]

    @property
    def block_costs(self) -> list[float]:
        return [s.block_cost for s in self.specs]

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def with_temperature(self, t: float) -> "ModelConfig":
        specs = tuple(dataclasses.replace(s, temperature=t) for s in self.specs)
        return self.replace(exit_specs=specs)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["exit_specs"] = [dataclasses.asdict(s) for s in self.specs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["exit_specs"] = tuple(ExitSpec(**s) for s in d["exit_specs"])
        d["input_shape"] = tuple(d["input_shape"])
        d["widths"] = tuple(d["widths"])
        if d.get("strides") is not None:
            d["strides"] = tuple(d["strides"])
        return cls(**d)


def _conv_out(size: int, stride: int) -> int:
    # 3x3 kernel, padding 1
    return (size + 2 - 3) // stride + 1


def analytic_block_costs(
    backbone_kind: str,
    input_shape: Sequence[int],
    widths: Sequence[int],
    num_classes: int,
    strides: Sequence[int] | None = None,
) -> list[float]:
    """Multiply-adds per block (block layers plus its head), from shapes alone."""
    costs = []
    if backbone_kind == "multi-exit-mlp":
        fan_in = input_shape[0]
        for w in widths:
            costs.append(float(fan_in * w + w * num_classes))
            fan_in = w
    elif backbone_kind == "multi-exit-cnn":
        c_in, h, w_ = input_shape
        strides = strides or (1,) * len(widths)
        for c_out, s in zip(widths, strides):
            h, w_ = _conv_out(h, s), _conv_out(w_, s)
            costs.append(float(h * w_ * c_out * 9 * c_in + c_out * num_classes))
            c_in = c_out
    else:
        raise ConfigError(f"unknown backbone_kind {backbone_kind!r}")
    return costs


def make_config(
    backbone_kind: str,
    input_shape: Sequence[int],
    widths: Sequence[int],
    num_classes: int,
    temperature: float | Sequence[float] = 0.5,
    loss_weight: float | Sequence[float] = 1.0,
    **kwargs,
) -> ModelConfig:
    """Build a ModelConfig whose exit specs carry shape-derived block costs."""
    n = len(widths)
    temps = [temperature] * n if np.isscalar(temperature) else list(temperature)
    weights = [loss_weight] * n if np.isscalar(loss_weight) else list(loss_weight)
    if len(temps) != n or len(weights) != n:
        raise ConfigError("temperature/loss_weight lists must have one entry per exit")
    costs = analytic_block_costs(
        backbone_kind, input_shape, widths, num_classes, kwargs.get("strides")
    )
    specs = tuple(
        ExitSpec(index=i + 1, block_cost=c, temperature=float(t), loss_weight=float(w))
        for i, (c, t, w) in enumerate(zip(costs, temps, weights))
    )
    return ModelConfig(
        num_exits=n,
        backbone_kind=backbone_kind,
        input_shape=tuple(input_shape),
        widths=tuple(widths),
        num_classes=num_classes,
        exit_specs=specs,
        **kwargs,
    )


def grad_rescale_factors(n: int, N: int) -> tuple[float, float]:
    """Backward scales at block ``n``'s output: (into head n, into block n+1)."""
    if not 1 <= n <= N:
        raise ValueError(f"block index {n} outside 1..{N}")
    k = N - n + 1
    return 1.0 / k, (N - n) / k


class _ScaleGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return grad * ctx.scale, None


def scale_grad(x: torch.Tensor, scale: float) -> torch.Tensor:
    """Identity in the forward pass, multiplies the incoming gradient by ``scale``."""
    return _ScaleGrad.apply(x, scale)


def boosted_combine(
    F_prev: torch.Tensor, f_n: torch.Tensor, t_n: float, stop_grad: bool = True
) -> torch.Tensor:
    """Return ``t_n * F_prev + f_n``; with ``stop_grad`` no gradient reaches ``F_prev``."""
    if F_prev.shape != f_n.shape:
        raise ValueError(f"shape mismatch: {tuple(F_prev.shape)} vs {tuple(f_n.shape)}")
    prev = t_n * F_prev
    if stop_grad:
        prev = prev.detach()
    return prev + f_n


@dataclass
class BoostedForwardState:
    head_logits: list[torch.Tensor]
    ensemble_logits: list[torch.Tensor]
    features: list[torch.Tensor] = field(default_factory=list, repr=False)

    @property
    def batch_size(self) -> int:
        return self.head_logits[0].shape[0]

    @property
    def num_exits(self) -> int:
        return len(self.head_logits)


class _GlobalPoolHead(nn.Module):
    def __init__(self, channels, num_classes):
        super().__init__()
        self.fc = nn.Linear(channels, num_classes)

    def forward(self, x):
        return self.fc(x.mean(dim=(2, 3)))


class BoostedMultiExitNet(nn.Module):
    """Sequential blocks with one classifier head per block.

    ``combine`` is the ensemble rule used by :meth:`forward_all_exits`; it is an
    attribute so gradient-check tooling can be pointed at a broken variant.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        act = ACTIVATIONS[config.activation]
        self.blocks = nn.ModuleList()
        self.heads = nn.ModuleList()
        if config.backbone_kind == "multi-exit-mlp":
            fan_in = config.input_shape[0]
            for w in config.widths:
                self.blocks.append(nn.Sequential(nn.Linear(fan_in, w), act()))
                self.heads.append(nn.Linear(w, config.num_classes))
                fan_in = w
        else:
            c_in = config.input_shape[0]
            strides = config.strides or (1,) * config.num_exits
            for c_out, s in zip(config.widths, strides):
                self.blocks.append(
                    nn.Sequential(nn.Conv2d(c_in, c_out, 3, stride=s, padding=1), act())
                )
                self.heads.append(_GlobalPoolHead(c_out, config.num_classes))
                c_in = c_out
        self.combine: Callable = boosted_combine

    @property
    def num_exits(self) -> int:
        return self.config.num_exits

    def parameter_groups(self) -> list[dict[str, list[nn.Parameter]]]:
        """Per-block partition ``theta_n``: block n's backbone and head n parameters."""
        return [
            {"block": list(b.parameters()), "head": list(h.parameters())}
            for b, h in zip(self.blocks, self.heads)
        ]

    def named_partition(self) -> dict[str, torch.Tensor]:
        """Parameters keyed ``block_{n}/...`` and ``head_{n}/...`` (1-based)."""
        out = {}
        for n, (b, h) in enumerate(zip(self.blocks, self.heads), start=1):
            for name, p in b.named_parameters():
                out[f"block_{n}/{name}"] = p
            for name, p in h.named_parameters():
                out[f"head_{n}/{name}"] = p
        return out

    def _check_input(self, x: torch.Tensor):
        expected = tuple(self.config.input_shape)
        if x.dim() != len(expected) + 1 or tuple(x.shape[1:]) != expected:
            raise ValueError(
                f"expected input of shape (batch, {', '.join(map(str, expected))}), "
                f"got {tuple(x.shape)}"
            )

    def forward_all_exits(self, x: torch.Tensor) -> BoostedForwardState:
        self._check_input(x)
        cfg = self.config
        N = cfg.num_exits
        temps = cfg.temperatures
        head_logits, ensemble_logits, features = [], [], []
        h = x
        F = None
        for n in range(1, N + 1):
            h = self.blocks[n - 1](h)
            features.append(h)
            head_in = h
            if cfg.gradient_rescaling_enabled:
                head_scale, pass_scale = grad_rescale_factors(n, N)
                head_in = scale_grad(h, head_scale)
                if n < N:
                    h = scale_grad(h, pass_scale)
            f = self.heads[n - 1](head_in)
            if F is None:
                F = torch.zeros_like(f)
            F = self.combine(F, f, temps[n - 1], cfg.stop_gradient_enabled)
            head_logits.append(f)
            ensemble_logits.append(F)
        return BoostedForwardState(head_logits, ensemble_logits, features)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        return self.forward_all_exits(x).ensemble_logits


def build_model(config: ModelConfig, seed: int = 0) -> BoostedMultiExitNet:
    """Instantiate a float64 model with parameters drawn from a seeded generator."""
    if not isinstance(config, ModelConfig):
        raise ConfigError("build_model expects a ModelConfig")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = BoostedMultiExitNet(config)
    return model.double()


def forward_all_exits(model: BoostedMultiExitNet, inputs: torch.Tensor) -> BoostedForwardState:
    return model.forward_all_exits(inputs)


def confidence(logits) -> np.ndarray | float:
    """Maximum softmax probability per sample (last axis is classes)."""
    z = np.asarray(
        logits.detach().cpu().numpy() if isinstance(logits, torch.Tensor) else logits,
        dtype=np.float64,
    )
    if not np.all(np.isfinite(z)):
        raise ValueError("confidence() got non-finite logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    # after max-subtraction the top class contributes exp(0) = 1
    conf = 1.0 / e.sum(axis=-1)
    return float(conf) if conf.ndim == 0 else conf


def save_checkpoint(path, model: BoostedMultiExitNet, extra: dict | None = None) -> None:
    from boostnet._io import write_npz

    arrays = {k: p.detach().cpu().numpy() for k, p in model.named_partition().items()}
    meta = {"model_config": model.config.to_dict()}
    if extra:
        meta.update(extra)
    write_npz(path, arrays, meta)


def load_checkpoint(path) -> tuple[BoostedMultiExitNet, dict]:
    from boostnet._io import read_npz

    arrays, meta = read_npz(path)
    config = ModelConfig.from_dict(meta["model_config"])
    model = build_model(config, seed=0)
    params = model.named_partition()
    missing = set(params) - set(arrays)
    if missing:
        raise ValueError(f"checkpoint missing parameters: {sorted(missing)}")
    with torch.no_grad():
        for k, p in params.items():
            p.copy_(torch.from_numpy(arrays[k]))
    return model, meta


def logit_scale(state: BoostedForwardState) -> float:
    return max(float(F.detach().abs().max()) for F in state.ensemble_logits) or 1.0


__all__ = [
    "BoostedForwardState",
    "BoostedMultiExitNet",
    "ConfigError",
    "ExitSpec",
    "ModelConfig",
    "analytic_block_costs",
    "boosted_combine",
    "build_model",
    "confidence",
    "forward_all_exits",
    "grad_rescale_factors",
    "load_checkpoint",
    "make_config",
    "save_checkpoint",
    "scale_grad",
]
