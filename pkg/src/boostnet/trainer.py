"""Joint mini-batch training of all exits, plus loss/gradient diagnostics."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from boostnet.model import (
    BoostedForwardState,
    BoostedMultiExitNet,
    ConfigError,
    ExitSpec,
    ModelConfig,
    grad_rescale_factors,
    save_checkpoint,
)

log = logging.getLogger(__name__)

LOSS_KINDS = ("cross-entropy",)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, per_exit_loss: Sequence[float]):
        self.step = step
        self.per_exit_loss = list(per_exit_loss)
        super().__init__(f"non-finite loss at step {step}; per-exit losses {self.per_exit_loss}")


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 300
    batch_size: int = 64
    learning_rate: float = 0.1
    momentum: float = 0.9
    decay_milestones: tuple[int, ...] = (150, 225)
    decay_factor: float = 0.1
    weight_decay: float = 0.0
    seed: int = 0
    loss_kind: str = "cross-entropy"
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "decay_milestones", tuple(self.decay_milestones))
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if not self.decay_factor > 0:
            raise ConfigError("decay_factor must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        ms = self.decay_milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError("decay_milestones must be strictly increasing")
        if any(m >= self.epochs or m < 0 for m in ms):
            raise ConfigError(f"decay_milestones {ms} must lie in [0, epochs={self.epochs})")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss_kind {self.loss_kind!r}")


def lr_at_epoch(epoch: int, tcfg: TrainingConfig) -> float:
    """Step decay: the base rate times ``decay_factor`` per milestone already reached."""
    passed = sum(1 for m in tcfg.decay_milestones if epoch >= m)
    return tcfg.learning_rate * tcfg.decay_factor**passed


@dataclass
class LossBreakdown:
    per_exit_loss: list[torch.Tensor]
    total: torch.Tensor
    per_sample_losses: torch.Tensor

    def per_exit_floats(self) -> list[float]:
        return [float(l.detach()) for l in self.per_exit_loss]


@dataclass
class ValidSampleStats:
    reference_threshold: float
    per_exit_valid_fraction: list[float]


@dataclass
class StepMetrics:
    step: int
    epoch: int
    lr: float
    per_exit_loss: list[float]
    valid_fraction: list[float]
    total: float
    valid_threshold: float = field(default=float("nan"))

    def to_record(self) -> dict:
        return asdict(self)


def joint_loss(
    state: BoostedForwardState, labels: torch.Tensor, exit_specs: Sequence[ExitSpec]
) -> LossBreakdown:
    """Weighted sum over exits of the batch-mean cross-entropy of ``F_n``."""
    specs = sorted(exit_specs, key=lambda s: s.index)
    if len(specs) != state.num_exits:
        raise ValueError(f"{len(specs)} exit specs for {state.num_exits} exits")
    labels = torch.as_tensor(labels, dtype=torch.long)
    num_classes = state.ensemble_logits[0].shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    per_sample = [F.cross_entropy(Fn, labels, reduction="none") for Fn in state.ensemble_logits]
    means = [ps.mean() for ps in per_sample]
    total = sum(s.loss_weight * m for s, m in zip(specs, means))
    return LossBreakdown(means, total, torch.stack([p.detach() for p in per_sample], dim=1))


def valid_fraction(per_sample_losses) -> ValidSampleStats:
    """Fraction of samples per exit whose loss exceeds the exit-1 10th percentile."""
    losses = np.asarray(
        per_sample_losses.detach().cpu().numpy()
        if isinstance(per_sample_losses, torch.Tensor)
        else per_sample_losses,
        dtype=np.float64,
    )
    if losses.ndim != 2 or losses.shape[0] == 0:
        raise ValueError("valid_fraction needs a non-empty [batch, exits] matrix")
    v = float(np.quantile(losses[:, 0], 0.1, method="linear"))
    return ValidSampleStats(v, (losses > v).mean(axis=0).tolist())


def iterate_batches(
    num_samples: int, batch_size: int, epochs: int, seed: int
) -> Iterator[tuple[int, np.ndarray]]:
    """Yield ``(epoch, indices)``; a fresh seeded permutation per epoch."""
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        perm = rng.permutation(num_samples)
        for start in range(0, num_samples, batch_size):
            yield epoch, perm[start : start + batch_size]


def make_optimizer(model: torch.nn.Module, tcfg: TrainingConfig) -> torch.optim.SGD:
    # torch's SGD (dampening 0, no nesterov) is buf <- m*buf + g; theta <- theta - lr*buf
    return torch.optim.SGD(
        model.parameters(),
        lr=tcfg.learning_rate,
        momentum=tcfg.momentum,
        weight_decay=tcfg.weight_decay,
    )


def _as_tensors(dataset):
    x, y = dataset
    x = torch.as_tensor(np.asarray(x), dtype=torch.float64)
    y = torch.as_tensor(np.asarray(y), dtype=torch.long)
    if len(x) != len(y):
        raise ValueError("inputs and labels differ in length")
    if len(x) == 0:
        raise ValueError("dataset is empty")
    return x, y


def train(
    model: BoostedMultiExitNet,
    dataset,
    tcfg: TrainingConfig,
    mcfg: ModelConfig | None = None,
    metrics_path=None,
    checkpoint_dir=None,
) -> tuple[BoostedMultiExitNet, list[StepMetrics]]:
    """Run momentum SGD on the joint loss; updates ``model`` in place.

    One metrics record per step is kept in memory and, if ``metrics_path`` is
    given, streamed as JSON lines.
    """
    mcfg = mcfg or model.config
    if mcfg.num_exits != model.num_exits:
        raise ConfigError("model config and model disagree on the number of exits")
    x, y = _as_tensors(dataset)
    metrics: list[StepMetrics] = []
    if tcfg.epochs == 0:
        if metrics_path is not None:
            Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
            Path(metrics_path).write_text("")
        return model, metrics

    opt = make_optimizer(model, tcfg)
    sink = None
    if metrics_path is not None:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
        sink = open(metrics_path, "w")
    model.train()
    current_epoch = -1
    try:
        for step, (epoch, idx) in enumerate(
            iterate_batches(len(x), tcfg.batch_size, tcfg.epochs, tcfg.seed)
        ):
            if epoch != current_epoch:
                if current_epoch >= 0:
                    _maybe_checkpoint(model, tcfg, current_epoch, checkpoint_dir)
                current_epoch = epoch
                lr = lr_at_epoch(epoch, tcfg)
                for group in opt.param_groups:
                    group["lr"] = lr
            idx_t = torch.from_numpy(idx)
            state = model.forward_all_exits(x[idx_t])
            breakdown = joint_loss(state, y[idx_t], mcfg.specs)
            per_exit = breakdown.per_exit_floats()
            if not math.isfinite(float(breakdown.total.detach())):
                raise NonFiniteLossError(step, per_exit)
            opt.zero_grad(set_to_none=True)
            breakdown.total.backward()
            opt.step()

            stats = valid_fraction(breakdown.per_sample_losses)
            rec = StepMetrics(
                step=step,
                epoch=epoch,
                lr=lr,
                per_exit_loss=per_exit,
                valid_fraction=stats.per_exit_valid_fraction,
                total=float(breakdown.total.detach()),
                valid_threshold=stats.reference_threshold,
            )
            metrics.append(rec)
            if sink is not None:
                sink.write(json.dumps(rec.to_record(), sort_keys=True) + "\n")
        _maybe_checkpoint(model, tcfg, current_epoch, checkpoint_dir)
    finally:
        if sink is not None:
            sink.close()
    log.debug("trained %d steps", len(metrics))
    return model, metrics


def _maybe_checkpoint(model, tcfg, epoch, checkpoint_dir):
    k = tcfg.checkpoint_every
    if checkpoint_dir is None or k <= 0 or (epoch + 1) % k:
        return
    save_checkpoint(Path(checkpoint_dir) / f"checkpoint_epoch{epoch + 1:04d}.npz", model)


# -- gradient diagnostics ----------------------------------------------------


def head_logits_only(model: BoostedMultiExitNet, x: torch.Tensor) -> list[torch.Tensor]:
    """Raw head outputs ``f_n`` computed straight from blocks and heads (no ensemble)."""
    out = []
    h = x
    for block, head in zip(model.blocks, model.heads):
        h = block(h)
        out.append(head(h))
    return out


def _ensemble(heads: list[torch.Tensor], temps: Sequence[float]) -> list[torch.Tensor]:
    F_prev = torch.zeros_like(heads[0])
    out = []
    for f, t in zip(heads, temps):
        F_prev = t * F_prev + f
        out.append(F_prev)
    return out


def central_differences(fn, param: torch.Tensor, epsilon: float) -> np.ndarray:
    """``(fn(p + e_j) - fn(p - e_j)) / 2e`` for every element ``j`` of ``param``.

    ``fn`` takes no arguments and returns a 1-d array; ``param`` is perturbed
    in place and restored.  Result shape is ``[param.numel(), len(fn())]``.
    """
    flat = param.data.view(-1)
    rows = []
    for j in range(flat.numel()):
        orig = flat[j].item()
        flat[j] = orig + epsilon
        plus = np.atleast_1d(np.asarray(fn(), dtype=np.float64))
        flat[j] = orig - epsilon
        minus = np.atleast_1d(np.asarray(fn(), dtype=np.float64))
        flat[j] = orig
        rows.append((plus - minus) / (2 * epsilon))
    return np.array(rows)


def finite_diff_gradient_check(
    model: BoostedMultiExitNet,
    batch,
    epsilon: float = 1e-5,
    abs_floor: float = 1e-8,
    return_details: bool = False,
):
    """Max relative error between the autograd joint-loss gradient and central differences.

    The finite-difference side never calls ``model.combine``: it rebuilds the
    ensemble from raw head outputs.  Under stop-gradient each ``F_{n-1}`` is
    frozen at its unperturbed value.  With gradient rescaling, the oracle for a
    block-``n`` backbone parameter is ``1/(N-n+1)`` times the sum of the
    per-exit differences for exits ``n..N``; head parameters are unscaled.
    """
    cfg = model.config
    N = cfg.num_exits
    temps = cfg.temperatures
    weights = cfg.loss_weights
    x, y = batch
    x = torch.as_tensor(x, dtype=torch.float64)
    y = torch.as_tensor(y, dtype=torch.long)

    params = model.named_partition()
    names = list(params)
    state = model.forward_all_exits(x)
    total = joint_loss(state, y, cfg.specs).total
    if not torch.isfinite(total):
        raise ValueError("non-finite loss in gradient check")
    analytic = torch.autograd.grad(total, [params[k] for k in names], allow_unused=True)

    with torch.no_grad():
        frozen = _ensemble(head_logits_only(model, x), temps)

        def per_exit_losses() -> np.ndarray:
            heads = head_logits_only(model, x)
            if cfg.stop_gradient_enabled:
                prev = [torch.zeros_like(heads[0])] + frozen[:-1]
                ens = [t * Fp + f for t, Fp, f in zip(temps, prev, heads)]
            else:
                ens = _ensemble(heads, temps)
            return np.array([float(F.cross_entropy(e, y)) for e in ens])

        max_err = 0.0
        worst = None
        for name, grad in zip(names, analytic):
            p = params[name]
            kind, rest = name.split("/", 1)
            n = int(kind.split("_")[1])
            g_an = np.zeros(p.numel()) if grad is None else grad.reshape(-1).numpy()
            fd = central_differences(per_exit_losses, p, epsilon)
            for j in range(p.numel()):
                d = fd[j] * np.asarray(weights)
                if kind.startswith("block"):
                    scale = grad_rescale_factors(n, N)[0] if cfg.gradient_rescaling_enabled else 1.0
                    oracle = scale * d[n - 1 :].sum()
                else:
                    oracle = d.sum()
                if not (np.isfinite(oracle) and np.isfinite(g_an[j])):
                    raise ValueError(f"non-finite gradient for {name}[{j}]")
                err = abs(g_an[j] - oracle) / max(abs(g_an[j]), abs(oracle), abs_floor)
                if err > max_err:
                    max_err, worst = err, (name, j, float(g_an[j]), float(oracle))
    if return_details:
        return max_err, worst
    return max_err
