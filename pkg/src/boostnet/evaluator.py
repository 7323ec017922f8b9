"""Anytime and budgeted-batch evaluation, multiply-add accounting, exit traces."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from boostnet._io import read_jsonl, write_jsonl
from boostnet.budget import BudgetPolicy, CostProfile, assign_exits
from boostnet.model import BoostedForwardState, BoostedMultiExitNet, confidence


@dataclass
class ExitTrace:
    sample_id: object
    exit_index: int  # 1-based
    confidence: float
    predicted: int
    label: int
    cost: float


@dataclass
class EvaluationReport:
    mode: str
    num_samples: int
    per_exit_accuracy: list[float] | None = None
    cumulative_cost: list[float] | None = None
    accuracy: float | None = None
    realized_avg_cost: float | None = None
    exit_histogram: list[int] | None = None
    tau: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None and v != {}}


def stack_logits(states) -> np.ndarray:
    """Normalize ensemble logits to a ``[samples, exits, classes]`` float64 array."""
    if isinstance(states, BoostedForwardState):
        return np.stack([F.detach().cpu().numpy() for F in states.ensemble_logits], axis=1)
    z = np.asarray(states, dtype=np.float64)
    if z.ndim != 3:
        raise ValueError("logits must be [samples, exits, classes]")
    return z


def anytime_eval(states, labels, costs: CostProfile) -> EvaluationReport:
    z = stack_logits(states)
    labels = np.asarray(labels)
    if z.shape[1] != len(costs):
        raise ValueError(f"{z.shape[1]} exits but {len(costs)} costs")
    acc = (z.argmax(axis=-1) == labels[:, None]).mean(axis=0)
    return EvaluationReport(
        mode="anytime",
        num_samples=len(labels),
        per_exit_accuracy=acc.tolist(),
        cumulative_cost=list(costs.cumulative),
    )


def budgeted_batch_eval(
    states, labels, policy: BudgetPolicy, costs: CostProfile | None = None, sample_ids=None
) -> tuple[EvaluationReport, list[ExitTrace]]:
    """Route each sample to its first confident exit and account for the cost it incurred."""
    costs = costs or policy.cost_profile
    z = stack_logits(states)
    labels = np.asarray(labels)
    S, N, _ = z.shape
    if N != len(costs):
        raise ValueError(f"{N} exits but {len(costs)} costs")
    conf = confidence(z)
    exits = assign_exits(conf, policy.thresholds)
    rows = np.arange(S)
    preds = z.argmax(axis=-1)[rows, exits]
    cum = np.asarray(costs.cumulative)
    incurred = cum[exits]
    hist = np.bincount(exits, minlength=N)
    ids = list(range(S)) if sample_ids is None else list(sample_ids)
    traces = [
        ExitTrace(
            ids[i],
            int(exits[i]) + 1,
            float(conf[i, exits[i]]),
            int(preds[i]),
            int(labels[i]),
            float(incurred[i]),
        )
        for i in range(S)
    ]
    # sequential histogram-weighted sum in exit order, so the identity is exact
    weighted = 0.0
    for count, c in zip(hist.tolist(), costs.cumulative):
        weighted += count * c
    report = EvaluationReport(
        mode="budgeted-batch",
        num_samples=S,
        accuracy=float(np.mean(preds == labels)),
        realized_avg_cost=weighted / S,
        exit_histogram=hist.tolist(),
        tau=policy.tau,
    )
    return report, traces


def cost_profile_estimate(model: BoostedMultiExitNet) -> CostProfile:
    """Multiply-adds per block, counted by hooking every leaf layer on a dummy input.

    Linear: in x out.  Conv2d: output positions x kernel volume x in-channels
    per group x out-channels.  Activations and pooling are free.
    """
    counts = []

    def count_module(root: nn.Module):
        total = [0]
        handles = []

        def hook(mod, inputs, output):
            if isinstance(mod, nn.Linear):
                total[0] += mod.in_features * mod.out_features
            elif isinstance(mod, nn.Conv2d):
                positions = output.shape[-1] * output.shape[-2]
                kvol = mod.kernel_size[0] * mod.kernel_size[1]
                total[0] += positions * kvol * (mod.in_channels // mod.groups) * mod.out_channels
            elif not isinstance(mod, (nn.Tanh, nn.ReLU, nn.Identity)):
                raise ValueError(f"no multiply-add rule for layer {type(mod).__name__}")

        for m in root.modules():
            if next(m.children(), None) is None:
                handles.append(m.register_forward_hook(hook))
        return total, handles

    x = torch.zeros((1, *model.config.input_shape), dtype=next(model.parameters()).dtype)
    with torch.no_grad():
        h = x
        for block, head in zip(model.blocks, model.heads):
            tb, hb = count_module(block)
            th, hh = count_module(head)
            try:
                h = block(h)
                head(h)
            finally:
                for handle in hb + hh:
                    handle.remove()
            counts.append(float(tb[0] + th[0]))
    return CostProfile(tuple(counts))


def collect_exit_gallery(traces: Sequence[ExitTrace], class_filter=None) -> dict[int, list]:
    """Sample ids grouped by exit index, optionally keeping one true class only."""
    gallery: dict[int, list] = {}
    for tr in traces:
        if class_filter is not None and tr.label != class_filter:
            continue
        gallery.setdefault(tr.exit_index, []).append(tr.sample_id)
    return dict(sorted(gallery.items()))


# -- logit dump --------------------------------------------------------------


def write_logit_dump(path, logits, labels, sample_ids=None) -> None:
    """One JSON line per sample: ``{sample_id, label, logits[exit][class]}``."""
    z = stack_logits(logits)
    labels = np.asarray(labels)
    ids = range(len(labels)) if sample_ids is None else sample_ids
    write_jsonl(
        path,
        (
            {"sample_id": sid, "label": int(lab), "logits": z[i].tolist()}
            for i, (sid, lab) in enumerate(zip(ids, labels))
        ),
    )


def read_logit_dump(path) -> tuple[np.ndarray, np.ndarray, list]:
    records = read_jsonl(path)
    if not records:
        raise ValueError(f"empty logit dump {path}")
    z = np.asarray([r["logits"] for r in records], dtype=np.float64)
    labels = np.asarray([r["label"] for r in records], dtype=np.int64)
    return z, labels, [r["sample_id"] for r in records]
