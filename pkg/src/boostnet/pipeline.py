"""Train -> dump logits -> calibrate -> evaluate, as reusable steps."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from boostnet._io import write_json
from boostnet.budget import (
    BudgetPolicy,
    CostProfile,
    HoldoutConfidences,
    adjust_thresholds_non_degrading,
    holdout_accuracy,
    make_policy,
)
from boostnet.config import RunConfig, write_config
from boostnet.evaluator import (
    anytime_eval,
    budgeted_batch_eval,
    collect_exit_gallery,
    write_logit_dump,
)
from boostnet.model import BoostedMultiExitNet, build_model, load_checkpoint, save_checkpoint
from boostnet.trainer import train

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.npz"
METRICS_NAME = "metrics.jsonl"


def train_run(cfg: RunConfig, out_dir) -> tuple[BoostedMultiExitNet, list]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = cfg.splits()
    tr = splits["train"]
    num_classes = int(max(s.y.max() for s in splits.values())) + 1
    mcfg = cfg.model_config(tr.x.shape[1:], num_classes)
    model = build_model(mcfg, seed=cfg.seed)
    model, metrics = train(
        model,
        tr.as_tuple(),
        cfg.training_config(),
        mcfg,
        metrics_path=out / METRICS_NAME,
        checkpoint_dir=out,
    )
    save_checkpoint(out / CHECKPOINT_NAME, model, {"run_config": cfg.to_dict()})
    write_config(out / "config.toml", cfg)
    log.info("trained %d steps -> %s", len(metrics), out / CHECKPOINT_NAME)
    return model, metrics


def split_logits(model: BoostedMultiExitNet, cfg: RunConfig, split: str):
    splits = cfg.splits()
    if split not in splits:
        raise ValueError(f"unknown split {split!r}; choose from {sorted(splits)}")
    s = splits[split]
    model.eval()
    with torch.no_grad():
        state = model.forward_all_exits(torch.as_tensor(s.x, dtype=torch.float64))
    z = np.stack([F.numpy() for F in state.ensemble_logits], axis=1)
    return z, s.y, s.ids.tolist()


def dump_logits(checkpoint, split: str, out_path) -> Path:
    model, meta = load_checkpoint(checkpoint)
    cfg = RunConfig.from_dict(meta["run_config"])
    z, y, ids = split_logits(model, cfg, split)
    write_logit_dump(out_path, z, y, ids)
    return Path(out_path)


def default_budgets(costs: CostProfile, k: int) -> list[float]:
    cum = costs.cumulative
    return np.linspace(cum[0], cum[-1], k).tolist()


def calibrate(
    logits: np.ndarray, labels, costs: CostProfile, budgets: Sequence[float]
) -> tuple[list[BudgetPolicy], dict]:
    """Raw and non-degrading-adjusted policies for an ascending budget ladder."""
    holdout = HoldoutConfidences.from_logits(logits, labels)
    raw = [make_policy(tau, costs, holdout) for tau in sorted(budgets)]
    adjusted = adjust_thresholds_non_degrading(raw, holdout)
    summary = {
        "budgets": [p.tau for p in raw],
        "raw_holdout_accuracy": [holdout_accuracy(holdout, p.thresholds) for p in raw],
        "adjusted_holdout_accuracy": [holdout_accuracy(holdout, p.thresholds) for p in adjusted],
    }
    return adjusted, summary


def write_policies(out_dir, policies: Sequence[BudgetPolicy]) -> list[Path]:
    paths = []
    for i, pol in enumerate(policies):
        path = Path(out_dir) / f"policy_{i:02d}.json"
        write_json(path, pol.to_dict())
        paths.append(path)
    return paths


def evaluate_budgets(logits, labels, policies: Sequence[BudgetPolicy], sample_ids=None):
    """Reports, (avg cost, accuracy) curve rows, and exit galleries per policy."""
    reports, curve, galleries = [], [], []
    for pol in policies:
        report, traces = budgeted_batch_eval(logits, labels, pol, sample_ids=sample_ids)
        reports.append(report)
        curve.append(
            {"tau": pol.tau, "avg_cost": report.realized_avg_cost, "accuracy": report.accuracy}
        )
        galleries.append(collect_exit_gallery(traces))
    return reports, curve, galleries


def evaluate_anytime(logits, labels, costs: CostProfile):
    report = anytime_eval(logits, labels, costs)
    curve = [
        {"exit": n + 1, "cost": c, "accuracy": a}
        for n, (c, a) in enumerate(zip(report.cumulative_cost, report.per_exit_accuracy))
    ]
    return report, curve


def costs_from_checkpoint(checkpoint) -> CostProfile:
    _, meta = load_checkpoint(checkpoint)
    specs = sorted(meta["model_config"]["exit_specs"], key=lambda s: s["index"])
    return CostProfile(tuple(s["block_cost"] for s in specs))


def full_pipeline(cfg: RunConfig, out_dir) -> dict:
    """Train, calibrate on the holdout split, evaluate on the test split."""
    out = Path(out_dir)
    model, metrics = train_run(cfg, out)
    costs = CostProfile(tuple(model.config.block_costs))
    zh, yh, _ = split_logits(model, cfg, "holdout")
    zt, yt, ids = split_logits(model, cfg, "test")
    policies, cal = calibrate(zh, yh, costs, default_budgets(costs, cfg.budget_points))
    write_policies(out / "policies", policies)
    any_report, any_curve = evaluate_anytime(zt, yt, costs)
    reports, budget_curve, _ = evaluate_budgets(zt, yt, policies, ids)
    tail = metrics[-100:]
    result = {
        "anytime": any_report.to_dict(),
        "anytime_curve": any_curve,
        "budget_curve": budget_curve,
        "calibration": cal,
        "valid_fraction_tail_mean": (
            np.mean([m.valid_fraction for m in tail], axis=0).tolist() if tail else []
        ),
        "steps": len(metrics),
        "run_config": cfg.to_dict(),
    }
    write_json(out / "summary.json", result)
    return result
