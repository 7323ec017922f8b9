"""Command-line entry point: ``boostnet train|dump-logits|calibrate|eval|gradcheck|ablate``.

Exit codes: 0 success, 2 configuration/input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import torch

from boostnet import pipeline
from boostnet._io import write_json
from boostnet.budget import BudgetPolicy, CostProfile, InfeasibleBudgetError
from boostnet.config import RunConfig
from boostnet.evaluator import read_logit_dump
from boostnet.model import ConfigError, build_model
from boostnet.trainer import NonFiniteLossError, finite_diff_gradient_check

log = logging.getLogger("boostnet")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
GRADCHECK_TOL = 1e-5

PRESETS = {
    "temperature-sweep": lambda cfg: [
        (f"t={t}", cfg.replace(temperature=t)) for t in (0.0, 0.5, 1.0)
    ],
    "trainable-prev": lambda cfg: [
        ("stop-grad", cfg.replace(stop_gradient=True)),
        ("trainable-prev", cfg.replace(stop_gradient=False)),
    ],
    "rescaling-onoff": lambda cfg: [
        ("rescaling-on", cfg.replace(gradient_rescaling=True)),
        ("rescaling-off", cfg.replace(gradient_rescaling=False)),
    ],
    "batch-size": lambda cfg: [
        (f"batch={b}", cfg.replace(batch_size=b))
        for b in (max(1, cfg.batch_size // 2), cfg.batch_size, cfg.batch_size * 2)
    ],
}


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "out", None):
        changes["output_dir"] = str(args.out)
    return cfg.replace(**changes) if changes else cfg


def _parse_budgets(text: str | None) -> list[float] | None:
    if not text:
        return None
    try:
        return [float(b) for b in text.split(",") if b.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --budgets value {text!r}") from exc


def _costs(args) -> CostProfile:
    if getattr(args, "costs", None):
        try:
            return CostProfile(tuple(float(c) for c in args.costs.split(",")))
        except ValueError as exc:
            raise ConfigError(f"bad --costs value: {exc}") from exc
    if getattr(args, "checkpoint", None):
        return pipeline.costs_from_checkpoint(args.checkpoint)
    raise ConfigError("need --costs or --checkpoint to know the per-block costs")


def _write_curve(path, rows: list[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.output_dir)
    _, metrics = pipeline.train_run(cfg, out)
    print(f"trained {len(metrics)} steps; checkpoint at {out / pipeline.CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_dump_logits(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise ConfigError(f"checkpoint {ckpt} not found")
    if args.split not in ("train", "holdout", "test"):
        raise ConfigError(f"unknown split {args.split!r}")
    out = Path(args.out) if args.out else ckpt.parent / f"logits_{args.split}.jsonl"
    pipeline.dump_logits(ckpt, args.split, out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    costs = _costs(args)
    z, y, _ = read_logit_dump(args.logits)
    if z.shape[1] != len(costs):
        raise ConfigError(f"dump has {z.shape[1]} exits but {len(costs)} costs were given")
    budgets = _parse_budgets(args.budgets) or pipeline.default_budgets(costs, args.points)
    policies, summary = pipeline.calibrate(z, y, costs, budgets)
    out = Path(args.out)
    paths = pipeline.write_policies(out, policies)
    write_json(out / "calibration.json", summary)
    for pol, acc in zip(policies, summary["adjusted_holdout_accuracy"]):
        print(f"tau={pol.tau:.6g} p={pol.p:.6g} holdout_acc={acc:.4f}")
    print(f"wrote {len(paths)} policies to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    z, y, ids = read_logit_dump(args.logits)
    out = Path(args.out)
    if args.anytime:
        report, curve = pipeline.evaluate_anytime(z, y, _costs(args))
        write_json(out / "report_anytime.json", report.to_dict())
        _write_curve(out / "curve_anytime.csv", curve)
        for row in curve:
            print(f"exit {row['exit']}: cost={row['cost']:.6g} acc={row['accuracy']:.4f}")
        return EXIT_OK
    if not args.policies:
        raise ConfigError("eval needs --anytime or at least one --policies file")
    policies = [BudgetPolicy.from_dict(json.loads(Path(p).read_text())) for p in args.policies]
    policies.sort(key=lambda p: p.tau)
    reports, curve, galleries = pipeline.evaluate_budgets(z, y, policies, ids)
    write_json(out / "report_budgeted.json", [r.to_dict() for r in reports])
    write_json(out / "exit_gallery.json", [{str(k): v for k, v in g.items()} for g in galleries])
    _write_curve(out / "curve_budgeted.csv", curve)
    for row in curve:
        print(f"tau={row['tau']:.6g} avg_cost={row['avg_cost']:.6g} acc={row['accuracy']:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    splits = cfg.splits()
    tr = splits["train"]
    num_classes = int(max(s.y.max() for s in splits.values())) + 1
    mcfg = cfg.model_config(tr.x.shape[1:], num_classes)
    model = build_model(mcfg, seed=cfg.seed)
    n_params = sum(p.numel() for p in model.parameters())
    if n_params > 5000:
        raise ConfigError(f"gradcheck model has {n_params} parameters; keep it under 5000")
    k = min(args.batch, len(tr))
    batch = (torch.as_tensor(tr.x[:k]), torch.as_tensor(tr.y[:k]))
    err, worst = finite_diff_gradient_check(model, batch, args.epsilon, return_details=True)
    ok = err < GRADCHECK_TOL
    print(
        f"{'PASS' if ok else 'FAIL'} max_rel_error={err:.3e} tol={GRADCHECK_TOL:g} "
        f"params={n_params} rescaling={mcfg.gradient_rescaling_enabled} "
        f"stop_grad={mcfg.stop_gradient_enabled}"
    )
    if not ok and worst:
        print(f"worst parameter {worst[0]}[{worst[1]}]: analytic={worst[2]:.6e} fd={worst[3]:.6e}")
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_ablate(args) -> int:
    base = _load_config(args)
    out = Path(base.output_dir)
    settings = PRESETS[args.preset](base)
    grouped = {}
    rows = []
    for name, cfg in settings:
        run_dir = out / _slug(name)
        result = pipeline.full_pipeline(cfg.replace(output_dir=str(run_dir)), run_dir)
        grouped[name] = result
        for r in result["anytime_curve"]:
            rows.append({"setting": name, "mode": "anytime", "x": r["cost"], "accuracy": r["accuracy"]})
        for r in result["budget_curve"]:
            rows.append({"setting": name, "mode": "budgeted", "x": r["avg_cost"], "accuracy": r["accuracy"]})
        accs = ", ".join(f"{a:.3f}" for a in result["anytime"]["per_exit_accuracy"])
        print(f"{name}: anytime acc [{accs}]")
    write_json(out / "ablation.json", {"preset": args.preset, "settings": grouped})
    _write_curve(out / "curves.csv", rows)
    if args.plot:
        _plot(rows, out / "curves.png")
    return EXIT_OK


def _slug(name: str) -> str:
    return name.replace("=", "_").replace(".", "p")


def _plot(rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, mode in zip(axes, ("anytime", "budgeted")):
        for setting in dict.fromkeys(r["setting"] for r in rows):
            pts = [(r["x"], r["accuracy"]) for r in rows if r["setting"] == setting and r["mode"] == mode]
            if pts:
                xs, ys = zip(*sorted(pts))
                ax.plot(xs, ys, marker="o", label=setting)
        ax.set_xlabel("multiply-adds per sample")
        ax.set_ylabel("accuracy")
        ax.set_title(mode)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="boostnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("dump-logits", help="write per-exit ensemble logits for a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_dump_logits)

    p = sub.add_parser("calibrate", help="fit budgeted-batch policies on a holdout dump")
    p.add_argument("--logits", required=True)
    p.add_argument("--budgets", help="comma-separated average-cost budgets")
    p.add_argument("--points", type=int, default=8, help="budget count when --budgets is omitted")
    p.add_argument("--checkpoint")
    p.add_argument("--costs", help="comma-separated per-block costs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", help="anytime or budgeted-batch evaluation of a dump")
    p.add_argument("--logits", required=True)
    p.add_argument("--anytime", action="store_true")
    p.add_argument("--policies", nargs="*")
    p.add_argument("--checkpoint")
    p.add_argument("--costs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the joint-loss gradient")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epsilon", type=float, default=1e-4, help="central-difference step")
    p.add_argument("--batch", type=int, default=16)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="run an ablation preset end to end")
    p.add_argument("--preset", required=True, choices=sorted(PRESETS))
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, InfeasibleBudgetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
