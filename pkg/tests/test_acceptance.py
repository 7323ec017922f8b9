"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Lines are collected in ``RESULTS`` and repeated in the terminal summary by
``conftest.pytest_terminal_summary`` so they show up without ``-s``.
"""

import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from boostnet.budget import (
    BudgetPolicy,
    CostProfile,
    HoldoutConfidences,
    adjust_thresholds_non_degrading,
    assign_exits,
    average_cost,
    holdout_accuracy,
    make_policy,
    solve_exit_probability,
)
from boostnet.config import RunConfig
from boostnet.data import load_dataset
from boostnet.evaluator import anytime_eval, budgeted_batch_eval
from boostnet.model import build_model, confidence, make_config
from boostnet.trainer import (
    TrainingConfig,
    finite_diff_gradient_check,
    iterate_batches,
    joint_loss,
    lr_at_epoch,
    make_optimizer,
    train,
)

RESULTS: list[str] = []


def report(num, name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num}: {name} ({detail})"
    RESULTS.append(line)
    print(line)
    assert ok, line


def rel_err(a, b, floor=1e-12):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def _batch(n, d, k, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(n, d, generator=g, dtype=torch.float64)
    y = torch.randint(0, k, (n,), generator=g)
    return x, y


def bisect_root(tau, costs, tol=1e-15):
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        val = sum(c * (1 - mid) ** i for i, c in enumerate(costs)) - tau
        lo, hi = (mid, hi) if val > 0 else (lo, mid)
    return 0.5 * (lo + hi)


def test_1_rescaling_identity():
    start = time.perf_counter()
    worst = 0.0
    for stop_grad in (True, False):
        base = make_config("multi-exit-mlp", (4,), (7, 6, 5), 3, stop_gradient_enabled=stop_grad)
        x, y = _batch(20, 4, 3, seed=2)
        on = build_model(base.replace(gradient_rescaling_enabled=True), seed=5)
        off = build_model(base.replace(gradient_rescaling_enabled=False), seed=5)
        s_on = on.forward_all_exits(x)
        total = joint_loss(s_on, y, on.config.specs).total
        g_on = torch.autograd.grad(total, s_on.features)
        N = 3
        for n in range(1, N + 1):
            # per-loss gradients at the block-n output without rescaling, summed over exits n..N
            acc = torch.zeros_like(s_on.features[n - 1])
            for i in range(n, N + 1):
                s_off = off.forward_all_exits(x)
                loss_i = F.cross_entropy(s_off.ensemble_logits[i - 1], y)
                (g,) = torch.autograd.grad(loss_i, s_off.features[n - 1])
                acc += g
            expected = acc / (N - n + 1)
            worst = max(worst, rel_err(g_on[n - 1].numpy(), expected.numpy(), floor=1e-14))
    elapsed = time.perf_counter() - start
    report(1, "gradient rescaling identity", worst < 1e-6 and elapsed < 5,
           f"max rel err {worst:.2e} < 1e-6, {elapsed:.2f}s < 5s")


def test_2_stop_gradient_nullity():
    start = time.perf_counter()
    cfg = make_config("multi-exit-mlp", (3,), (6, 5, 4), 3)
    model = build_model(cfg, seed=1)
    x, y = _batch(16, 3, 3, seed=3)
    N = cfg.num_exits
    eps = 1e-5
    all_zero = True
    max_fd = 0.0
    own_head_err = 0.0
    with torch.no_grad():
        frozen = model.forward_all_exits(x).ensemble_logits
    for n in range(2, N + 1):
        state = model.forward_all_exits(x)
        loss_n = F.cross_entropy(state.ensemble_logits[n - 1], y)
        heads = [list(model.heads[m].parameters()) for m in range(n)]
        grads = torch.autograd.grad(loss_n, [p for hp in heads for p in hp], allow_unused=True)
        grads = iter(grads)
        for m in range(n):
            for p in heads[m]:
                g = next(grads)
                g = torch.zeros_like(p) if g is None else g
                if m < n - 1:
                    all_zero &= bool(torch.count_nonzero(g) == 0)
                    continue
                # own head: nonzero and matched by differences, as a positive control
                fd = _fd_loss_n(model, x, y, n, frozen, p, eps)
                own_head_err = max(own_head_err, rel_err(g.reshape(-1).numpy(), fd, floor=1e-8))
        for m in range(n - 1):
            for p in heads[m]:
                max_fd = max(max_fd, float(np.max(np.abs(_fd_loss_n(model, x, y, n, frozen, p, eps)))))
    elapsed = time.perf_counter() - start
    ok = all_zero and max_fd < 1e-6 and own_head_err < 1e-5 and elapsed < 10
    report(2, "stop-gradient nullity", ok,
           f"exact zeros={all_zero}, max |FD| {max_fd:.1e} < 1e-6, "
           f"own-head FD rel err {own_head_err:.1e}, {elapsed:.2f}s < 10s")


def _fd_loss_n(model, x, y, n, frozen, p, eps):
    """Central differences of L_n with F_{n-1} held at its unperturbed value."""
    t = model.config.temperatures[n - 1]

    def loss():
        h = x
        for k in range(n):
            h = model.blocks[k](h)
        f = model.heads[n - 1](h)
        return float(F.cross_entropy(t * frozen[n - 2] + f, y))

    out = []
    with torch.no_grad():
        flat = p.view(-1)
        for j in range(flat.numel()):
            orig = flat[j].item()
            flat[j] = orig + eps
            plus = loss()
            flat[j] = orig - eps
            minus = loss()
            flat[j] = orig
            out.append((plus - minus) / (2 * eps))
    return np.array(out)


def _plain_fd_total(model, x, y, eps):
    """Central differences of the true total loss, no oracle shortcuts."""
    grads = []
    with torch.no_grad():
        for p in model.parameters():
            flat = p.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + eps
                plus = float(joint_loss(model.forward_all_exits(x), y, model.config.specs).total)
                flat[j] = orig - eps
                minus = float(joint_loss(model.forward_all_exits(x), y, model.config.specs).total)
                flat[j] = orig
                grads.append((plus - minus) / (2 * eps))
    return np.array(grads)


def test_3_full_finite_difference():
    start = time.perf_counter()
    base = make_config("multi-exit-mlp", (2,), (16, 16, 16, 16), 3)
    x, y = _batch(32, 2, 3, seed=4)
    n_params = sum(p.numel() for p in build_model(base, 0).parameters())
    errs = {}
    for rescale in (False, True):
        for stop in (False, True):
            m = build_model(base.replace(gradient_rescaling_enabled=rescale, stop_gradient_enabled=stop), 0)
            errs[(rescale, stop)] = finite_diff_gradient_check(m, (x, y), epsilon=1e-5)
    # the fully plain model has the textbook gradient: compare against raw differences
    plain = build_model(base.replace(gradient_rescaling_enabled=False, stop_gradient_enabled=False), 0)
    total = joint_loss(plain.forward_all_exits(x), y, plain.config.specs).total
    analytic = torch.cat([g.reshape(-1) for g in torch.autograd.grad(total, list(plain.parameters()))])
    errs["plain"] = rel_err(analytic.numpy(), _plain_fd_total(plain, x, y, 1e-5), floor=1e-8)
    worst = max(errs.values())
    elapsed = time.perf_counter() - start
    report(3, "full finite-difference check", worst < 1e-5 and n_params <= 5000 and elapsed < 60,
           f"{n_params} params, max rel err {worst:.2e} < 1e-5 over 4 flag combos + raw FD, "
           f"{elapsed:.1f}s < 60s")


def test_4_zero_temperature_reduction():
    start = time.perf_counter()
    x_np, y_np = load_dataset("two-moons", seed=0, n_samples=320, noise=0.2)
    tcfg = TrainingConfig(epochs=20, batch_size=32, learning_rate=0.1, decay_milestones=(10, 15), seed=3)
    cfg = make_config("multi-exit-mlp", (2,), (8, 8, 8), 2, temperature=0.0,
                      gradient_rescaling_enabled=False)
    model, metrics = train(build_model(cfg, seed=7), (x_np, y_np), tcfg)

    # control: plain chain of blocks, each head trained on its own logits, no ensemble at all
    control = build_model(cfg, seed=7)
    blocks, heads = control.blocks, control.heads
    opt = make_optimizer(control, tcfg)
    x = torch.as_tensor(x_np, dtype=torch.float64)
    y = torch.as_tensor(y_np, dtype=torch.long)
    control_losses = []
    for epoch, idx in iterate_batches(len(x), tcfg.batch_size, tcfg.epochs, tcfg.seed):
        for group in opt.param_groups:
            group["lr"] = lr_at_epoch(epoch, tcfg)
        idx_t = torch.from_numpy(idx)
        h = x[idx_t]
        losses = []
        for block, head in zip(blocks, heads):
            h = block(h)
            # batch mean of per-sample losses, the same reduction order as the trainer
            losses.append(F.cross_entropy(head(h), y[idx_t], reduction="none").mean())
        total = sum(1.0 * loss for loss in losses)
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        control_losses.append([float(loss.detach()) for loss in losses])

    steps_match = [m.per_exit_loss for m in metrics] == control_losses
    params_match = all(
        torch.equal(a, b) for a, b in zip(model.parameters(), control.parameters())
    )
    elapsed = time.perf_counter() - start
    ok = len(metrics) == 200 and steps_match and params_match and elapsed < 30
    report(4, "t=0 reduces to independent heads", ok,
           f"{len(metrics)} steps, per-step losses bitwise equal={steps_match}, "
           f"final params bitwise equal={params_match}, {elapsed:.2f}s < 30s")


def test_5_newton_raphson():
    rng = np.random.default_rng(2024)
    instances = []
    for _ in range(100):
        costs = rng.uniform(0.01, 100.0, size=rng.integers(2, 10))
        tau = costs[0] + rng.uniform(0.001, 0.999) * (costs.sum() - costs[0])
        instances.append((tau, costs))
    start = time.perf_counter()
    solutions = [solve_exit_probability(tau, c).p for tau, c in instances]
    worked = solve_exit_probability(2.0, (1, 1, 1, 1)).p
    elapsed = time.perf_counter() - start
    round_trip = max(abs(average_cost(p, c) - tau) / tau for p, (tau, c) in zip(solutions, instances))
    agreement = max(abs(p - bisect_root(tau, c)) for p, (tau, c) in zip(solutions, instances))
    worked_oracle = bisect_root(2.0, (1, 1, 1, 1))
    ok = round_trip <= 1e-10 and agreement <= 1e-9 and abs(worked - worked_oracle) <= 1e-9 and elapsed < 1
    report(5, "Newton exit probability", ok,
           f"round trip {round_trip:.1e}*tau <= 1e-10*tau, bisection gap {agreement:.1e} <= 1e-9, "
           f"worked p={worked:.10f} vs {worked_oracle:.10f}, {elapsed * 1e3:.0f}ms < 1s")


def test_6_calibration_fidelity():
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    S, N, C = 2000, 4, 10
    logits = rng.normal(size=(S, N, C)) * rng.uniform(0.5, 3.0, size=(1, N, 1))
    labels = rng.integers(0, C, S)
    holdout = HoldoutConfidences.from_logits(logits, labels)
    no_ties = all(len(np.unique(holdout.confidences[:, n])) == S for n in range(N))
    costs = CostProfile((3.0, 5.0, 2.0, 7.0))
    worst_gap, worst_ratio = 0.0, 0.0
    ok = no_ties
    for frac in (0.1, 0.3, 0.5, 0.7, 0.9):
        tau = costs.costs[0] + frac * (costs.total - costs.costs[0])
        pol = make_policy(tau, costs, holdout)
        rep, _ = budgeted_batch_eval(logits, labels, pol)
        alive = S
        for n in range(N - 1):
            left = rep.exit_histogram[n]
            # one sample per exit, in units of the alive count
            gap = abs(left - pol.p * alive)
            worst_gap = max(worst_gap, gap)
            ok &= gap <= 1.0
            alive -= left
        worst_ratio = max(worst_ratio, rep.realized_avg_cost / tau)
        ok &= rep.realized_avg_cost <= tau * 1.02
    elapsed = time.perf_counter() - start
    report(6, "calibration fidelity", ok and elapsed < 5,
           f"tie-free={no_ties}, worst exit-count gap {worst_gap:.3f} <= 1 sample, "
           f"worst realized/tau {worst_ratio:.4f} <= 1.02, {elapsed:.2f}s < 5s")


def test_7_non_degrading_adjustment():
    rng = np.random.default_rng(5)
    exact = True
    ladders = 0
    for trial in range(200):
        S, N = rng.integers(5, 60), rng.integers(2, 5)
        conf = rng.uniform(size=(S, N))
        preds = rng.integers(0, 2, size=(S, N))
        holdout = HoldoutConfidences(conf, preds, np.zeros(S, dtype=int))
        prof = CostProfile(tuple(rng.uniform(1, 5, size=N)))
        taus = np.sort(rng.uniform(1, 10, size=rng.integers(1, 8)))
        ladder = [
            BudgetPolicy(float(t), 0.5, tuple(rng.choice(conf[:, n]) for n in range(N - 1)), 1.0, prof)
            for t in taus
        ]
        raw = [_brute_accuracy(holdout, pol.thresholds) for pol in ladder]
        adjusted = [_brute_accuracy(holdout, pol.thresholds)
                    for pol in adjust_thresholds_non_degrading(ladder, holdout)]
        exact &= adjusted == list(np.maximum.accumulate(raw))
        exact &= all(a <= b for a, b in zip(adjusted, adjusted[1:]))
        ladders += 1
    report(7, "non-degrading adjustment", exact,
           f"{ladders} random ladders, adjusted == running max of raw (exact)")


def _brute_accuracy(holdout, thresholds):
    correct = 0
    for row, pred, label in zip(holdout.confidences, holdout.predictions, holdout.labels):
        n = next((i for i, t in enumerate(thresholds) if row[i] >= t), len(row) - 1)
        correct += int(pred[n] == label)
    return correct / len(holdout.labels)


def _trend_run(temperature, seed):
    cfg = RunConfig(
        dataset="two-moons",
        n_samples=2000,
        noise=0.3,
        widths=[16, 16, 16, 16],
        temperature=temperature,
        epochs=30,
        learning_rate=0.05,
        decay_milestones=[15, 22],
        seed=seed,
    )
    splits = cfg.splits()
    tr, te = splits["train"], splits["test"]
    model = build_model(cfg.model_config(tr.x.shape[1:], 2), seed)
    model, metrics = train(model, (tr.x, tr.y), cfg.training_config())
    with torch.no_grad():
        state = model.forward_all_exits(torch.as_tensor(te.x))
    rep = anytime_eval(state, te.y, CostProfile(tuple(model.config.block_costs)))
    tail = np.mean([m.valid_fraction for m in metrics[-100:]], axis=0)
    return rep.per_exit_accuracy[-1], tail


@pytest.mark.slow
def test_8_trend_reproduction():
    seeds = range(5)
    final_acc = {0.5: [], 1.0: []}
    valid = []
    slowest = 0.0
    for t in (0.5, 1.0):
        for seed in seeds:
            start = time.perf_counter()
            acc, tail = _trend_run(t, seed)
            slowest = max(slowest, time.perf_counter() - start)
            final_acc[t].append(acc)
            if t == 0.5:
                valid.append(tail)
    a_half, a_one = np.mean(final_acc[0.5]), np.mean(final_acc[1.0])
    v = np.mean(valid, axis=0)
    ok_a = a_half >= a_one
    ok_b = v[-1] <= v[0]
    report(8, "trend reproduction", ok_a and ok_b and slowest < 180,
           f"(a) final-exit acc t=0.5 {a_half:.4f} >= t=1.0 {a_one:.4f}: {ok_a}; "
           f"(b) valid fraction exit 4 {v[-1]:.3f} <= exit 1 {v[0]:.3f}: {ok_b}; "
           f"slowest run {slowest:.1f}s < 180s")


def test_9_cost_accounting():
    rng = np.random.default_rng(9)
    evaluations = 0
    exact = True
    for _ in range(300):
        S, N, C = rng.integers(1, 200), rng.integers(1, 6), rng.integers(2, 8)
        logits = rng.normal(size=(S, N, C)) * 3
        labels = rng.integers(0, C, S)
        costs = tuple(rng.uniform(0.1, 1e4, size=N))
        thresholds = tuple(rng.uniform(1 / C, 1.0, size=N - 1))
        pol = BudgetPolicy(1.0, 0.5, thresholds, 1.0, CostProfile(costs))
        rep, traces = budgeted_batch_eval(logits, labels, pol)
        # histogram from the traces, cumulative costs by running addition
        hist = [sum(tr.exit_index == n + 1 for tr in traces) for n in range(N)]
        cum, running = [], 0.0
        for c in costs:
            running += c
            cum.append(running)
        weighted = 0.0
        for h, c in zip(hist, cum):
            weighted += h * c
        exact &= rep.exit_histogram == hist
        exact &= rep.realized_avg_cost == weighted / S
        exact &= np.array_equal(assign_exits(confidence(logits), thresholds) + 1,
                                [tr.exit_index for tr in traces])
        evaluations += 1
    report(9, "cost accounting", exact,
           f"{evaluations} evaluations, realized_avg_cost == sum(hist*cumcost)/S exactly")


def test_holdout_accuracy_agrees_with_brute_force():
    rng = np.random.default_rng(0)
    conf = rng.uniform(size=(40, 3))
    h = HoldoutConfidences(conf, rng.integers(0, 2, size=(40, 3)), np.zeros(40, dtype=int))
    thr = (0.4, 0.7)
    assert holdout_accuracy(h, thr) == _brute_accuracy(h, thr)
