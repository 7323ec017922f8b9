"""Budgeted-batch calibration: exit probability, confidence thresholds, adjustment.

With a fraction ``p`` of the surviving samples leaving at every exit, the
expected per-sample cost is ``sum_n (1 - p)**(n - 1) * C_n``.  Given a budget
``tau`` the exit probability is solved for, then per-exit confidence
thresholds are fitted on a holdout set by simulating the survivor population.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from boostnet.model import confidence

P_FLOOR = float(np.finfo(np.float64).tiny)


class InfeasibleBudgetError(ValueError):
    """The budget is below the cost of the first exit."""


class CalibrationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CostProfile:
    costs: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "costs", tuple(float(c) for c in self.costs))
        if not self.costs:
            raise ValueError("cost profile needs at least one exit")
        if any(not c > 0 for c in self.costs):
            raise ValueError("all block costs must be > 0")

    @property
    def cumulative(self) -> tuple[float, ...]:
        return tuple(np.cumsum(self.costs).tolist())

    @property
    def total(self) -> float:
        return self.cumulative[-1]

    def __len__(self):
        return len(self.costs)

    def to_dict(self) -> dict:
        return {"costs": list(self.costs), "cumulative": list(self.cumulative)}

    @classmethod
    def from_dict(cls, d: dict) -> "CostProfile":
        return cls(tuple(d["costs"]))


@dataclass(frozen=True)
class BudgetPolicy:
    tau: float
    p: float
    thresholds: tuple[float, ...]
    expected_avg_cost: float
    cost_profile: CostProfile
    saturated: bool = False
    inherited_from_tau: float | None = None

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "p": self.p,
            "thresholds": list(self.thresholds),
            "expected_avg_cost": self.expected_avg_cost,
            "cost_profile": self.cost_profile.to_dict(),
            "saturated": self.saturated,
            "inherited_from_tau": self.inherited_from_tau,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BudgetPolicy":
        return cls(
            tau=float(d["tau"]),
            p=float(d["p"]),
            thresholds=tuple(float(t) for t in d["thresholds"]),
            expected_avg_cost=float(d["expected_avg_cost"]),
            cost_profile=CostProfile.from_dict(d["cost_profile"]),
            saturated=bool(d.get("saturated", False)),
            inherited_from_tau=d.get("inherited_from_tau"),
        )


@dataclass
class HoldoutConfidences:
    """Per-exit confidences and predictions for every holdout sample.

    Arrays are ``[samples, exits]``.  Which samples actually reach an exit is
    decided later by simulating the thresholds.
    """

    confidences: np.ndarray
    predictions: np.ndarray
    labels: np.ndarray
    sample_ids: list = field(default=None)

    def __post_init__(self):
        self.confidences = np.asarray(self.confidences, dtype=np.float64)
        self.predictions = np.asarray(self.predictions, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.confidences.ndim != 2 or self.confidences.shape != self.predictions.shape:
            raise ValueError("confidences and predictions must both be [samples, exits]")
        if len(self.labels) != len(self.confidences):
            raise ValueError("labels length differs from sample count")
        if self.sample_ids is None:
            self.sample_ids = list(range(len(self.labels)))

    @property
    def num_exits(self) -> int:
        return self.confidences.shape[1]

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_logits(cls, logits, labels, sample_ids=None) -> "HoldoutConfidences":
        """Build from ensemble logits shaped ``[samples, exits, classes]``."""
        z = np.asarray(logits, dtype=np.float64)
        if z.ndim != 3:
            raise ValueError("logits must be [samples, exits, classes]")
        return cls(confidence(z), z.argmax(axis=-1), labels, sample_ids)


def _as_profile(costs) -> CostProfile:
    return costs if isinstance(costs, CostProfile) else CostProfile(tuple(costs))


def average_cost(p: float, costs) -> float:
    """Expected per-sample cost when a fraction ``p`` of survivors exits at each block.

    ``p = 0`` is accepted as the no-early-exit limit.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"exit probability must be in (0, 1], got {p}")
    c = np.asarray(_as_profile(costs).costs)
    q = 1.0 - p
    return float(np.sum(q ** np.arange(len(c)) * c))


def _average_cost_derivative(p: float, c: np.ndarray) -> float:
    n = np.arange(len(c))
    q = 1.0 - p
    # d/dp (1-p)^n = -n (1-p)^(n-1); the n = 0 term vanishes
    return float(-np.sum(n[1:] * q ** (n[1:] - 1) * c[1:]))


class ExitProbability(NamedTuple):
    p: float
    saturated: bool
    iterations: int
    newton_steps: int


def solve_exit_probability(
    tau: float, costs, tol: float = 1e-13, max_iter: int = 200
) -> ExitProbability:
    """Find ``p`` with ``average_cost(p) == tau`` (safeguarded Newton from p = 0.5).

    Raises InfeasibleBudgetError when ``tau`` is below the first exit's cost.
    Budgets at or above the full-depth cost saturate to the smallest positive
    ``p``.
    """
    profile = _as_profile(costs)
    c = np.asarray(profile.costs)
    if not math.isfinite(tau) or tau < c[0]:
        raise InfeasibleBudgetError(f"budget {tau} is below the first exit cost {c[0]}")
    if tau >= float(c.sum()):
        return ExitProbability(P_FLOOR, True, 0, 0)
    if tau == c[0]:
        return ExitProbability(1.0, False, 0, 0)

    def g(p):
        return average_cost(p, profile) - tau

    # g is strictly decreasing: g(0) > 0 > g(1)
    lo, hi = 0.0, 1.0
    p = 0.5
    newton_steps = 0
    for it in range(1, max_iter + 1):
        gp = g(p)
        if abs(gp) <= tol * tau:
            return ExitProbability(p, False, it, newton_steps)
        if gp > 0:
            lo = p
        else:
            hi = p
        dg = _average_cost_derivative(p, c)
        step_ok = False
        if dg < 0:
            cand = p - gp / dg
            if lo < cand < hi:
                p, step_ok = cand, True
                newton_steps += 1
        if not step_ok:
            p = 0.5 * (lo + hi)
        if hi - lo <= 4 * np.finfo(float).eps:
            break
    return ExitProbability(p, False, max_iter, newton_steps)


def assign_exits(confidences: np.ndarray, thresholds: Sequence[float]) -> np.ndarray:
    """0-based exit per sample: first exit whose confidence meets its threshold."""
    conf = np.asarray(confidences, dtype=np.float64)
    S, N = conf.shape
    if len(thresholds) != N - 1:
        raise ValueError(f"need {N - 1} thresholds for {N} exits, got {len(thresholds)}")
    exits = np.full(S, N - 1, dtype=np.int64)
    alive = np.ones(S, dtype=bool)
    for n, thr in enumerate(thresholds):
        leave = alive & (conf[:, n] >= thr)
        exits[leave] = n
        alive &= ~leave
    return exits


def calibrate_thresholds(holdout: HoldoutConfidences, p: float) -> list[float]:
    """Per-exit thresholds so that a fraction >= ``p`` of the survivors leaves at each exit.

    Thresholds are observed confidences (an order statistic of the survivors),
    and the exit test is inclusive, so ties all leave together.  An exit with
    no survivors gets threshold 1.0 and a CalibrationWarning, unless ``p == 1``
    where emptying the later exits is the intent.
    """
    if len(holdout) == 0:
        raise ValueError("holdout is empty")
    if not 0.0 < p <= 1.0:
        raise ValueError(f"exit probability must be in (0, 1], got {p}")
    conf = holdout.confidences
    alive = np.ones(len(holdout), dtype=bool)
    thresholds = []
    for n in range(holdout.num_exits - 1):
        m = int(alive.sum())
        if m == 0:
            if p < 1.0:
                warnings.warn(f"no samples reach exit {n + 1}", CalibrationWarning, stacklevel=2)
            thresholds.append(1.0)
            continue
        # guard against p*m landing a hair above an integer
        k = min(m, math.ceil(p * m - 1e-9))
        if k <= 0:
            thresholds.append(1.0)
        else:
            survivors = np.sort(conf[alive, n])[::-1]
            thresholds.append(float(survivors[k - 1]))
        alive &= ~(conf[:, n] >= thresholds[-1])
    return thresholds


def holdout_accuracy(holdout: HoldoutConfidences, thresholds: Sequence[float]) -> float:
    exits = assign_exits(holdout.confidences, thresholds)
    preds = holdout.predictions[np.arange(len(holdout)), exits]
    return float(np.mean(preds == holdout.labels))


def make_policy(tau: float, costs, holdout: HoldoutConfidences) -> BudgetPolicy:
    """Solve ``p`` for ``tau`` and fit thresholds on ``holdout``."""
    profile = _as_profile(costs)
    sol = solve_exit_probability(tau, profile)
    thresholds = calibrate_thresholds(holdout, sol.p)
    return BudgetPolicy(
        tau=float(tau),
        p=sol.p,
        thresholds=tuple(thresholds),
        expected_avg_cost=average_cost(sol.p, profile),
        cost_profile=profile,
        saturated=sol.saturated,
    )


def adjust_thresholds_non_degrading(
    policies: Sequence[BudgetPolicy], holdout: HoldoutConfidences
) -> list[BudgetPolicy]:
    """Let a larger budget keep the previous thresholds unless its own strictly help.

    The adjusted holdout accuracy is the running maximum of the raw ones.
    """
    taus = [pol.tau for pol in policies]
    if any(b < a for a, b in zip(taus, taus[1:])):
        raise ValueError("policies must be sorted by increasing budget")
    out = []
    best = None
    best_acc = -math.inf
    for pol in policies:
        acc = holdout_accuracy(holdout, pol.thresholds)
        if best is None or acc > best_acc:
            best, best_acc = pol, acc
            out.append(pol)
        else:
            out.append(
                dataclasses.replace(
                    pol,
                    p=best.p,
                    thresholds=best.thresholds,
                    expected_avg_cost=best.expected_avg_cost,
                    saturated=best.saturated,
                    inherited_from_tau=best.tau,
                )
            )
    return out
