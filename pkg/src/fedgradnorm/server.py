"""Parameter-server side of a round: loss-weight balancing and aggregation.

The balancing loss is ``sum_i |p_i * n_i - T_i|`` where ``n_i`` is client i's
tail gradient norm and ``T_i = mean_j(p_j * n_j) * r_i**gamma`` is the target.
Targets are held constant while differentiating with respect to ``p``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .client import GradReport
from .numerics import AdamState, ParamVector

FEDGRADNORM = "fedgradnorm"
EQUAL = "equal"
STRATEGIES = (FEDGRADNORM, EQUAL)

WEIGHT_FLOOR = 1e-3
# |actual - target| at or below this fraction of max(|actual|, |target|)
# counts as being on the kink, where the subgradient is 0
KINK_RTOL = 1e-12


@dataclass(frozen=True)
class GradNormTargets:
    mean_norm: float
    rel_rates: np.ndarray
    targets: np.ndarray
    actual: np.ndarray


@dataclass(frozen=True)
class RoundInfo:
    """Server-side snapshot of one round."""

    targets: GradNormTargets
    fgrad: float
    weights: np.ndarray
    # p_i * n_i with the weights after this round's update
    actual: np.ndarray
    adam: AdamState | None = None


def check_weights(p, floor: float = WEIGHT_FLOOR, tol: float = 1e-9) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("weights must be a non-empty vector")
    if abs(p.sum() - p.size) > tol or p.min() < floor:
        raise ValueError(f"weights {p} violate sum == {p.size} or floor {floor}")
    return p


def _report_arrays(reports: Sequence[GradReport]) -> tuple[np.ndarray, np.ndarray]:
    norms = np.array([r.tail_norm for r in reports], dtype=np.float64)
    rates = np.array([r.inverse_rate for r in reports], dtype=np.float64)
    if not (np.all(np.isfinite(norms)) and np.all(np.isfinite(rates))):
        raise ValueError("client reports contain non-finite values")
    return norms, rates


def compute_targets(
    reports: Sequence[GradReport], weights, gamma: float
) -> GradNormTargets:
    if len(reports) < 2:
        raise ValueError("gradient-norm balancing needs at least two clients")
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    p = np.asarray(weights, dtype=np.float64)
    if p.shape != (len(reports),):
        raise ValueError(f"{p.size} weights for {len(reports)} reports")
    norms, rates = _report_arrays(reports)
    actual = p * norms
    # identical entries are handled exactly: a float mean of n equal values
    # can be off by one ulp, which would break the symmetric fixed point
    mean_norm = float(actual[0] if np.all(actual == actual[0]) else np.mean(actual))
    if np.all(rates == rates[0]):
        rel = np.ones_like(rates)
    else:
        rel = rates / np.mean(rates)
    return GradNormTargets(mean_norm, rel, mean_norm * rel**gamma, actual)


def fgrad_value(
    reports: Sequence[GradReport], weights, targets: GradNormTargets, norm: str = "l1"
) -> float:
    norms, _ = _report_arrays(reports)
    diff = np.asarray(weights, dtype=np.float64) * norms - targets.targets
    if norm == "l1":
        return float(np.sum(np.abs(diff)))
    if norm == "sq":
        return float(np.sum(diff * diff))
    raise ValueError(f"unknown balancing norm {norm!r}")


def fgrad_gradient(
    reports: Sequence[GradReport], weights, targets: GradNormTargets, norm: str = "l1"
) -> np.ndarray:
    """d F_grad / d p with the targets frozen."""
    norms, _ = _report_arrays(reports)
    actual = np.asarray(weights, dtype=np.float64) * norms
    diff = actual - targets.targets
    if norm == "sq":
        return 2.0 * norms * diff
    if norm != "l1":
        raise ValueError(f"unknown balancing norm {norm!r}")
    scale = np.maximum(np.abs(actual), np.abs(targets.targets))
    sign = np.where(np.abs(diff) <= KINK_RTOL * scale, 0.0, np.sign(diff))
    return norms * sign


def normalize_weights(p, floor: float = WEIGHT_FLOOR) -> np.ndarray:
    """Clamp at ``floor`` and rescale so the weights sum to their count.

    Entries pushed below the floor by the rescale are pinned there and the
    rest rescaled again, which keeps the ordering of the weights.
    """
    p = np.maximum(np.asarray(p, dtype=np.float64), floor)
    n = p.size
    if n * floor >= n:
        raise ValueError("weight floor must be below 1")
    if np.all(p <= floor):
        warnings.warn("all loss weights hit the floor; resetting to uniform", RuntimeWarning)
        return np.ones(n)
    scaled = p * (n / p.sum())
    if scaled.min() >= floor:
        return scaled
    pinned = np.zeros(n, dtype=bool)
    while True:
        pinned |= scaled < floor
        free = ~pinned
        budget = n - floor * pinned.sum()
        scaled = np.where(pinned, floor, p * (budget / p[free].sum()))
        if scaled[free].min() >= floor:
            return scaled


def update_weights(
    weights, grad, alpha: float, floor: float = WEIGHT_FLOOR
) -> np.ndarray:
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    p = np.asarray(weights, dtype=np.float64)
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != p.shape:
        raise ValueError("gradient and weights differ in shape")
    return normalize_weights(p - alpha * g, floor)


def adam_update_weights(
    weights, grad, alpha: float, state: AdamState | None, floor: float = WEIGHT_FLOOR
) -> tuple[np.ndarray, AdamState]:
    """Like :func:`update_weights` but the step is Adam-normalised."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    p = np.asarray(weights, dtype=np.float64)
    state = AdamState.zeros(p.size) if state is None else state
    delta, state = state.step(np.asarray(grad, dtype=np.float64), alpha)
    return normalize_weights(p - delta, floor), state


def aggregate(reports: Sequence[GradReport], weights) -> np.ndarray:
    """(1/N) sum_i p_i g_i, summed in ascending client order."""
    p = np.asarray(weights, dtype=np.float64)
    ordered = sorted(reports, key=lambda r: r.client_id)
    acc = np.zeros(ordered[0].avg_grad.values.size)
    for w, rep in zip(p, ordered):
        acc += w * rep.avg_grad.values
    return acc / len(ordered)


def aggregate_and_step(
    shared: ParamVector, reports: Sequence[GradReport], weights, beta: float
) -> ParamVector:
    if not reports:
        raise ValueError("no reports to aggregate")
    for rep in reports:
        if not rep.avg_grad.same_layout(shared):
            raise ValueError(f"client {rep.client_id}: gradient layout differs from shared")
    if len(np.atleast_1d(weights)) != len(reports):
        raise ValueError("one weight per report is required")
    return shared.with_values(shared.values - beta * aggregate(reports, weights))


def run_round(
    strategy: str,
    shared: ParamVector,
    reports: Sequence[GradReport],
    weights,
    gamma: float,
    alpha: float,
    beta: float,
    *,
    norm: str = "l1",
    weight_steps: int = 1,
    floor: float = WEIGHT_FLOOR,
    weight_optimizer: str = "sgd",
    adam: AdamState | None = None,
) -> tuple[ParamVector, np.ndarray, RoundInfo]:
    """Targets, weight update, aggregation and shared step, in that order.

    Reports are reordered by client id; ``weights[i]`` belongs to the i-th
    client in that order. With ``weight_optimizer="adam"`` the moment state
    is carried between rounds through ``adam`` and ``RoundInfo.adam``.
    """
    if weight_optimizer not in ("sgd", "adam"):
        raise ValueError(f"unknown weight optimizer {weight_optimizer!r}")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    reports = sorted(reports, key=lambda r: r.client_id)
    p = np.asarray(weights, dtype=np.float64)
    if strategy == EQUAL:
        p = np.ones(len(reports))
        targets = compute_targets(reports, p, gamma)
    else:
        for _ in range(weight_steps):
            targets = compute_targets(reports, p, gamma)
            grad = fgrad_gradient(reports, p, targets, norm)
            if weight_optimizer == "adam":
                p, adam = adam_update_weights(p, grad, alpha, adam, floor)
            else:
                p = update_weights(p, grad, alpha, floor)
    value = fgrad_value(reports, p, targets, norm)
    new_shared = aggregate_and_step(shared, reports, p, beta)
    actual = p * np.array([r.tail_norm for r in reports])
    return new_shared, p, RoundInfo(targets, value, p, actual, adam)


def global_objective(losses, weights) -> float:
    """(1/N) sum_i p_i F_i."""
    p = np.asarray(weights, dtype=np.float64)
    return math.fsum(p * np.asarray(losses, dtype=np.float64)) / p.size
