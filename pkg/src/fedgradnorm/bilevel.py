"""Iterative-differentiation (ITD) bilevel solver.

Each outer iteration warm-starts the lower variable from the previous outer
iteration, takes ``D`` gradient steps on the lower objective, then moves the
upper variable along the direct partial derivative of the upper objective at
the resulting lower iterate. No implicit (second-order) correction is added.

:func:`fedgradnorm_as_bilevel` casts a federated simulation in this form: the
upper variable is the shared network (client heads are re-fitted locally each
round, playing the inner ``min_h`` of the personalised objective), the lower
variable is the vector of loss weights and the lower objective is the
gradient-norm balancing loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import client as client_mod
from . import server
from .client import DivergenceError
from .numerics import finite_diff_grad

Fn = Callable[[np.ndarray, np.ndarray], float]
GradFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class BilevelProblem:
    upper_fn: Fn
    lower_fn: Fn
    upper_dim: int
    lower_dim: int
    upper_grad_u: GradFn
    lower_grad_l: GradFn
    upper_grad_l: GradFn | None = None
    lower_grad_u: GradFn | None = None
    validate: bool = True
    validate_tol: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.upper_dim < 1 or self.lower_dim < 1:
            raise ValueError("dimensions must be >= 1")
        if self.validate:
            self._check_oracles()

    def _check_oracles(self, probes: int = 3):
        rng = np.random.default_rng(self.seed)
        pairs = [
            ("upper_grad_u", self.upper_fn, self.upper_grad_u, "u"),
            ("lower_grad_l", self.lower_fn, self.lower_grad_l, "l"),
            ("upper_grad_l", self.upper_fn, self.upper_grad_l, "l"),
            ("lower_grad_u", self.lower_fn, self.lower_grad_u, "u"),
        ]
        for _ in range(probes):
            xu = rng.standard_normal(self.upper_dim)
            xl = rng.standard_normal(self.lower_dim)
            for name, fn, grad, wrt in pairs:
                if grad is None:
                    continue
                if wrt == "u":
                    fd = finite_diff_grad(lambda v: fn(v, xl), xu)
                else:
                    fd = finite_diff_grad(lambda v: fn(xu, v), xl)
                got = np.asarray(grad(xu, xl), dtype=np.float64)
                err = np.max(np.abs(got - fd)) / max(1.0, np.max(np.abs(fd)))
                if err > self.validate_tol:
                    raise ValueError(
                        f"{name} disagrees with finite differences (scaled error {err:.2e})"
                    )


@dataclass
class ItdConfig:
    K: int
    D: int
    alpha: float
    beta: float
    x_u0: np.ndarray
    x_l0: np.ndarray
    # applied to the lower iterate after every inner step
    lower_projection: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.K < 1 or self.D < 1:
            raise ValueError("K and D must be >= 1")
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("step sizes must be positive")
        self.x_u0 = np.array(self.x_u0, dtype=np.float64).ravel()
        self.x_l0 = np.array(self.x_l0, dtype=np.float64).ravel()


@dataclass(frozen=True)
class ItdStep:
    k: int
    x_u: np.ndarray  # x_u(k), before the outer update
    x_l_start: np.ndarray  # x_l^0(k)
    x_l: np.ndarray  # x_l^D(k)
    upper: float
    lower: float


@dataclass
class ItdResult:
    x_u: np.ndarray
    x_l: np.ndarray
    trace: list[ItdStep] = field(default_factory=list)


def _finite(v: np.ndarray, what: str, k: int) -> np.ndarray:
    if not np.all(np.isfinite(v)):
        raise DivergenceError(f"non-finite {what} at outer iteration {k}")
    return v


def itd_solve(problem: BilevelProblem, config: ItdConfig) -> ItdResult:
    if config.x_u0.size != problem.upper_dim or config.x_l0.size != problem.lower_dim:
        raise ValueError("initial points do not match the problem dimensions")
    x_u, x_l = config.x_u0.copy(), config.x_l0.copy()
    trace = []
    for k in range(config.K):
        start = x_l.copy()
        for _ in range(config.D):
            x_l = x_l - config.alpha * np.asarray(problem.lower_grad_l(x_u, x_l))
            if config.lower_projection is not None:
                x_l = config.lower_projection(x_l)
            _finite(x_l, "lower iterate", k)
        upper = float(problem.upper_fn(x_u, x_l))
        lower = float(problem.lower_fn(x_u, x_l))
        trace.append(ItdStep(k, x_u.copy(), start, x_l.copy(), upper, lower))
        x_u = _finite(
            x_u - config.beta * np.asarray(problem.upper_grad_u(x_u, x_l)), "upper iterate", k
        )
    return ItdResult(x_u, x_l, trace)


class _RoundOracle:
    """Runs the clients' local rounds once per distinct shared-parameter value."""

    def __init__(self, sim):
        self.sim = sim
        self.clients = list(sim.clients)
        self.rounds = 0
        self._key: np.ndarray | None = None
        self._reports = None

    def reports(self, x_u: np.ndarray):
        if self._key is not None and np.array_equal(self._key, x_u):
            return self._reports
        sim = self.sim
        shared = sim.shared.with_values(x_u)
        self.rounds += 1
        out = []
        for i, st in enumerate(self.clients):
            st, rep = client_mod.local_round(
                st,
                shared,
                sim.shared_spec,
                sim.tau_h,
                sim.tau_w,
                sim.beta,
                head_lr=sim.head_lr,
                batch_size=sim.batch_size,
                round_index=self.rounds,
            )
            self.clients[i] = st
            out.append(rep)
        self._key = np.array(x_u, copy=True)
        self._reports = out
        return out


def fedgradnorm_as_bilevel(sim) -> tuple[BilevelProblem, ItdConfig]:
    """Bilevel view of a prepared simulation (see :func:`harness.build_simulation`).

    Returns the problem and an ITD config whose lower steps use the server's
    weight normalisation as projection. ``K`` is ``sim.rounds`` and ``D`` is
    ``sim.weight_steps`` (1 for the plain protocol).
    The lower gradient holds the balancing targets fixed at the current
    weights, so it is not the derivative of ``lower_fn`` and oracle validation
    is disabled.
    """
    n = len(sim.clients)
    if sim.weight_optimizer != "sgd":
        raise ValueError("the bilevel view covers plain gradient steps on the weights only")
    if sim.strategy != server.FEDGRADNORM:
        raise ValueError("the bilevel view needs the fedgradnorm strategy")
    if any(st.initial_loss is None for st in sim.clients):
        raise ValueError("clients need their initial loss set before the bilevel view")
    oracle = _RoundOracle(sim)

    def upper_fn(x_u, p):
        reps = oracle.reports(x_u)
        return sum(w * r.raw_loss for w, r in zip(p, reps)) / n

    def upper_grad_u(x_u, p):
        reps = oracle.reports(x_u)
        g = np.zeros_like(x_u)
        for w, r in zip(p, reps):
            g = g + w * r.avg_grad.values
        return g / n

    def upper_grad_l(x_u, p):
        return np.array([r.raw_loss for r in oracle.reports(x_u)]) / n

    def lower_fn(x_u, p):
        reps = oracle.reports(x_u)
        targets = server.compute_targets(reps, p, sim.gamma)
        return server.fgrad_value(reps, p, targets, sim.norm)

    def lower_grad_l(x_u, p):
        reps = oracle.reports(x_u)
        targets = server.compute_targets(reps, p, sim.gamma)
        return server.fgrad_gradient(reps, p, targets, sim.norm)

    problem = BilevelProblem(
        upper_fn=upper_fn,
        lower_fn=lower_fn,
        upper_dim=len(sim.shared),
        lower_dim=n,
        upper_grad_u=upper_grad_u,
        lower_grad_l=lower_grad_l,
        upper_grad_l=upper_grad_l,
        validate=False,
    )
    problem.oracle = oracle
    config = ItdConfig(
        K=sim.rounds,
        D=sim.weight_steps,
        alpha=sim.alpha,
        beta=sim.beta,
        x_u0=sim.shared.values,
        x_l0=np.ones(n),
        lower_projection=lambda p: server.normalize_weights(p, sim.weight_floor),
    )
    return problem, config
