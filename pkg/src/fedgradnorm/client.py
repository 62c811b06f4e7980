"""A federated client: alternating head/shared updates and the per-round report."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import numerics
from .numerics import AdamState, MlpSpec, ParamVector
from .taskgen import LocalDataset, TaskSpec, loss_and_grad

# lower clamp for F_0 and for the loss used in inverse training rates
LOSS_FLOOR = 1e-8


class DivergenceError(RuntimeError):
    """A local loss became non-finite."""


@dataclass(frozen=True)
class ClientState:
    client_id: int
    task: TaskSpec
    data: LocalDataset
    head: ParamVector
    head_spec: MlpSpec
    initial_loss: float | None = None
    rng_seed: int = 0
    head_optimizer: str = "sgd"
    adam: AdamState | None = None

    def __post_init__(self):
        if self.head_optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown head optimizer {self.head_optimizer!r}")
        if self.initial_loss is not None and not self.initial_loss > 0:
            raise ValueError("initial_loss must be positive once set")


@dataclass(frozen=True)
class GradReport:
    """What a client sends to the server after one round."""

    client_id: int
    avg_grad: numerics.Gradient
    tail_norm: float
    inverse_rate: float
    raw_loss: float
    tiny_loss: bool = False


def full_loss(state: ClientState, shared: ParamVector, shared_spec: MlpSpec) -> float:
    rep = numerics.forward(shared_spec, shared, state.data.inputs)
    pred = numerics.forward(state.head_spec, state.head, rep)
    value, _ = loss_and_grad(state.task.kind, pred, state.data.labels)
    return value


def set_initial_loss(
    state: ClientState, shared: ParamVector, shared_spec: MlpSpec
) -> ClientState:
    """Record F_0 at the untrained model. May be called once per client."""
    if state.initial_loss is not None:
        raise RuntimeError(f"client {state.client_id}: initial loss already set")
    value = full_loss(state, shared, shared_spec)
    if not np.isfinite(value):
        raise DivergenceError(f"client {state.client_id}: non-finite initial loss")
    if value < LOSS_FLOOR:
        warnings.warn(
            f"client {state.client_id}: initial loss {value:.3g} clamped to {LOSS_FLOOR}",
            RuntimeWarning,
            stacklevel=2,
        )
        value = LOSS_FLOOR
    return replace(state, initial_loss=value)


def _checked(value, state: ClientState, where: str):
    if not np.all(np.isfinite(value)):
        raise DivergenceError(f"client {state.client_id}: non-finite values during {where}")
    return value


def _apply(spec: MlpSpec, params: ParamVector, x, state: ClientState, where: str):
    return _checked(numerics.forward(spec, params, x), state, where)


def local_round(
    state: ClientState,
    shared: ParamVector,
    shared_spec: MlpSpec,
    tau_h: int,
    tau_w: int,
    beta: float,
    *,
    head_lr: float | None = None,
    batch_size: int | None = None,
    round_index: int = 0,
) -> tuple[ClientState, GradReport]:
    """Run one round of local alternating minimisation.

    The head takes ``tau_h`` steps with the shared network frozen at ``shared``.
    Then a private copy of the shared parameters takes ``tau_w`` steps of size
    ``beta`` with the head frozen. Only the averaged shared gradient and loss
    statistics are returned; the local shared copy is dropped.
    """
    if tau_h < 1 or tau_w < 1:
        raise ValueError("tau_h and tau_w must be >= 1")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    if state.initial_loss is None:
        raise RuntimeError(f"client {state.client_id}: initial loss was never set")
    head_lr = beta if head_lr is None else head_lr
    kind = state.task.kind
    x_all, y_all = state.data.inputs, state.data.labels

    rng = None
    if batch_size is not None and batch_size < len(state.data):
        rng = np.random.default_rng([state.rng_seed, round_index])

    def batch():
        if rng is None:
            return slice(None)
        return rng.choice(len(state.data), size=batch_size, replace=False)

    # head phase: the representation is computed once from the received
    # shared parameters, so later head steps cannot see any other value
    rep_all = _apply(shared_spec, shared, x_all, state, "head update")
    head, adam = state.head, state.adam
    if state.head_optimizer == "adam" and adam is None:
        adam = AdamState.zeros(len(head))
    for _ in range(tau_h):
        idx = batch()
        rep, y = rep_all[idx], y_all[idx]
        pred = _apply(state.head_spec, head, rep, state, "head update")
        value, dpred = loss_and_grad(kind, pred, y)
        _checked(value, state, "head update")
        _checked(dpred, state, "head update")
        g = numerics.backward(state.head_spec, head, rep, dpred).values
        if state.head_optimizer == "adam":
            delta, adam = adam.step(g, head_lr)
        else:
            delta = head_lr * g
        head = head.with_values(head.values - delta)

    # shared phase on a local copy; F_k averages the loss after each step
    local = shared
    grad_sum = np.zeros(len(shared))
    loss_sum = 0.0
    for _ in range(tau_w):
        idx = batch()
        x, y = x_all[idx], y_all[idx]
        rep = _apply(shared_spec, local, x, state, "shared update")
        pred = _apply(state.head_spec, head, rep, state, "shared update")
        _, dpred = loss_and_grad(kind, pred, y)
        _checked(dpred, state, "shared update")
        _, drep = numerics.backward_full(state.head_spec, head, rep, dpred)
        _checked(drep, state, "shared update")
        g = numerics.backward(shared_spec, local, x, drep).values
        grad_sum += g
        local = local.with_values(local.values - beta * g)
        rep = _apply(shared_spec, local, x, state, "shared update")
        pred = _apply(state.head_spec, head, rep, state, "shared update")
        value, _ = loss_and_grad(kind, pred, y)
        loss_sum += _checked(value, state, "shared update")

    avg_grad = shared.with_values(grad_sum / tau_w)
    if not np.all(np.isfinite(avg_grad.values)):
        raise DivergenceError(f"client {state.client_id}: non-finite gradient")
    raw_loss = loss_sum / tau_w
    tiny = raw_loss < LOSS_FLOOR
    report = GradReport(
        client_id=state.client_id,
        avg_grad=avg_grad,
        tail_norm=numerics.restricted_norm(avg_grad),
        inverse_rate=max(raw_loss, LOSS_FLOOR) / state.initial_loss,
        raw_loss=raw_loss,
        tiny_loss=tiny,
    )
    return replace(state, head=head, adam=adam), report
