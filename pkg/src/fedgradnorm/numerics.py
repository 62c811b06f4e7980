"""Dense fully-connected networks with hand-written backpropagation.

Parameters for a whole network live in one flat float64 vector (``ParamVector``)
together with a layout describing how the vector splits into per-layer weight
and bias blocks. Weights are stored as ``(fan_in, fan_out)`` so a batch ``X`` of
shape ``(rows, fan_in)`` maps to ``X @ W + b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")


class ShapeError(ValueError):
    """Raised when an array does not fit the network or layout it is used with."""


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Coerce ``data`` to a finite 2-D float64 array."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a fully-connected network.

    ``activations[l]`` is applied after layer ``l``. Layers without an entry are
    linear, so ``activations`` may cover only the hidden layers.
    """

    layer_widths: tuple[int, ...]
    activations: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.layer_widths) < 2:
            raise ValueError("an MLP needs at least an input and an output width")
        if any(w < 1 for w in self.layer_widths):
            raise ValueError(f"layer widths must be >= 1, got {self.layer_widths}")
        if len(self.activations) > self.n_layers:
            raise ValueError(
                f"{len(self.activations)} activations given for {self.n_layers} layers"
            )
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}; expected one of {ACTIVATIONS}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def input_width(self) -> int:
        return self.layer_widths[0]

    @property
    def output_width(self) -> int:
        return self.layer_widths[-1]

    def activation(self, layer: int) -> str:
        return self.activations[layer] if layer < len(self.activations) else "identity"

    def layout(self) -> tuple[Segment, ...]:
        return self._layout

    @cached_property
    def _layout(self) -> tuple[Segment, ...]:
        segs = []
        for layer in range(self.n_layers):
            fan_in, fan_out = self.layer_widths[layer], self.layer_widths[layer + 1]
            segs.append(Segment(layer, "weight", (fan_in, fan_out)))
            segs.append(Segment(layer, "bias", (fan_out,)))
        return tuple(segs)

    @property
    def n_params(self) -> int:
        return sum(s.size for s in self.layout())


@dataclass(frozen=True)
class Segment:
    layer: int
    kind: str  # "weight" or "bias"
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat parameter (or gradient) vector with its layer layout.

    ``tail_start`` is the index of the first layout segment belonging to the
    tail block used for gradient-norm balancing; the tail runs to the end of
    the layout.
    """

    values: np.ndarray
    layout: tuple[Segment, ...]
    tail_start: int = field(default=-1)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).ravel()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", tuple(self.layout))
        expected = sum(s.size for s in self.layout)
        if values.size != expected:
            raise ShapeError(f"values length {values.size} != layout size {expected}")
        tail = self.tail_start
        if tail < 0:
            # default: last layer's weight and bias
            last_layer = self.layout[-1].layer if self.layout else 0
            tail = next(
                (i for i, s in enumerate(self.layout) if s.layer == last_layer), 0
            )
        if not 0 <= tail < max(len(self.layout), 1):
            raise ValueError(f"tail segment index {tail} outside layout")
        object.__setattr__(self, "tail_start", tail)

    def __len__(self) -> int:
        return self.values.size

    @cached_property
    def _offsets(self) -> tuple[tuple[int, int], ...]:
        out, pos = [], 0
        for s in self.layout:
            out.append((pos, pos + s.size))
            pos += s.size
        return tuple(out)

    def offsets(self) -> list[tuple[int, int]]:
        return list(self._offsets)

    def blocks(self) -> list[np.ndarray]:
        """Read-only views of every segment, reshaped."""
        return [
            self.values[a:b].reshape(s.shape)
            for (a, b), s in zip(self._offsets, self.layout)
        ]

    def tail_slice(self, start: int | None = None) -> slice:
        start = self.tail_start if start is None else start
        if not 0 <= start < len(self.layout):
            raise KeyError(f"unknown segment index {start} for layout of {len(self.layout)}")
        return slice(self._offsets[start][0], self.values.size)

    def with_values(self, values) -> ParamVector:
        return ParamVector(values, self.layout, self.tail_start)

    def zeros_like(self) -> ParamVector:
        return self.with_values(np.zeros_like(self.values))

    def same_layout(self, other: ParamVector) -> bool:
        return self.layout == other.layout and self.tail_start == other.tail_start

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.same_layout(other) and np.array_equal(self.values, other.values)

    __hash__ = None


Gradient = ParamVector


@dataclass(frozen=True)
class AdamState:
    """Adam moment estimates for a flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int) -> AdamState:
        return cls(np.zeros(size), np.zeros(size))

    def step(self, grad: np.ndarray, lr: float) -> tuple[np.ndarray, AdamState]:
        t = self.t + 1
        m = self.beta1 * self.m + (1 - self.beta1) * grad
        v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = m / (1 - self.beta1**t)
        v_hat = v / (1 - self.beta2**t)
        return lr * m_hat / (np.sqrt(v_hat) + self.eps), replace(self, m=m, v=v, t=t)


def tail_start_for(spec: MlpSpec, tail_layers: int = 1) -> int:
    """Segment index where the last ``tail_layers`` layers begin."""
    if not 1 <= tail_layers <= spec.n_layers:
        raise ValueError(f"tail_layers must be in [1, {spec.n_layers}], got {tail_layers}")
    return 2 * (spec.n_layers - tail_layers)


def pack(spec: MlpSpec, blocks: Sequence, tail_layers: int = 1) -> ParamVector:
    """Build a ParamVector from ``[W0, b0, W1, b1, ...]``."""
    layout = spec.layout()
    if len(blocks) != len(layout):
        raise ShapeError(f"expected {len(layout)} blocks, got {len(blocks)}")
    flat = []
    for seg, block in zip(layout, blocks):
        arr = np.asarray(block, dtype=np.float64)
        if arr.shape != seg.shape:
            raise ShapeError(
                f"layer {seg.layer} {seg.kind}: expected shape {seg.shape}, got {arr.shape}"
            )
        flat.append(arr.ravel())
    return ParamVector(np.concatenate(flat), layout, tail_start_for(spec, tail_layers))


def init_params(spec: MlpSpec, rng: np.random.Generator, tail_layers: int = 1) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    blocks = []
    for seg in spec.layout():
        if seg.kind == "weight":
            fan_in, fan_out = seg.shape
            a = np.sqrt(6.0 / (fan_in + fan_out))
            blocks.append(rng.uniform(-a, a, size=seg.shape))
        else:
            blocks.append(np.zeros(seg.shape))
    return pack(spec, blocks, tail_layers)


def _check_params(spec: MlpSpec, params: ParamVector) -> list[np.ndarray]:
    if params.layout != spec.layout():
        raise ShapeError(
            f"parameter layout does not match network {spec.layer_widths}"
        )
    return params.blocks()


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activate_grad(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def _forward_trace(spec: MlpSpec, params: ParamVector, x: np.ndarray):
    blocks = _check_params(spec, params)
    x = as_matrix(x, "input")
    if x.shape[1] != spec.input_width:
        raise ShapeError(
            f"layer 0: input has {x.shape[1]} columns, expected {spec.input_width}"
        )
    acts, pre = [x], []
    a = x
    for layer in range(spec.n_layers):
        w, b = blocks[2 * layer], blocks[2 * layer + 1]
        z = a @ w + b
        a = _activate(spec.activation(layer), z)
        pre.append(z)
        acts.append(a)
    return blocks, pre, acts


def forward(spec: MlpSpec, params: ParamVector, inputs) -> np.ndarray:
    """Apply the network to every row of ``inputs``."""
    return _forward_trace(spec, params, inputs)[2][-1]


def backward_full(
    spec: MlpSpec, params: ParamVector, inputs, loss_grad
) -> tuple[Gradient, np.ndarray]:
    """Parameter gradient and input gradient for cotangent ``loss_grad``."""
    blocks, pre, acts = _forward_trace(spec, params, inputs)
    delta = as_matrix(loss_grad, "loss_grad")
    if delta.shape != acts[-1].shape:
        raise ShapeError(
            f"loss_grad shape {delta.shape} != output shape {acts[-1].shape}"
        )
    grads: list[np.ndarray] = [None] * (2 * spec.n_layers)
    for layer in reversed(range(spec.n_layers)):
        delta = delta * _activate_grad(spec.activation(layer), pre[layer], acts[layer + 1])
        grads[2 * layer] = acts[layer].T @ delta
        grads[2 * layer + 1] = delta.sum(axis=0)
        delta = delta @ blocks[2 * layer].T
    flat = np.concatenate([g.ravel() for g in grads])
    return params.with_values(flat), delta


def backward(spec: MlpSpec, params: ParamVector, inputs, loss_grad) -> Gradient:
    """Gradient of ``sum(loss_grad * forward(...))`` with respect to ``params``."""
    return backward_full(spec, params, inputs, loss_grad)[0]


def finite_diff_grad(
    loss_fn: Callable, params, step: float = 1e-5
):
    """Central-difference gradient of a scalar function.

    ``params`` may be a ParamVector (``loss_fn`` receives ParamVectors and a
    ParamVector is returned) or a plain 1-D array.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    is_pv = isinstance(params, ParamVector)
    theta = np.array(params.values if is_pv else params, dtype=np.float64).ravel()
    wrap = params.with_values if is_pv else (lambda v: v)

    def f(v):
        val = float(loss_fn(wrap(v)))
        if not np.isfinite(val):
            raise ValueError("loss function returned a non-finite value")
        return val

    grad = np.empty_like(theta)
    for i in range(theta.size):
        probe = theta.copy()
        probe[i] = theta[i] + step
        f_plus = f(probe)
        probe[i] = theta[i] - step
        f_minus = f(probe)
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return wrap(grad)


def restricted_norm(grad: Gradient, segment: int | None = None) -> float:
    """L2 norm of the tail block of ``grad`` (from ``segment`` to the end)."""
    return float(np.linalg.norm(grad.values[grad.tail_slice(segment)]))
