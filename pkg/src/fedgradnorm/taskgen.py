"""Synthetic multi-task problems, task losses and CSV dataset ingestion.

Every synthetic task shares one ground-truth representation network
``R^d -> R^d'`` and owns a linear head on top of it. A task's difficulty is the
Frobenius norm of its true head, so a task with ``difficulty_scale=10`` has
labels ten times larger than one with scale 1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import MlpSpec, ParamVector, ShapeError, forward, init_params

REGRESSION = "regression"
CLASSIFICATION = "classification"


@dataclass(frozen=True)
class TaskSpec:
    """One client's task.

    ``stream`` picks the random stream used for the task's true head, its data
    and its model initialisation. It defaults to ``task_id``; tasks sharing a
    stream (and otherwise equal specs) are exact replicas of each other.
    """

    task_id: int
    kind: str = REGRESSION
    difficulty_scale: float = 1.0
    samples: int = 500
    classes: int = 2
    stream: int | None = None

    def __post_init__(self):
        if self.kind not in (REGRESSION, CLASSIFICATION):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if not self.difficulty_scale > 0:
            raise ValueError("difficulty_scale must be positive")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.kind == CLASSIFICATION and self.classes < 2:
            raise ValueError("classification needs at least 2 classes")

    @property
    def label_width(self) -> int:
        return self.classes if self.kind == CLASSIFICATION else 1

    @property
    def seed_stream(self) -> int:
        return self.task_id if self.stream is None else self.stream


@dataclass(frozen=True)
class LocalDataset:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.labels.ndim != 2:
            raise ShapeError("inputs and labels must be 2-D")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"{self.inputs.shape[0]} input rows vs {self.labels.shape[0]} label rows"
            )
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.labels))):
            raise ValueError("dataset contains non-finite values")

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class SyntheticWorld:
    generator_spec: MlpSpec
    true_shared: ParamVector
    head_spec: dict[int, MlpSpec]
    true_heads: dict[int, ParamVector]
    tasks: tuple[TaskSpec, ...]
    noise_std: float = 0.0
    seed: int = 0

    @property
    def input_dim(self) -> int:
        return self.generator_spec.input_width

    @property
    def latent_dim(self) -> int:
        return self.generator_spec.output_width

    def representation(self, inputs) -> np.ndarray:
        return forward(self.generator_spec, self.true_shared, inputs)

    def predict(self, task_id: int, inputs) -> np.ndarray:
        """Noiseless ground-truth output (regression values or class logits)."""
        return forward(self.head_spec[task_id], self.true_heads[task_id], self.representation(inputs))


def task_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, *key])


def generate_world(
    d: int,
    d_prime: int,
    task_specs: Sequence[TaskSpec],
    seed: int,
    noise_std: float = 0.0,
    hidden: Sequence[int] = (),
    activation: str = "tanh",
) -> SyntheticWorld:
    """Draw a ground-truth representation and one scaled head per task."""
    if not 1 <= d_prime < d:
        raise ValueError(f"need 1 <= d_prime < d, got d={d}, d_prime={d_prime}")
    if len(task_specs) < 2:
        raise ValueError("a multi-task world needs at least two tasks")
    ids = [t.task_id for t in task_specs]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate task ids {ids}")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")

    widths = (d, *hidden, d_prime)
    gen_spec = MlpSpec(widths, (activation,) * len(hidden))
    # Glorot init keeps the representation O(1) whatever the depth
    true_shared = init_params(gen_spec, task_rng(seed, 0, 0))

    head_spec, heads = {}, {}
    for t in task_specs:
        spec = MlpSpec((d_prime, t.label_width))
        rng = task_rng(seed, 1, t.seed_stream)
        w = rng.standard_normal((d_prime, t.label_width))
        w *= t.difficulty_scale / np.linalg.norm(w)
        heads[t.task_id] = ParamVector(
            np.concatenate([w.ravel(), np.zeros(t.label_width)]), spec.layout()
        )
        head_spec[t.task_id] = spec
    return SyntheticWorld(
        gen_spec, true_shared, head_spec, heads, tuple(task_specs), float(noise_std), seed
    )


def sample_dataset(world: SyntheticWorld, spec: TaskSpec, seed: int) -> LocalDataset:
    if spec.task_id not in world.true_heads:
        raise KeyError(f"task {spec.task_id} is not part of this world")
    rng = task_rng(seed, 2, spec.seed_stream)
    x = rng.standard_normal((spec.samples, world.input_dim))
    out = world.predict(spec.task_id, x)
    if spec.kind == REGRESSION:
        if world.noise_std > 0:
            out = out + world.noise_std * rng.standard_normal(out.shape)
        return LocalDataset(x, out)
    if world.noise_std > 0:
        out = out + world.noise_std * rng.standard_normal(out.shape)
    labels = np.zeros_like(out)
    labels[np.arange(out.shape[0]), np.argmax(out, axis=1)] = 1.0
    return LocalDataset(x, labels)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_pair(predictions, labels) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(predictions, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.float64)
    if pred.shape != lab.shape or pred.ndim != 2:
        raise ShapeError(f"predictions {pred.shape} vs labels {lab.shape}")
    if not np.all(np.isfinite(pred)):
        raise ValueError("non-finite prediction")
    return pred, lab


def loss(kind: str, predictions, labels) -> float:
    """MSE over all entries, or mean softmax cross-entropy over rows."""
    pred, lab = _check_pair(predictions, labels)
    if kind == REGRESSION:
        return float(np.mean((pred - lab) ** 2))
    if kind == CLASSIFICATION:
        return float(-np.sum(lab * _log_softmax(pred)) / pred.shape[0])
    raise ValueError(f"unknown task kind {kind!r}")


def loss_and_grad(kind: str, predictions, labels) -> tuple[float, np.ndarray]:
    """Loss value and its gradient with respect to ``predictions``."""
    pred, lab = _check_pair(predictions, labels)
    if kind == REGRESSION:
        diff = pred - lab
        return float(np.mean(diff**2)), 2.0 * diff / diff.size
    if kind == CLASSIFICATION:
        logp = _log_softmax(pred)
        n = pred.shape[0]
        return float(-np.sum(lab * logp) / n), (np.exp(logp) - lab) / n
    raise ValueError(f"unknown task kind {kind!r}")


@dataclass(frozen=True)
class CsvSchema:
    """Which header columns are features and which are labels.

    With ``one_hot_classes`` set, the single label column holds integer class
    indices that are expanded to one-hot rows.
    """

    feature_columns: tuple[str, ...]
    label_columns: tuple[str, ...]
    one_hot_classes: int | None = None
    delimiter: str = ","


def ingest_dataset(path, schema: CsvSchema) -> LocalDataset:
    """Load a delimited text file with a header row into a LocalDataset."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        header = [h.strip() for h in header]
        missing = [c for c in (*schema.feature_columns, *schema.label_columns) if c not in header]
        if missing:
            raise ValueError(f"{path}: header lacks columns {missing}")
        f_idx = [header.index(c) for c in schema.feature_columns]
        l_idx = [header.index(c) for c in schema.label_columns]
        xs, ys = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ValueError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            try:
                x = [float(row[i]) for i in f_idx]
                y = [float(row[i]) for i in l_idx]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if not all(np.isfinite(x + y)):
                raise ValueError(f"{path}:{lineno}: non-finite value")
            xs.append(x)
            ys.append(y)
    if not xs:
        raise ValueError(f"{path}: no data rows")
    inputs = np.array(xs)
    labels = np.array(ys)
    if schema.one_hot_classes is not None:
        if labels.shape[1] != 1:
            raise ValueError("one-hot expansion needs exactly one label column")
        idx = labels[:, 0]
        c = schema.one_hot_classes
        if np.any(idx != np.round(idx)) or np.any(idx < 0) or np.any(idx >= c):
            raise ValueError(f"{path}: class labels must be integers in [0, {c})")
        labels = np.eye(c)[idx.astype(int)]
    return LocalDataset(inputs, labels)
