"""Experiment orchestration: config, the round loop, metrics CSV and comparisons."""

from __future__ import annotations

import csv
import hashlib
import io
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import client as client_mod
from . import server
from .client import ClientState, DivergenceError
from .numerics import MlpSpec, ParamVector, init_params
from .taskgen import TaskSpec, generate_world, sample_dataset, task_rng

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

THREADS_ENV = "FEDGRADNORM_THREADS"
METRIC_FIELDS = ("loss", "inverse_rate", "rel_rate", "weight", "actual_norm", "target_norm")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    tasks: list[TaskSpec]
    rounds: int = 100
    tau_h: int = 5
    tau_w: int = 5
    alpha: float = 4e-3
    beta: float = 2e-4
    gamma: float = 0.9
    strategy: str = server.FEDGRADNORM
    seed: int = 0
    # synthetic world
    input_dim: int = 8
    latent_dim: int = 2
    world_hidden: tuple[int, ...] = ()
    world_activation: str = "tanh"
    noise_std: float = 0.0
    # models; shared_widths defaults to (input_dim, latent_dim)
    shared_widths: tuple[int, ...] | None = None
    shared_activations: tuple[str, ...] = ()
    head_hidden: tuple[int, ...] = ()
    head_activations: tuple[str, ...] = ()
    tail_layers: int = 1
    head_init: str = "glorot"
    # optimisation details
    head_lr: float | None = None
    head_optimizer: str = "sgd"
    batch_size: int | None = None
    norm: str = "l1"
    weight_floor: float = server.WEIGHT_FLOOR
    weight_steps: int = 1
    weight_optimizer: str = "sgd"
    output: str | None = None
    threads: int = 0

    def __post_init__(self):
        self.tasks = list(self.tasks)
        for name in ("world_hidden", "shared_activations", "head_hidden", "head_activations"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.shared_widths is not None:
            self.shared_widths = tuple(self.shared_widths)
        self.validate()

    def validate(self):
        if len(self.tasks) < 2:
            raise ConfigError("at least two tasks are required")
        if min(self.rounds, self.tau_h, self.tau_w, self.weight_steps) < 1:
            raise ConfigError("rounds, tau_h, tau_w and weight_steps must be >= 1")
        if not (self.alpha > 0 and self.beta > 0):
            raise ConfigError("alpha and beta must be positive")
        if self.head_lr is not None and not self.head_lr > 0:
            raise ConfigError("head_lr must be positive")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.strategy not in server.STRATEGIES:
            raise ConfigError(f"strategy must be one of {server.STRATEGIES}")
        if self.norm not in ("l1", "sq"):
            raise ConfigError("norm must be 'l1' or 'sq'")
        if self.head_init not in ("glorot", "zeros"):
            raise ConfigError("head_init must be 'glorot' or 'zeros'")
        if self.head_optimizer not in ("sgd", "adam"):
            raise ConfigError("head_optimizer must be 'sgd' or 'adam'")
        if self.weight_optimizer not in ("sgd", "adam"):
            raise ConfigError("weight_optimizer must be 'sgd' or 'adam'")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 < self.weight_floor < 1:
            raise ConfigError("weight_floor must lie in (0, 1)")
        if self.shared_spec.input_width != self.input_dim:
            raise ConfigError("shared network input width must equal input_dim")
        ids = [t.task_id for t in self.tasks]
        if ids != list(range(len(ids))):
            raise ConfigError(f"task ids must be 0..N-1 in order, got {ids}")

    @property
    def n(self) -> int:
        return len(self.tasks)

    @property
    def shared_spec(self) -> MlpSpec:
        widths = self.shared_widths or (self.input_dim, self.latent_dim)
        return MlpSpec(widths, self.shared_activations)

    @property
    def head_specs(self) -> list[MlpSpec]:
        rep = self.shared_spec.output_width
        return [
            MlpSpec((rep, *self.head_hidden, t.label_width), self.head_activations)
            for t in self.tasks
        ]


_SECTIONS = {
    "protocol": (
        "tau_h", "tau_w", "alpha", "beta", "gamma", "norm", "weight_floor",
        "weight_steps", "weight_optimizer", "head_lr", "head_optimizer", "batch_size",
    ),
    "world": ("input_dim", "latent_dim", "hidden", "activation", "noise_std"),
    "model": (
        "shared_widths", "shared_activations", "head_hidden", "head_activations", "tail_layers",
        "head_init",
    ),
}
_TOP = ("seed", "rounds", "strategy", "output", "threads")
_RENAME = {"hidden": "world_hidden", "activation": "world_activation"}
_TASK_KEYS = {"kind", "scale", "samples", "classes", "stream"}


def config_from_dict(raw: dict) -> ExperimentConfig:
    kwargs = {}
    for key, value in raw.items():
        if key == "tasks":
            continue
        if key in _TOP:
            kwargs[key] = value
        elif key in _SECTIONS and isinstance(value, dict):
            for sub, v in value.items():
                if sub not in _SECTIONS[key]:
                    raise ConfigError(f"unknown key {key}.{sub}")
                kwargs[_RENAME.get(sub, sub)] = v
        else:
            raise ConfigError(f"unknown key {key}")
    tasks_raw = raw.get("tasks")
    if not isinstance(tasks_raw, list) or not tasks_raw:
        raise ConfigError("config needs a [[tasks]] list")
    tasks = []
    for i, t in enumerate(tasks_raw):
        extra = set(t) - _TASK_KEYS
        if extra:
            raise ConfigError(f"task {i}: unknown keys {sorted(extra)}")
        try:
            tasks.append(
                TaskSpec(
                    task_id=i,
                    kind=t.get("kind", "regression"),
                    difficulty_scale=float(t.get("scale", 1.0)),
                    samples=int(t.get("samples", 500)),
                    classes=int(t.get("classes", 2)),
                    stream=t.get("stream"),
                )
            )
        except ValueError as exc:
            raise ConfigError(f"task {i}: {exc}") from None
    try:
        return ExperimentConfig(tasks=tasks, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw)


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    fgrad: float
    objective: float
    loss: tuple[float, ...]
    inverse_rate: tuple[float, ...]
    rel_rate: tuple[float, ...]
    weight: tuple[float, ...]
    actual_norm: tuple[float, ...]
    target_norm: tuple[float, ...]

    @property
    def n(self) -> int:
        return len(self.weight)

    def row(self) -> list[float]:
        out = [self.round, self.fgrad, self.objective]
        for i in range(self.n):
            out.extend(getattr(self, f)[i] for f in METRIC_FIELDS)
        return out


def metric_columns(n: int) -> list[str]:
    cols = ["round", "fgrad", "objective"]
    for i in range(n):
        cols.extend(f"{f}_{i}" for f in METRIC_FIELDS)
    return cols


def _fmt(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else format(float(v), ".17g")


def metrics_csv(metrics: Sequence[RoundMetrics], n: int | None = None) -> str:
    if n is None:
        n = metrics[0].n if metrics else 0
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(metric_columns(n))
    for m in metrics:
        writer.writerow([_fmt(v) for v in m.row()])
    return buf.getvalue()


def write_metrics(metrics: Sequence[RoundMetrics], path, n: int | None = None) -> None:
    Path(path).write_text(metrics_csv(metrics, n), encoding="utf-8")


def read_metrics(path) -> list[RoundMetrics]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    n = (len(rows[0]) - 3) // len(METRIC_FIELDS)
    out = []
    for r in rows[1:]:
        vals = [float(v) for v in r[1:]]
        per = {
            f: tuple(vals[2 + i * len(METRIC_FIELDS) + j] for i in range(n))
            for j, f in enumerate(METRIC_FIELDS)
        }
        out.append(RoundMetrics(int(r[0]), vals[0], vals[1], **per))
    return out


@dataclass
class Simulation:
    """Everything needed to run rounds: clients with F_0 set and the initial ω."""

    clients: list[ClientState]
    shared: ParamVector
    shared_spec: MlpSpec
    tau_h: int
    tau_w: int
    alpha: float
    beta: float
    gamma: float
    rounds: int
    strategy: str
    head_lr: float | None = None
    batch_size: int | None = None
    norm: str = "l1"
    weight_floor: float = server.WEIGHT_FLOOR
    weight_steps: int = 1
    weight_optimizer: str = "sgd"

    @property
    def initial_losses(self) -> list[float]:
        return [c.initial_loss for c in self.clients]


def init_digest(shared: ParamVector, clients: Sequence[ClientState]) -> str:
    h = hashlib.sha256(shared.values.tobytes())
    for c in clients:
        h.update(c.head.values.tobytes())
    return h.hexdigest()


def _init_head(kind: str, spec: MlpSpec, rng: np.random.Generator) -> ParamVector:
    params = init_params(spec, rng)
    return params.zeros_like() if kind == "zeros" else params


def build_simulation(config: ExperimentConfig) -> Simulation:
    world = generate_world(
        config.input_dim,
        config.latent_dim,
        config.tasks,
        config.seed,
        noise_std=config.noise_std,
        hidden=config.world_hidden,
        activation=config.world_activation,
    )
    shared_spec = config.shared_spec
    shared = init_params(shared_spec, task_rng(config.seed, 3, 0), config.tail_layers)
    clients = []
    for task, head_spec in zip(config.tasks, config.head_specs):
        stream = task.seed_stream
        state = ClientState(
            client_id=task.task_id,
            task=task,
            data=sample_dataset(world, task, config.seed),
            head=_init_head(config.head_init, head_spec, task_rng(config.seed, 4, stream)),
            head_spec=head_spec,
            rng_seed=int(task_rng(config.seed, 5, stream).integers(2**31)),
            head_optimizer=config.head_optimizer,
        )
        clients.append(client_mod.set_initial_loss(state, shared, shared_spec))
    return Simulation(
        clients=clients,
        shared=shared,
        shared_spec=shared_spec,
        tau_h=config.tau_h,
        tau_w=config.tau_w,
        alpha=config.alpha,
        beta=config.beta,
        gamma=config.gamma,
        rounds=config.rounds,
        strategy=config.strategy,
        head_lr=config.head_lr,
        batch_size=config.batch_size,
        norm=config.norm,
        weight_floor=config.weight_floor,
        weight_steps=config.weight_steps,
        weight_optimizer=config.weight_optimizer,
    )


def resolve_threads(threads: int | None, config_threads: int = 0) -> int:
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        threads = int(env) if env not in (None, "") else config_threads
    if threads < 0:
        raise ConfigError("thread count must be >= 0")
    return threads or (os.cpu_count() or 1)


@dataclass
class RunResult:
    metrics: list[RoundMetrics]
    initial_losses: list[float]
    init_digest: str
    final_shared: ParamVector | None = None
    clients: list[ClientState] = field(default_factory=list)


def simulate(sim: Simulation, threads: int = 1) -> RunResult:
    """Run ``sim.rounds`` rounds; clients within a round may run on threads."""
    clients = list(sim.clients)
    digest = init_digest(sim.shared, clients)
    shared = sim.shared
    p = np.ones(len(clients))
    adam = None
    metrics = []

    def local(k, st):
        return client_mod.local_round(
            st, shared, sim.shared_spec, sim.tau_h, sim.tau_w, sim.beta,
            head_lr=sim.head_lr, batch_size=sim.batch_size, round_index=k,
        )

    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for k in range(1, sim.rounds + 1):
            try:
                if pool is None:
                    results = [local(k, st) for st in clients]
                else:
                    results = list(pool.map(lambda st: local(k, st), clients))
            except DivergenceError as exc:
                raise DivergenceError(f"round {k}: {exc}") from None
            results.sort(key=lambda res: res[0].client_id)
            clients = [r[0] for r in results]
            reports = [r[1] for r in results]
            shared, p, info = server.run_round(
                sim.strategy, shared, reports, p, sim.gamma, sim.alpha, sim.beta,
                norm=sim.norm, weight_steps=sim.weight_steps, floor=sim.weight_floor,
                weight_optimizer=sim.weight_optimizer, adam=adam,
            )
            adam = info.adam
            losses = [r.raw_loss for r in reports]
            m = RoundMetrics(
                round=k,
                fgrad=info.fgrad,
                objective=server.global_objective(losses, p),
                loss=tuple(losses),
                inverse_rate=tuple(r.inverse_rate for r in reports),
                rel_rate=tuple(info.targets.rel_rates.tolist()),
                weight=tuple(p.tolist()),
                actual_norm=tuple(info.actual.tolist()),
                target_norm=tuple(info.targets.targets.tolist()),
            )
            if not np.all(np.isfinite(m.row())) or not np.all(np.isfinite(shared.values)):
                raise DivergenceError(f"round {k}: non-finite metrics or parameters")
            server.check_weights(p, sim.weight_floor)
            metrics.append(m)
    finally:
        if pool is not None:
            pool.shutdown()
    return RunResult(metrics, sim.initial_losses, digest, shared, clients)


def run(config: ExperimentConfig, threads: int | None = None) -> RunResult:
    sim = build_simulation(config)
    result = simulate(sim, resolve_threads(threads, config.threads))
    if config.output:
        write_metrics(result.metrics, config.output, config.n)
    return result


def run_experiment(config: ExperimentConfig, threads: int | None = None) -> list[RoundMetrics]:
    return run(config, threads).metrics


def _half_round(metrics: Sequence[RoundMetrics], i: int, f0: float) -> int | None:
    for m in metrics:
        if m.loss[i] <= 0.5 * f0:
            return m.round
    return None


def summarize(result: RunResult) -> dict:
    last = result.metrics[-1]
    f0 = result.initial_losses
    normalized = [last.loss[i] / f0[i] for i in range(len(f0))]
    return {
        "initial_losses": list(f0),
        "final_losses": list(last.loss),
        "normalized_final_losses": normalized,
        "max_normalized_loss": max(normalized),
        "half_loss_round": [_half_round(result.metrics, i, f0[i]) for i in range(len(f0))],
        "final_weights": list(last.weight),
        "init_digest": result.init_digest,
    }


@dataclass
class Comparison:
    summary: dict
    runs: dict[str, RunResult]


def compare_strategies(config: ExperimentConfig, threads: int | None = None) -> Comparison:
    """Run both strategies from the same seed, world and initialisation."""
    runs = {}
    for strategy in (server.FEDGRADNORM, server.EQUAL):
        cfg = replace(config, strategy=strategy, output=None)
        runs[strategy] = run(cfg, threads)
    if len({r.init_digest for r in runs.values()}) != 1:
        raise RuntimeError("strategies started from different initial parameters")
    return Comparison({s: summarize(r) for s, r in runs.items()}, runs)
