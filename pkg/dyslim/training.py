# dyslim/training.py
"""
Optimizer, schedules, window sampling and the training loop.

One training step is: sample a batch of windows, build a fresh tape, evaluate
dyslim_total, run the reverse sweep, apply Adam. Every step appends one row
to the run log; failures go to an events log. Checkpoints are DYSL
containers holding parameters, Adam moments, the sampler's RNG state and
everything `eval` needs to rebuild the surrogate.
"""

import csv
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from dyslim import data_io
from dyslim.autodiff import Graph, ParamStore
from dyslim.data_io import Normalizer, TrajectoryDataset, fit_normalizer
from dyslim.errors import ConfigError, ContractError, NonFiniteError
from dyslim.models import Spec, Surrogate, spec_from_dict, spec_to_dict
from dyslim.objectives import DiscountSchedule, DyslimConfig, KernelSpec, dyslim_total

logger = logging.getLogger(__name__)

# --- Constants ---
RUN_LOG_FILE = "run_log.csv"
EVENTS_FILE = "events.csv"
FINAL_CHECKPOINT = "checkpoint_final.dysl"
RUN_LOG_COLUMNS = ["step", "lr", "ell", "base", "reg_u", "reg_c", "total", "wall_ms"]
EVENT_COLUMNS = ["step", "event", "node", "op", "detail"]

STATUS_RUNNING = "running"
STATUS_COMPLETED = "completed"
STATUS_DIVERGED = "diverged"


@dataclass(frozen=True)
class TrainConfig:
    system: str = "lorenz"
    objective: DyslimConfig = field(default_factory=DyslimConfig)
    learning_rate: float = 1e-4
    lr_schedule: str = "constant"
    lr_decay_factor: float = 0.5
    lr_decay_interval: int = 60_000
    total_steps: int = 500_000
    batch_size: int = 2048
    window: int = 11
    rollout_interval: int = 50_000
    max_rollout: int = 10
    pushforward_sampling: str = "uniform"
    seed: int = 0
    checkpoint_interval: int = 50_000
    max_skipped_steps: int = 100
    log_interval: int = 100

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "staircase"):
            raise ConfigError(f"unknown lr_schedule '{self.lr_schedule}'")
        if self.pushforward_sampling not in ("fixed", "uniform"):
            raise ConfigError(f"unknown pushforward_sampling '{self.pushforward_sampling}'")
        if self.total_steps < 0 or self.batch_size < 1 or self.max_rollout < 1:
            raise ConfigError("total_steps, batch_size and max_rollout must be positive")
        if self.rollout_interval < 1 or self.lr_decay_interval < 1 or self.checkpoint_interval < 1:
            raise ConfigError("schedule intervals must be positive")
        if self.window < self.max_rollout + 1:
            raise ConfigError(f"window ({self.window} states) cannot hold max_rollout {self.max_rollout} + 1 states")


def lorenz_defaults(base: str = "one_step") -> TrainConfig:
    floor = 1e-4 if base == "pushforward" else 1e-7
    objective = DyslimConfig(base=base, kernel=KernelSpec((0.2, 0.5, 0.9, 1.3)),
                             discount=DiscountSchedule(0.1, floor))
    return TrainConfig(system="lorenz", objective=objective)


def ks_defaults(base: str = "one_step") -> TrainConfig:
    objective = DyslimConfig(base=base, kernel=KernelSpec((0.2, 0.5, 0.9, 1.3)),
                             discount=DiscountSchedule(0.9, 1e-3))
    return TrainConfig(
        system="ks", objective=objective, learning_rate=5e-4, lr_schedule="staircase",
        lr_decay_factor=0.5, lr_decay_interval=60_000, total_steps=300_000, batch_size=128,
        window=6, rollout_interval=60_000, max_rollout=5, checkpoint_interval=60_000,
    )


# --- Schedules ---

def lr_schedule(step: int, config: TrainConfig) -> float:
    if config.lr_schedule == "staircase":
        return config.learning_rate * config.lr_decay_factor ** (step // config.lr_decay_interval)
    return config.learning_rate


def rollout_schedule(step: int, config: TrainConfig) -> int:
    """ell = min(1 + step // interval, max_rollout)."""
    return min(1 + step // config.rollout_interval, config.max_rollout)


def draw_rollout_length(rng: np.random.Generator, ell: int) -> int:
    """Uniform draw from 1..ell used by pushforward training."""
    return int(rng.integers(1, ell + 1))


# --- Optimizer ---

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size))


def adam_update(state: AdamState, params: np.ndarray, grads: np.ndarray, lr: float) -> Tuple[AdamState, np.ndarray]:
    """Bias-corrected Adam on flat vectors. Returns a new state and new parameters."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape or grads.shape != state.m.shape:
        raise ContractError(f"gradient shape {grads.shape} does not match parameters {params.shape}")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteError("non-finite gradient passed to Adam")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    with np.errstate(all="ignore"):
        new_params = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if not np.all(np.isfinite(new_params)):
        raise NonFiniteError("Adam update produced non-finite parameters")
    return replace(state, m=m, v=v, step=t), new_params


# --- Data ---

def sample_windows(dataset: TrajectoryDataset, rng: np.random.Generator, batch_size: int, ell: int,
                   window: Optional[int] = None, normalizer: Optional[Normalizer] = None) -> np.ndarray:
    """
    Draws batch_size trajectories, then batch_size window starts uniform in
    [0, T - window], and returns the first ell + 1 states of each window.
    """
    window = ell + 1 if window is None else window
    if ell < 1:
        raise ContractError(f"rollout length must be at least 1, got {ell}")
    if ell + 1 > window:
        raise ContractError(f"rollout length {ell} needs {ell + 1} states, windows hold {window}")
    if dataset.steps < window:
        raise ContractError(f"trajectories have {dataset.steps} states, windows need {window}")
    traj = rng.integers(0, dataset.n_trajectories, size=batch_size)
    start = rng.integers(0, dataset.steps - window + 1, size=batch_size)
    index = start[:, None] + np.arange(ell + 1)[None, :]
    batch = dataset.data[traj[:, None], index]
    return normalizer.apply(batch) if normalizer is not None else batch


# --- Checkpoints ---

@dataclass
class Checkpoint:
    params: ParamStore
    adam: AdamState
    step: int
    config_hash: str
    rng_state: Dict[str, Any]
    status: str = STATUS_RUNNING
    model_spec: Dict[str, Any] = field(default_factory=dict)
    normalizer: Optional[Normalizer] = None
    skipped_steps: int = 0
    config: Dict[str, Any] = field(default_factory=dict)

    def surrogate(self) -> Surrogate:
        return Surrogate(spec_from_dict(self.model_spec), self.params.copy())


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    header = {
        "step": ckpt.step,
        "status": ckpt.status,
        "config_hash": ckpt.config_hash,
        "rng_state": ckpt.rng_state,
        "model": ckpt.model_spec,
        "adam": {"step": ckpt.adam.step, "beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2, "eps": ckpt.adam.eps},
        "normalizer": ckpt.normalizer.to_dict() if ckpt.normalizer is not None else None,
        "skipped_steps": ckpt.skipped_steps,
        "config": ckpt.config,
    }
    arrays = list(ckpt.params.items()) + [("adam.m", ckpt.adam.m), ("adam.v", ckpt.adam.v)]
    data_io.write_checkpoint(path, header, arrays)


def load_checkpoint(path: str) -> Checkpoint:
    header, arrays = data_io.read_checkpoint(path)
    spec = spec_from_dict(header["model"])
    names = [entry["name"] for entry in header["manifest"] if not entry["name"].startswith("adam.")]
    params = ParamStore((name, arrays[name]) for name in names)
    adam_meta = header["adam"]
    adam = AdamState(arrays["adam.m"].copy(), arrays["adam.v"].copy(), int(adam_meta["step"]),
                     float(adam_meta["beta1"]), float(adam_meta["beta2"]), float(adam_meta["eps"]))
    Surrogate(spec, params)  # validates the manifest against the spec
    return Checkpoint(
        params=params,
        adam=adam,
        step=int(header["step"]),
        config_hash=header["config_hash"],
        rng_state=header["rng_state"],
        status=header["status"],
        model_spec=header["model"],
        normalizer=Normalizer.from_dict(header["normalizer"]) if header.get("normalizer") else None,
        skipped_steps=int(header.get("skipped_steps", 0)),
        config=header.get("config") or {},
    )


# --- Run logs ---

def _format(value: Any) -> str:
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def _open_log(path: str, columns: List[str], hash_value: str, keep_before: Optional[int]):
    """
    Opens a CSV log for appending. A fresh log starts with the config-hash
    comment and the header; on resume, rows at or after `keep_before` are
    dropped first.
    """
    if keep_before is not None and os.path.exists(path):
        with open(path, "r", encoding="utf-8", newline="") as f:
            lines = f.readlines()
        kept = []
        for line in lines:
            if line.startswith("#") or line.startswith(columns[0] + ","):
                kept.append(line)
                continue
            first = line.split(",", 1)[0]
            if first.isdigit() and int(first) < keep_before:
                kept.append(line)
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.writelines(kept)
        return open(path, "a", encoding="utf-8", newline="")
    f = open(path, "w", encoding="utf-8", newline="")
    f.write(f"# config_hash: {hash_value}\n")
    csv.writer(f).writerow(columns)
    return f


@dataclass
class TrainResult:
    status: str
    checkpoint_path: str
    log_path: str
    steps_run: int
    skipped_steps: int
    events: List[Dict[str, Any]] = field(default_factory=list)


@dataclass
class StepOutcome:
    components: Dict[str, float]
    ell: int
    skipped: bool = False
    error: Optional[NonFiniteError] = None


def train_step(surrogate: Surrogate, adam: AdamState, batch: np.ndarray, objective: DyslimConfig,
               ell: int, lr: float) -> Tuple[AdamState, StepOutcome]:
    """
    One optimizer step. A non-finite forward value propagates as
    NonFiniteError; a non-finite gradient leaves parameters and optimizer
    untouched and is reported as a skipped step.
    """
    graph = Graph()
    model = surrogate.attach(graph)
    total, components = dyslim_total(model, batch, objective, ell)
    try:
        grads = graph.backward(total)
        flat = surrogate.params.flatten_like(grads)
        adam, new_params = adam_update(adam, surrogate.params.flatten(), flat, lr)
    except NonFiniteError as e:
        return adam, StepOutcome(components, ell, skipped=True, error=e)
    surrogate.params.assign_flat(new_params)
    return adam, StepOutcome(components, ell)


def train(config: TrainConfig, dataset: TrajectoryDataset, model_spec: Spec, out_dir: str,
          config_hash: Optional[str] = None, resume_from: Optional[str] = None) -> TrainResult:
    """
    Runs config.total_steps optimizer steps (or the remainder after a resumed
    checkpoint). A non-finite forward pass halts the run as diverged; too many
    skipped backward passes do the same.
    """
    if dataset.system != config.system:
        raise ConfigError(f"dataset holds '{dataset.system}' trajectories, config trains '{config.system}'")
    if dataset.state_dim != model_spec.state_dim:
        raise ConfigError(f"model state_dim {model_spec.state_dim} does not match dataset dimension {dataset.state_dim}")
    os.makedirs(out_dir, exist_ok=True)
    config_doc = {"training": asdict(config), "model": spec_to_dict(model_spec)}
    hash_value = config_hash or data_io.config_hash(config_doc)

    rng = np.random.default_rng([config.seed, 1])
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.config_hash != hash_value:
            raise ConfigError(f"checkpoint {resume_from} was written by config {ckpt.config_hash}, not {hash_value}")
        surrogate = ckpt.surrogate()
        adam = ckpt.adam
        normalizer = ckpt.normalizer
        rng.bit_generator.state = ckpt.rng_state
        start, skipped = ckpt.step, ckpt.skipped_steps
        logger.info(f"Resuming from {resume_from} at step {start}")
    else:
        surrogate = Surrogate(model_spec, seed=config.seed)
        adam = AdamState.zeros(surrogate.params.size)
        normalizer = dataset.normalizer or fit_normalizer(dataset)
        start, skipped = 0, 0

    def snapshot(step: int, status: str) -> Checkpoint:
        return Checkpoint(surrogate.params.copy(), replace(adam, m=adam.m.copy(), v=adam.v.copy()), step,
                          hash_value, rng.bit_generator.state, status, spec_to_dict(model_spec),
                          normalizer, skipped, config_doc)

    log_path = os.path.join(out_dir, RUN_LOG_FILE)
    events_path = os.path.join(out_dir, EVENTS_FILE)
    keep = start if resume_from is not None else None
    events: List[Dict[str, Any]] = []
    status = STATUS_COMPLETED
    step = start
    with _open_log(log_path, RUN_LOG_COLUMNS, hash_value, keep) as log_file, \
            _open_log(events_path, EVENT_COLUMNS, hash_value, keep) as events_file:
        log_writer = csv.writer(log_file)
        events_writer = csv.writer(events_file)

        def record_event(at: int, kind: str, err: NonFiniteError) -> None:
            event = {"step": at, "event": kind, "node": err.node_id, "op": err.op_kind, "detail": str(err)}
            events.append(event)
            events_writer.writerow([event[c] if event[c] is not None else "" for c in EVENT_COLUMNS])
            events_file.flush()
            logger.warning(f"Step {at}: {kind}: {err}")

        while step < config.total_steps:
            lr = lr_schedule(step, config)
            ell = rollout_schedule(step, config)
            batch = sample_windows(dataset, rng, config.batch_size, ell, config.window, normalizer)
            if config.objective.base == "pushforward" and config.pushforward_sampling == "uniform":
                ell = draw_rollout_length(rng, ell)

            began = time.perf_counter()
            try:
                adam, outcome = train_step(surrogate, adam, batch, config.objective, ell, lr)
            except NonFiniteError as e:
                record_event(step, "forward_nonfinite", e)
                status = STATUS_DIVERGED
                break
            wall_ms = 1000.0 * (time.perf_counter() - began)

            comps = outcome.components
            log_writer.writerow([step, _format(lr), ell, _format(comps["base"]), _format(comps["reg_u"]),
                                 _format(comps["reg_c"]), _format(comps["total"]), _format(wall_ms)])
            step += 1

            if outcome.skipped:
                skipped += 1
                record_event(step - 1, "backward_nonfinite", outcome.error)
                if skipped > config.max_skipped_steps:
                    status = STATUS_DIVERGED
                    break

            if step % config.log_interval == 0:
                logger.info(f"step {step}: lr={lr:.3e} ell={ell} total={comps['total']:.6e}")
                log_file.flush()
            if step % config.checkpoint_interval == 0 and step < config.total_steps:
                save_checkpoint(os.path.join(out_dir, f"checkpoint_{step:08d}.dysl"), snapshot(step, STATUS_RUNNING))

    final_path = os.path.join(out_dir, FINAL_CHECKPOINT)
    save_checkpoint(final_path, snapshot(step, status))
    logger.info(f"Training finished with status '{status}' after {step} steps ({skipped} skipped)")
    return TrainResult(status, final_path, log_path, step - start, skipped, events)


def read_run_log(path: str) -> Tuple[Optional[str], List[Dict[str, str]]]:
    """Returns the config hash comment and the rows of a run log as dicts."""
    hash_value = None
    with open(path, "r", encoding="utf-8", newline="") as f:
        lines = []
        for line in f:
            if line.startswith("#"):
                if line.startswith("# config_hash:"):
                    hash_value = line.split(":", 1)[1].strip()
                continue
            lines.append(line)
    return hash_value, list(csv.DictReader(lines))
