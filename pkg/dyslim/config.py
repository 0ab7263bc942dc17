# dyslim/config.py
"""
Run-configuration files.

A run config is one JSON (or YAML) document with the sections system, model,
objective, training and evaluation. Every key is checked against a schema;
unknown keys and badly typed values are rejected with the file path and line
number. Missing keys fall back to the system's defaults. The fully resolved
document is hashed, and the hash is stamped on every output.
"""

import logging
from dataclasses import asdict, dataclass, replace
from typing import Any, Dict, Optional, Tuple, Union

import yaml

from dyslim.data_io import TrajectoryDataset, config_hash
from dyslim.errors import ConfigError
from dyslim.evaluation import EvalConfig
from dyslim.metrics import SinkhornConfig
from dyslim.models import ConvStepperSpec, MlpStepperSpec, Spec
from dyslim.objectives import DiscountSchedule, DyslimConfig, KernelSpec
from dyslim.systems import (ICConfig, KSConfig, LorenzGenConfig, LorenzParams, generate_ks_dataset,
                            generate_lorenz_dataset)
from dyslim.training import TrainConfig, ks_defaults, lorenz_defaults
from helpers.utils import load_yaml_config

logger = logging.getLogger(__name__)

# --- Type Aliases ---
Config = Dict[str, Any]

SECTIONS = ("system", "model", "objective", "training", "evaluation")
SPLITS = ("train", "test")

# key -> value kind. A dict value is a nested section.
NULLABLE = {"reg_mode", "sinkhorn_epsilon"}
SPLIT_SCHEMA = {"n_trajectories": "int", "record_steps": "int", "seed": "int"}
LORENZ_SCHEMA = {
    "name": "str", "h": "float", "warmup_steps": "int", "downsample_factor": "int",
    "sigma": "float", "rho": "float", "beta": "float",
    "init_low": "float_list", "init_high": "float_list", "workers": "int",
    "train": SPLIT_SCHEMA, "test": SPLIT_SCHEMA,
}
KS_SCHEMA = {
    "name": "str", "L": "float", "N": "int", "nu": "float", "h": "float",
    "sample_interval": "float", "warmup_time": "float", "workers": "int",
    "ic": {"n_c": "int", "wave_multipliers": "int_list", "amplitude_range": "float_list",
           "phase_range": "float_list"},
    "train": SPLIT_SCHEMA, "test": SPLIT_SCHEMA,
}
MODEL_SCHEMA = {
    "kind": "str", "hidden": "int_list", "dt": "float",
    "channels": "int", "kernel_width": "int", "n_blocks": "int", "layers_per_block": "int",
    "mirror_dilations": "bool",
}
OBJECTIVE_SCHEMA = {
    "base": "str", "lambda1": "float", "lambda2": "float", "bandwidths": "float_list",
    "estimator": "str", "reg_mode": "str", "discount_ratio": "float", "discount_floor": "float",
    "pushforward_with_one_step": "bool",
}
TRAINING_SCHEMA = {
    "learning_rate": "float", "lr_schedule": "str", "lr_decay_factor": "float", "lr_decay_interval": "int",
    "total_steps": "int", "batch_size": "int", "window": "int", "rollout_interval": "int",
    "max_rollout": "int", "pushforward_sampling": "str", "seed": "int", "checkpoint_interval": "int",
    "max_skipped_steps": "int", "log_interval": "int",
}
EVALUATION_SCHEMA = {
    "label": "str", "rollout_steps": "int", "n_initial_conditions": "int",
    "sinkhorn_epsilon": "float", "sinkhorn_relative": "float", "sinkhorn_max_iter": "int",
    "sinkhorn_threshold": "float", "tcm_truncation": "str", "decorrelation_threshold": "float",
    "mmd_estimator": "str", "workers": "int",
}

DEFAULT_SPLITS = {
    "lorenz": {"train": {"n_trajectories": 200, "record_steps": 100, "seed": 0},
               "test": {"n_trajectories": 50, "record_steps": 101, "seed": 1}},
    "ks": {"train": {"n_trajectories": 32, "record_steps": 400, "seed": 0},
           "test": {"n_trajectories": 8, "record_steps": 401, "seed": 1}},
}


# --- Document loading ---

def _line_index(node: yaml.Node, prefix: str, lines: Dict[str, int]) -> None:
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = f"{prefix}.{key_node.value}" if prefix else str(key_node.value)
            lines[path] = key_node.start_mark.line + 1
            _line_index(value_node, path, lines)


def load_document(path: str) -> Tuple[Config, Dict[str, int]]:
    """Parses a config file and returns it with a dotted-key -> line number index."""
    data, node = load_yaml_config(path)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping of sections", path, 1)
    lines: Dict[str, int] = {}
    if node is not None:
        _line_index(node, "", lines)
    return data, lines


class _Checker:
    def __init__(self, path: str, lines: Dict[str, int]):
        self.path = path
        self.lines = lines

    def fail(self, key: str, message: str) -> None:
        line = self.lines.get(key)
        while line is None and "." in key:
            key = key.rsplit(".", 1)[0]
            line = self.lines.get(key)
        raise ConfigError(message, self.path, line)

    def check(self, data: Any, schema: Dict[str, Any], prefix: str) -> None:
        if not isinstance(data, dict):
            self.fail(prefix, f"'{prefix}' must be a mapping")
        for key, value in data.items():
            path = f"{prefix}.{key}"
            if key not in schema:
                self.fail(path, f"unknown key '{path}'")
            if value is None and key in NULLABLE:
                continue
            kind = schema[key]
            if isinstance(kind, dict):
                self.check(value, kind, path)
            elif not _matches(value, kind):
                self.fail(path, f"'{path}' must be of type {kind}, got {value!r}")


def _matches(value: Any, kind: str) -> bool:
    is_num = isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind == "float":
        return is_num
    if kind == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == "bool":
        return isinstance(value, bool)
    if kind == "str":
        return isinstance(value, str)
    if kind == "float_list":
        return isinstance(value, list) and all(_matches(v, "float") for v in value)
    if kind == "int_list":
        return isinstance(value, list) and all(_matches(v, "int") for v in value)
    return False


# --- Resolved configuration ---

@dataclass
class SplitSpec:
    n_trajectories: int
    record_steps: int
    seed: int


@dataclass
class RunConfig:
    path: str
    system: str
    generator: Union[LorenzGenConfig, KSConfig]
    splits: Dict[str, SplitSpec]
    generation_workers: int
    model: Spec
    training: TrainConfig
    evaluation: EvalConfig
    resolved: Config
    hash: str

    def generate(self, split: str) -> TrajectoryDataset:
        """Generates one split of the dataset described by the system section."""
        spec = self.splits[split]
        if self.system == "lorenz":
            gen = replace(self.generator, n_trajectories=spec.n_trajectories,
                          steps_per_trajectory=spec.record_steps * self.generator.downsample_factor,
                          seed=spec.seed)
            dataset = generate_lorenz_dataset(gen, workers=self.generation_workers)
        else:
            dataset = generate_ks_dataset(self.generator, spec.n_trajectories, spec.record_steps, spec.seed,
                                          workers=self.generation_workers)
        dataset.config_hash = self.hash
        return dataset


def _merge(defaults: Config, overrides: Config) -> Config:
    out = dict(defaults)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _system_defaults(name: str) -> Config:
    if name == "lorenz":
        gen = LorenzGenConfig()
        params = LorenzParams()
        doc = {"name": "lorenz", "h": gen.h, "warmup_steps": gen.warmup_steps,
               "downsample_factor": gen.downsample_factor, "sigma": params.sigma, "rho": params.rho,
               "beta": params.beta, "init_low": list(gen.init_low), "init_high": list(gen.init_high),
               "workers": 1}
    else:
        ks = KSConfig()
        doc = {"name": "ks", "L": ks.L, "N": ks.N, "nu": ks.nu, "h": ks.h, "sample_interval": ks.sample_interval,
               "warmup_time": ks.warmup_time, "workers": 1,
               "ic": {"n_c": ks.ic.n_c, "wave_multipliers": list(ks.ic.wave_multipliers),
                      "amplitude_range": list(ks.ic.amplitude_range), "phase_range": list(ks.ic.phase_range)}}
    doc.update({split: dict(values) for split, values in DEFAULT_SPLITS[name].items()})
    return doc


def _model_defaults(system: Config) -> Config:
    if system["name"] == "lorenz":
        spec = MlpStepperSpec(state_dim=3, dt=0.4)
        return {"kind": "mlp", "hidden": list(spec.hidden), "dt": spec.dt}
    spec = ConvStepperSpec(state_dim=int(system["N"]))
    return {"kind": "conv", "channels": spec.channels, "kernel_width": spec.kernel_width,
            "n_blocks": spec.n_blocks, "layers_per_block": spec.layers_per_block,
            "mirror_dilations": spec.mirror_dilations}


def _training_defaults(name: str, base: str) -> TrainConfig:
    return lorenz_defaults(base) if name == "lorenz" else ks_defaults(base)


def _objective_defaults(train: TrainConfig) -> Config:
    obj = train.objective
    return {"base": obj.base, "lambda1": obj.lambda1, "lambda2": obj.lambda2,
            "bandwidths": list(obj.kernel.bandwidths), "estimator": obj.estimator, "reg_mode": None,
            "discount_ratio": obj.discount.ratio, "discount_floor": obj.discount.floor,
            "pushforward_with_one_step": obj.pushforward_with_one_step}


def _training_doc(train: TrainConfig) -> Config:
    doc = asdict(train)
    doc.pop("system")
    doc.pop("objective")
    return doc


def _evaluation_defaults() -> Config:
    ev = EvalConfig()
    return {"label": ev.label, "rollout_steps": ev.rollout_steps, "n_initial_conditions": ev.n_initial_conditions,
            "sinkhorn_epsilon": None, "sinkhorn_relative": ev.sinkhorn.relative_epsilon,
            "sinkhorn_max_iter": ev.sinkhorn.max_iter, "sinkhorn_threshold": ev.sinkhorn.threshold,
            "tcm_truncation": ev.tcm_truncation, "decorrelation_threshold": ev.decorrelation_threshold,
            "mmd_estimator": ev.mmd_estimator, "workers": ev.workers}


def resolve(data: Config, path: str = "<config>", lines: Optional[Dict[str, int]] = None,
            seed: Optional[int] = None, split: Optional[str] = None) -> RunConfig:
    """
    Validates a parsed document and fills in defaults. `seed` overrides
    training.seed, and also the seed of `split` when one is given.
    """
    checker = _Checker(path, lines or {})
    for key in data:
        if key not in SECTIONS:
            checker.fail(key, f"unknown section '{key}'")
    system_in = data.get("system") or {}
    if not isinstance(system_in, dict):
        checker.fail("system", "'system' must be a mapping")
    name = system_in.get("name", "lorenz")
    if name not in ("lorenz", "ks"):
        checker.fail("system.name", f"unknown system '{name}', expected 'lorenz' or 'ks'")
    checker.check(system_in, LORENZ_SCHEMA if name == "lorenz" else KS_SCHEMA, "system")
    for section, schema in (("model", MODEL_SCHEMA), ("objective", OBJECTIVE_SCHEMA),
                            ("training", TRAINING_SCHEMA), ("evaluation", EVALUATION_SCHEMA)):
        checker.check(data.get(section) or {}, schema, section)

    system = _merge(_system_defaults(name), system_in)
    model = _merge(_model_defaults(system), data.get("model") or {})
    base = (data.get("objective") or {}).get("base", "one_step")
    train_defaults = _training_defaults(name, base)
    objective = _merge(_objective_defaults(train_defaults), data.get("objective") or {})
    training = _merge(_training_doc(train_defaults), data.get("training") or {})
    evaluation = _merge(_evaluation_defaults(), data.get("evaluation") or {})
    if seed is not None:
        training["seed"] = int(seed)
        if split is not None:
            system[split]["seed"] = int(seed)

    resolved = {"system": system, "model": model, "objective": objective,
                "training": training, "evaluation": evaluation}
    hash_value = config_hash(resolved)

    def build(section: str, fn):
        try:
            return fn()
        except ConfigError as e:
            checker.fail(section, str(e))
        except TypeError as e:
            checker.fail(section, f"invalid '{section}' section: {e}")

    if name == "lorenz":
        generator = build("system", lambda: LorenzGenConfig(
            h=system["h"], warmup_steps=system["warmup_steps"], downsample_factor=system["downsample_factor"],
            init_low=tuple(system["init_low"]), init_high=tuple(system["init_high"]),
            params=LorenzParams(system["sigma"], system["rho"], system["beta"])))
        state_dim = 3
    else:
        generator = build("system", lambda: KSConfig(
            L=system["L"], N=system["N"], nu=system["nu"], h=system["h"],
            sample_interval=system["sample_interval"], warmup_time=system["warmup_time"],
            ic=ICConfig(n_c=system["ic"]["n_c"], wave_multipliers=tuple(system["ic"]["wave_multipliers"]),
                        amplitude_range=tuple(system["ic"]["amplitude_range"]),
                        phase_range=tuple(system["ic"]["phase_range"]))))
        state_dim = system["N"]
    splits = {s: SplitSpec(**system[s]) for s in SPLITS}

    def make_model() -> Spec:
        if model["kind"] == "mlp":
            return MlpStepperSpec(state_dim=state_dim, hidden=tuple(model.get("hidden", [32, 32])),
                                  dt=model.get("dt", 0.4))
        if model["kind"] == "conv":
            keys = ("channels", "kernel_width", "n_blocks", "layers_per_block", "mirror_dilations")
            return ConvStepperSpec(state_dim=state_dim, **{k: model[k] for k in keys if k in model})
        raise ConfigError(f"unknown model kind '{model['kind']}'")

    model_spec = build("model", make_model)
    objective_cfg = build("objective", lambda: DyslimConfig(
        base=objective["base"], lambda1=objective["lambda1"], lambda2=objective["lambda2"],
        kernel=KernelSpec(tuple(objective["bandwidths"])), estimator=objective["estimator"],
        discount=DiscountSchedule(objective["discount_ratio"], objective["discount_floor"]),
        reg_mode=objective["reg_mode"], pushforward_with_one_step=objective["pushforward_with_one_step"]))
    train_cfg = build("training", lambda: TrainConfig(system=name, objective=objective_cfg, **training))
    eval_cfg = build("evaluation", lambda: EvalConfig(
        label=evaluation["label"], rollout_steps=evaluation["rollout_steps"],
        n_initial_conditions=evaluation["n_initial_conditions"],
        sinkhorn=SinkhornConfig(evaluation["sinkhorn_epsilon"], evaluation["sinkhorn_relative"],
                                evaluation["sinkhorn_max_iter"], evaluation["sinkhorn_threshold"]),
        tcm_truncation=evaluation["tcm_truncation"], decorrelation_threshold=evaluation["decorrelation_threshold"],
        mmd_estimator=evaluation["mmd_estimator"], workers=evaluation["workers"]))

    return RunConfig(path=path, system=name, generator=generator, splits=splits,
                     generation_workers=int(system["workers"]), model=model_spec, training=train_cfg,
                     evaluation=eval_cfg, resolved=resolved, hash=hash_value)


def load_run_config(path: str, seed: Optional[int] = None, split: Optional[str] = None) -> RunConfig:
    data, lines = load_document(path)
    return resolve(data, path, lines, seed, split)
