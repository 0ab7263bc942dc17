# dyslim/models.py
"""
Surrogate one-step maps and their rollouts.

Two architectures are provided:
- MlpStepperSpec: S(u) = u + dt * f(u), f a ReLU MLP.
- ConvStepperSpec: a circular dilated-conv residual network that predicts
  the next state directly, S(u) = u + decoder(blocks(encoder(u))).

A Surrogate owns its ParamStore. To differentiate through it, attach it to a
Graph; to just predict, call `predict` on numpy arrays.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from dyslim import autodiff as ad
from dyslim.autodiff import Graph, ParamStore, Tensor
from dyslim.errors import ConfigError, ContractError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

SG_NONE = "none"
SG_DETACH_BEFORE_LAST = "detach_before_last"


@dataclass(frozen=True)
class MlpStepperSpec:
    state_dim: int = 3
    hidden: Tuple[int, ...] = (32, 32)
    dt: float = 0.4
    kind: str = "mlp"

    def layer_sizes(self) -> List[int]:
        return [self.state_dim, *self.hidden, self.state_dim]


@dataclass(frozen=True)
class ConvStepperSpec:
    state_dim: int = 512
    channels: int = 48
    kernel_width: int = 5
    n_blocks: int = 4
    layers_per_block: int = 4
    mirror_dilations: bool = True
    kind: str = "conv"

    def dilations(self) -> List[int]:
        """Dilation of every conv layer inside one block: 1, 2, 4, 8 then back down to 1."""
        rising = [2 ** i for i in range(self.layers_per_block)]
        if self.mirror_dilations:
            return rising + rising[-2::-1]
        return rising


Spec = Union[MlpStepperSpec, ConvStepperSpec]


def spec_to_dict(spec: Spec) -> Dict[str, Any]:
    data = asdict(spec)
    if "hidden" in data:
        data["hidden"] = list(data["hidden"])
    return data


def spec_from_dict(data: Dict[str, Any]) -> Spec:
    data = dict(data)
    kind = data.get("kind", "mlp")
    if kind == "mlp":
        if "hidden" in data:
            data["hidden"] = tuple(int(h) for h in data["hidden"])
        return MlpStepperSpec(**data)
    if kind == "conv":
        return ConvStepperSpec(**data)
    raise ConfigError(f"unknown model kind '{kind}'")


# --- Parameters ---

def param_layout(spec: Spec) -> List[Tuple[str, Tuple[int, ...], int, int]]:
    """(name, shape, fan_in, fan_out) for every tensor; fan is 0 for biases."""
    layout = []
    if isinstance(spec, MlpStepperSpec):
        sizes = spec.layer_sizes()
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            layout.append((f"dense{i}.w", (n_in, n_out), n_in, n_out))
            layout.append((f"dense{i}.b", (n_out,), 0, 0))
        return layout

    c, k = spec.channels, spec.kernel_width
    if k % 2 != 1:
        raise ConfigError(f"kernel_width must be odd, got {k}")
    layout.append(("encoder.w", (c, 1, k), k, c * k))
    layout.append(("encoder.b", (c,), 0, 0))
    for blk in range(spec.n_blocks):
        for layer in range(len(spec.dilations())):
            name = f"block{blk}.layer{layer}"
            layout.append((f"{name}.w", (c, c, k), c * k, c * k))
            layout.append((f"{name}.b", (c,), 0, 0))
    layout.append(("decoder.w", (1, c, k), c * k, k))
    layout.append(("decoder.b", (1,), 0, 0))
    return layout


def init_params(spec: Spec, seed: int) -> ParamStore:
    """Glorot-uniform weights and zero biases, drawn in layout order from default_rng(seed)."""
    rng = np.random.default_rng(seed)
    entries = []
    for name, shape, fan_in, fan_out in param_layout(spec):
        if fan_in == 0:
            entries.append((name, np.zeros(shape)))
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            entries.append((name, rng.uniform(-limit, limit, size=shape)))
    return ParamStore(entries)


def zero_params(spec: Spec) -> ParamStore:
    return ParamStore((name, np.zeros(shape)) for name, shape, _, _ in param_layout(spec))


# --- Forward passes on the tape ---

class BoundSurrogate:
    """A surrogate whose parameters live on a particular Graph."""

    def __init__(self, spec: Spec, graph: Graph, params: Dict[str, Tensor]):
        self.spec = spec
        self.graph = graph
        self.params = params

    @property
    def state_dim(self) -> int:
        return self.spec.state_dim

    def __call__(self, x: Tensor) -> Tensor:
        if len(x.shape) != 2 or x.shape[1] != self.spec.state_dim:
            raise ShapeError(f"surrogate expects (batch, {self.spec.state_dim}) states, got {x.shape}")
        if isinstance(self.spec, MlpStepperSpec):
            return self._mlp(x)
        return self._conv(x)

    def _mlp(self, x: Tensor) -> Tensor:
        p = self.params
        n_layers = len(self.spec.layer_sizes()) - 1
        h = x
        for i in range(n_layers):
            h = ad.affine(h, p[f"dense{i}.w"], p[f"dense{i}.b"])
            if i < n_layers - 1:
                h = ad.relu(h)
        return x + ad.scale(h, self.spec.dt)

    def _conv(self, x: Tensor) -> Tensor:
        p = self.params
        batch, n = x.shape
        h = ad.conv1d(ad.reshape(x, (batch, 1, n)), p["encoder.w"], p["encoder.b"], 1)
        for blk in range(self.spec.n_blocks):
            z = h
            for layer, dilation in enumerate(self.spec.dilations()):
                name = f"block{blk}.layer{layer}"
                z = ad.relu(ad.conv1d(z, p[f"{name}.w"], p[f"{name}.b"], dilation))
            h = h + z
        y = ad.conv1d(h, p["decoder.w"], p["decoder.b"], 1)
        return x + ad.reshape(y, (batch, n))


class Surrogate:
    def __init__(self, spec: Spec, params: Optional[ParamStore] = None, seed: int = 0):
        self.spec = spec
        self.params = params if params is not None else init_params(spec, seed)
        expected = [name for name, *_ in param_layout(spec)]
        if self.params.names != expected:
            raise ContractError("parameter store does not match the surrogate spec")

    @property
    def state_dim(self) -> int:
        return self.spec.state_dim

    def attach(self, graph: Graph, trainable: bool = True) -> BoundSurrogate:
        leaf = graph.param if trainable else graph.input
        return BoundSurrogate(self.spec, graph, {name: leaf(name, value) for name, value in self.params.items()})

    def predict(self, u: np.ndarray) -> np.ndarray:
        """One step on a (D,) state or a (B, D) batch, without recording gradients."""
        u = np.asarray(u, dtype=np.float64)
        single = u.ndim == 1
        batch = u[None, :] if single else u
        if batch.ndim != 2 or batch.shape[1] != self.state_dim:
            raise ShapeError(f"surrogate expects states of dimension {self.state_dim}, got shape {u.shape}")
        graph = Graph()
        out = self.attach(graph, trainable=False)(graph.constant(batch)).value
        return out[0] if single else out


def step(surrogate: Surrogate, u: np.ndarray) -> np.ndarray:
    return surrogate.predict(u)


def rollout(model: BoundSurrogate, u0: Tensor, k: int, sg_pattern: str = SG_NONE) -> List[Tensor]:
    """
    k applications of the model starting from u0. With detach_before_last
    every returned state except the last is wrapped in stop_gradient, so
    gradients only see the final application.
    """
    if k < 0:
        raise ContractError(f"rollout length must be non-negative, got {k}")
    if sg_pattern not in (SG_NONE, SG_DETACH_BEFORE_LAST):
        raise ContractError(f"unknown stop-gradient pattern '{sg_pattern}'")
    states: List[Tensor] = []
    current = u0
    for i in range(k):
        try:
            current = model(current)
        except NonFiniteError as e:
            raise NonFiniteError("surrogate rollout produced a non-finite state",
                                 e.node_id, e.op_kind, step=i + 1) from None
        if sg_pattern == SG_DETACH_BEFORE_LAST and i < k - 1:
            current = ad.stop_gradient(current)
        states.append(current)
    return states


def rollout_array(stepper, u0: np.ndarray, k: int) -> np.ndarray:
    """Numpy rollout for evaluation: (B, D) -> (B, k, D). Works with any object exposing predict."""
    u = np.asarray(u0, dtype=np.float64)
    out = np.empty((u.shape[0], k, u.shape[1]))
    for i in range(k):
        try:
            u = stepper.predict(u)
        except NonFiniteError as e:
            raise NonFiniteError("surrogate rollout produced a non-finite state",
                                 e.node_id, e.op_kind, step=i + 1) from None
        if not np.all(np.isfinite(u)):
            raise NonFiniteError("surrogate rollout produced a non-finite state", step=i + 1)
        out[:, i] = u
    return out


def parameter_count(spec: Spec) -> int:
    return int(sum(np.prod(shape) for _, shape, _, _ in param_layout(spec)))
