# dyslim/objectives.py
"""
Training objectives: one-step, discounted multi-step (curriculum) and
pushforward losses, the MMD invariant-measure regularizers, and their
composition

    total = base + lambda1 * reg_unconditional + lambda2 * reg_conditional.

Squared errors are summed over state dimensions and averaged over the batch.
All loss builders work on a BoundSurrogate and return tape Tensors; the
numpy-facing helpers at the bottom evaluate the same code on constants.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from dyslim import autodiff as ad
from dyslim.autodiff import Graph, Tensor
from dyslim.errors import ConfigError, ContractError
from dyslim.models import SG_DETACH_BEFORE_LAST, SG_NONE, BoundSurrogate, rollout

logger = logging.getLogger(__name__)

BASE_KINDS = ("one_step", "curriculum", "pushforward")
REG_MODES = ("curriculum", "pushforward")
ESTIMATORS = ("biased", "unbiased")
MAX_ASSIGNMENT_SIZE = 8


@dataclass(frozen=True)
class KernelSpec:
    bandwidths: Tuple[float, ...] = (0.2, 0.5, 0.9, 1.3)

    def __post_init__(self):
        if len(self.bandwidths) == 0:
            raise ConfigError("kernel bandwidth set is empty")
        if any(not s > 0 for s in self.bandwidths):
            raise ConfigError(f"kernel bandwidths must be positive, got {list(self.bandwidths)}")


@dataclass(frozen=True)
class DiscountSchedule:
    ratio: float = 0.1
    floor: float = 1e-7

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise ConfigError(f"discount ratio must lie in (0, 1), got {self.ratio}")
        if not self.floor > 0:
            raise ConfigError(f"discount floor must be positive, got {self.floor}")

    def weight(self, k: int) -> float:
        """omega(k) = max(ratio^(k-1), floor) for k >= 1."""
        return max(self.ratio ** (k - 1), self.floor)


@dataclass(frozen=True)
class DyslimConfig:
    base: str = "one_step"
    lambda1: float = 0.0
    lambda2: float = 0.0
    kernel: KernelSpec = field(default_factory=KernelSpec)
    estimator: str = "biased"
    discount: DiscountSchedule = field(default_factory=DiscountSchedule)
    reg_mode: Optional[str] = None
    pushforward_with_one_step: bool = False

    def __post_init__(self):
        if self.base not in BASE_KINDS:
            raise ConfigError(f"unknown base objective '{self.base}', expected one of {BASE_KINDS}")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"unknown estimator '{self.estimator}', expected one of {ESTIMATORS}")
        if self.reg_mode is not None and self.reg_mode not in REG_MODES:
            raise ConfigError(f"unknown regularizer mode '{self.reg_mode}', expected one of {REG_MODES}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("regularizer weights must be non-negative")

    @property
    def effective_reg_mode(self) -> str:
        if self.reg_mode is not None:
            return self.reg_mode
        return "pushforward" if self.base == "pushforward" else "curriculum"


def _sg_pattern(mode: str) -> str:
    return SG_DETACH_BEFORE_LAST if mode == "pushforward" else SG_NONE


def _check_window(windows: np.ndarray, ell: int) -> None:
    if ell < 1:
        raise ContractError(f"rollout length must be at least 1, got {ell}")
    if windows.ndim != 3 or windows.shape[0] == 0:
        raise ContractError(f"windows must be a nonempty (batch, length, dim) array, got {windows.shape}")
    if windows.shape[1] < ell + 1:
        raise ContractError(f"windows hold {windows.shape[1]} states, rollout length {ell} needs {ell + 1}")


# --- Kernel machinery ---

def kernel_sum(a: Tensor, b: Tensor, kernel: KernelSpec, exclude_diagonal: bool = False) -> Tensor:
    """Sum of kappa(a_i, b_j) over all pairs, optionally skipping i == j."""
    k = ad.rq_kernel(ad.pairwise_sq_dists(a, b), kernel.bandwidths)
    if exclude_diagonal:
        mask = np.ones(k.shape) - np.eye(k.shape[0], k.shape[1])
        k = k * a.graph.constant(mask)
    return ad.sum_(k)


def mmd2_tensor(u: Tensor, v: Tensor, kernel: KernelSpec, estimator: str = "biased",
                svv: Optional[Tensor] = None) -> Tensor:
    """
    Squared MMD between the rows of u and v. `svv` may carry an already
    computed kernel_sum(v, v) with the diagonal convention of the estimator.
    """
    n, m = u.shape[0], v.shape[0]
    if estimator == "biased":
        if n < 1 or m < 1:
            raise ContractError(f"biased MMD needs two nonempty sets, got {n} and {m}")
        suu = kernel_sum(u, u, kernel)
        svv = svv if svv is not None else kernel_sum(v, v, kernel)
        suv = kernel_sum(u, v, kernel)
        if n == m:
            return ad.scale(suu + svv + ad.scale(suv, -2.0), 1.0 / (n * n))
        return ad.scale(suu, 1.0 / (n * n)) + ad.scale(svv, 1.0 / (m * m)) + ad.scale(suv, -2.0 / (n * m))
    if estimator == "unbiased":
        if n < 2 or m < 2:
            raise ContractError(f"unbiased MMD needs at least two samples per set, got {n} and {m}")
        suu = kernel_sum(u, u, kernel, exclude_diagonal=True)
        svv = svv if svv is not None else kernel_sum(v, v, kernel, exclude_diagonal=True)
        suv = kernel_sum(u, v, kernel)
        return (ad.scale(suu, 1.0 / (n * (n - 1))) + ad.scale(svv, 1.0 / (m * (m - 1)))
                + ad.scale(suv, -2.0 / (n * m)))
    raise ContractError(f"unknown estimator '{estimator}'")


# --- Base losses ---

def _misfit(pred: Tensor, target: np.ndarray, weight: float) -> Tensor:
    diff = pred - pred.graph.constant(target)
    return ad.scale(ad.sqnorm(diff), weight / target.shape[0])


def _discounted(states, windows: np.ndarray, discount: DiscountSchedule) -> Tensor:
    total = None
    for k, pred in enumerate(states, start=1):
        term = _misfit(pred, windows[:, k], discount.weight(k))
        total = term if total is None else total + term
    return total


def loss_one_step(model: BoundSurrogate, pairs: np.ndarray) -> Tensor:
    """mean_j ||S(u_j) - u_{j+1}||^2 over (batch, 2, D) pairs."""
    pairs = np.asarray(pairs, dtype=np.float64)
    _check_window(pairs, 1)
    pred = model(model.graph.constant(pairs[:, 0]))
    return _misfit(pred, pairs[:, 1], 1.0)


def loss_multistep(model: BoundSurrogate, windows: np.ndarray, ell: int, discount: DiscountSchedule) -> Tensor:
    """mean_j sum_{k=1..ell} omega(k) ||S^k(u_j) - u_{j+k}||^2, gradients through the whole rollout."""
    windows = np.asarray(windows, dtype=np.float64)
    _check_window(windows, ell)
    states = rollout(model, model.graph.constant(windows[:, 0]), ell, SG_NONE)
    return _discounted(states, windows, discount)


def loss_pushforward(model: BoundSurrogate, windows: np.ndarray, ell: int, discount: DiscountSchedule) -> Tensor:
    """mean_j omega(ell) ||S(sg(S^(ell-1)(u_j))) - u_{j+ell}||^2."""
    windows = np.asarray(windows, dtype=np.float64)
    _check_window(windows, ell)
    states = rollout(model, model.graph.constant(windows[:, 0]), ell, SG_DETACH_BEFORE_LAST)
    return _misfit(states[-1], windows[:, ell], discount.weight(ell))


# --- Regularizers ---

def _model_pushforward(model: BoundSurrogate, u0: np.ndarray, ell: int, mode: str) -> Tensor:
    if mode not in REG_MODES:
        raise ContractError(f"unknown regularizer mode '{mode}'")
    return rollout(model, model.graph.constant(u0), ell, _sg_pattern(mode))[-1]


def reg_unconditional(model: BoundSurrogate, ics: np.ndarray, ell: int, kernel: KernelSpec,
                      mode: str = "curriculum", estimator: str = "biased") -> Tensor:
    """MMD^2 between the initial states {u_i} and their model evolutions {S^ell(u_i)}."""
    ics = np.asarray(ics, dtype=np.float64)
    if ell < 1:
        raise ContractError(f"rollout length must be at least 1, got {ell}")
    pred = _model_pushforward(model, ics, ell, mode)
    return mmd2_tensor(model.graph.constant(ics), pred, kernel, estimator)


def reg_conditional(model: BoundSurrogate, windows: np.ndarray, ell: int, kernel: KernelSpec,
                    mode: str = "curriculum", estimator: str = "biased") -> Tensor:
    """MMD^2 between the true evolutions {u_(j+ell)} and the model evolutions {S^ell(u_j)}."""
    windows = np.asarray(windows, dtype=np.float64)
    _check_window(windows, ell)
    pred = _model_pushforward(model, windows[:, 0], ell, mode)
    return mmd2_tensor(model.graph.constant(windows[:, ell]), pred, kernel, estimator)


# --- Composition ---

def dyslim_total(model: BoundSurrogate, windows: np.ndarray, config: DyslimConfig,
                 ell: int) -> Tuple[Tensor, Dict[str, float]]:
    """
    Base objective plus weighted regularizers on one batch of windows.

    The model rollout is shared between the base loss and the regularizers
    whenever their stop-gradient patterns agree, and the kernel sum over the
    predicted set is shared by both regularizers. A regularizer whose weight
    is zero is not built at all and reported as 0.0.
    """
    windows = np.asarray(windows, dtype=np.float64)
    base_ell = 1 if config.base == "one_step" else ell
    _check_window(windows, max(base_ell, ell if (config.lambda1 > 0 or config.lambda2 > 0) else 1))
    graph = model.graph
    u0 = graph.constant(windows[:, 0])

    if config.base == "one_step":
        states = rollout(model, u0, 1, SG_NONE)
        base_pattern = SG_NONE
        base = _misfit(states[0], windows[:, 1], 1.0)
    elif config.base == "curriculum":
        states = rollout(model, u0, ell, SG_NONE)
        base_pattern = SG_NONE
        base = _discounted(states, windows, config.discount)
    else:
        states = rollout(model, u0, ell, SG_DETACH_BEFORE_LAST)
        base_pattern = SG_DETACH_BEFORE_LAST
        base = _misfit(states[-1], windows[:, ell], config.discount.weight(ell))
        if config.pushforward_with_one_step:
            one = states[0] if ell == 1 else model(u0)
            base = base + _misfit(one, windows[:, 1], 1.0)

    components = {"base": float(base.value), "reg_u": 0.0, "reg_c": 0.0}
    total = base
    if config.lambda1 > 0 or config.lambda2 > 0:
        pattern = _sg_pattern(config.effective_reg_mode)
        if len(states) == ell and (pattern == base_pattern or ell == 1):
            pred = states[-1]
        else:
            pred = rollout(model, u0, ell, pattern)[-1]
        svv = kernel_sum(pred, pred, config.kernel, exclude_diagonal=config.estimator == "unbiased")
        if config.lambda1 > 0:
            reg_u = mmd2_tensor(u0, pred, config.kernel, config.estimator, svv=svv)
            components["reg_u"] = float(reg_u.value)
            total = total + ad.scale(reg_u, config.lambda1)
        if config.lambda2 > 0:
            reg_c = mmd2_tensor(graph.constant(windows[:, ell]), pred, config.kernel, config.estimator, svv=svv)
            components["reg_c"] = float(reg_c.value)
            total = total + ad.scale(reg_c, config.lambda2)
    components["total"] = float(total.value)
    return total, components


# --- Numpy front end ---

def _as_samples(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return arr.reshape(-1, 1) if arr.ndim == 1 else arr


def rq_kernel(u, v, kernel: KernelSpec) -> np.ndarray:
    """kappa(u_i, v_j) = sum_q s_q^2 / (s_q^2 + ||u_i - v_j||^2) as an (n, m) matrix."""
    graph = Graph()
    d = ad.pairwise_sq_dists(graph.constant(_as_samples(u)), graph.constant(_as_samples(v)))
    return ad.rq_kernel(d, kernel.bandwidths).value


def mmd2_unbiased(u, v, kernel: KernelSpec) -> float:
    graph = Graph()
    return float(mmd2_tensor(graph.constant(_as_samples(u)), graph.constant(_as_samples(v)),
                             kernel, "unbiased").value)


def mmd2_biased(u, v, kernel: KernelSpec) -> float:
    """V-statistic MMD^2; clipped at zero to absorb summation-order rounding."""
    graph = Graph()
    value = float(mmd2_tensor(graph.constant(_as_samples(u)), graph.constant(_as_samples(v)),
                              kernel, "biased").value)
    return max(value, 0.0)


def discrete_w2_assignment(x, y) -> float:
    """min over permutations pi of (1/n) sum_i ||x_i - y_pi(i)||^2, by enumeration."""
    x, y = _as_samples(x), _as_samples(y)
    n = x.shape[0]
    if y.shape[0] != n or n == 0:
        raise ContractError(f"assignment needs two nonempty sets of equal size, got {n} and {y.shape[0]}")
    if n > MAX_ASSIGNMENT_SIZE:
        raise ContractError(f"assignment by enumeration is limited to {MAX_ASSIGNMENT_SIZE} points, got {n}")
    cost = np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=-1)
    rows = np.arange(n)
    best = min(cost[rows, list(perm)].sum() for perm in itertools.permutations(range(n)))
    return float(best) / n
