# dyslim/metrics.py
"""
Evaluation metrics for surrogate rollouts.

Ensemble arrays are shaped (n_trajectories, T, D). Snapshot arrays are any
(..., D) stack of states. All functions are pure.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import ot

from dyslim.errors import ContractError, UndefinedMetricError
from dyslim.objectives import KernelSpec, mmd2_biased, mmd2_unbiased

logger = logging.getLogger(__name__)

# --- Constants ---
EPSILON_FLOOR = 1e-12
# POT iterates to this fraction of the reported marginal threshold
INNER_TOLERANCE_FACTOR = 1e-6
SD_FLOOR = -1e-8
LORENZ_FEATURES = ("x", "y", "z", "xy", "xz")
KS_FEATURES = ("u_x", "u_xx")


# --- Cosine similarity ---

def cosine_similarity_series(truth: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """
    Per time step, the mean over trajectories of cos(u - m_t, v - m_t),
    m_t being the ground-truth ensemble mean at t. Trajectories whose
    deviation has zero norm at a step are left out of that step.
    """
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.shape != pred.shape or truth.ndim != 3:
        raise ContractError(f"cosine similarity needs matching (n, T, D) ensembles, got {truth.shape} and {pred.shape}")
    if truth.shape[0] < 2:
        raise ContractError("cosine similarity needs at least two trajectories")
    mean = truth.mean(axis=0, keepdims=True)
    a = truth - mean
    b = pred - mean
    dot = np.sum(a * b, axis=-1)
    norms = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    valid = norms > 0
    counts = valid.sum(axis=0)
    if np.any(counts == 0):
        t = int(np.argmax(counts == 0))
        raise UndefinedMetricError(f"cosine similarity undefined at step {t}: every deviation has zero norm")
    cos = np.where(valid, dot / np.where(valid, norms, 1.0), 0.0)
    return cos.sum(axis=0) / counts


def decorrelation_time(cosine: np.ndarray, dt: float, threshold: float = 0.5) -> float:
    """Time of the first step whose cosine similarity falls below threshold; the horizon if none does."""
    below = np.flatnonzero(np.asarray(cosine) < threshold)
    steps = int(below[0]) + 1 if below.size else len(cosine)
    return steps * dt


# --- Entropic optimal transport ---

@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: Optional[float] = None
    relative_epsilon: float = 0.05
    max_iter: int = 2000
    threshold: float = 1e-3

    def __post_init__(self):
        if self.epsilon is not None and not self.epsilon > 0:
            raise ContractError(f"Sinkhorn epsilon must be positive, got {self.epsilon}")
        if not self.relative_epsilon > 0:
            raise ContractError(f"relative epsilon must be positive, got {self.relative_epsilon}")

    def resolve(self, cost: np.ndarray) -> float:
        if self.epsilon is not None:
            return float(self.epsilon)
        return max(self.relative_epsilon * float(np.mean(cost)), EPSILON_FLOOR)


@dataclass(frozen=True)
class SinkhornResult:
    value: float
    converged: bool
    marginal_violation: float
    epsilon: float


def _samples(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return arr.reshape(-1, 1) if arr.ndim == 1 else arr.reshape(arr.shape[0], -1)


def _canonical_pair(x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # Fixed orientation so that (x, y) and (y, x) solve the same problem.
    kx = (x.shape[0], x.tobytes())
    ky = (y.shape[0], y.tobytes())
    return (x, y) if kx <= ky else (y, x)


def _entropic_cost(x: np.ndarray, y: np.ndarray, epsilon: float, cfg: SinkhornConfig) -> SinkhornResult:
    x, y = _canonical_pair(x, y)
    a = ot.unif(x.shape[0])
    b = ot.unif(y.shape[0])
    cost = ot.dist(x, y, metric="sqeuclidean")
    plan, _ = ot.sinkhorn(a, b, cost, epsilon, method="sinkhorn_log",
                          numItermax=cfg.max_iter, stopThr=cfg.threshold * INNER_TOLERANCE_FACTOR, log=True, warn=False)
    plan = np.asarray(plan, dtype=np.float64)
    violation = max(np.abs(plan.sum(axis=1) - a).sum(), np.abs(plan.sum(axis=0) - b).sum())
    ab = np.outer(a, b)
    positive = plan > 0
    kl = np.sum(plan[positive] * np.log(plan[positive] / ab[positive])) - plan.sum() + ab.sum()
    value = float(np.sum(plan * cost) + epsilon * kl)
    converged = bool(violation < cfg.threshold)
    if not converged:
        logger.warning(f"Sinkhorn did not reach marginal violation {cfg.threshold} "
                       f"in {cfg.max_iter} iterations (got {violation:.3e})")
    return SinkhornResult(value, converged, float(violation), epsilon)


def sinkhorn_cost(x, y, cfg: SinkhornConfig = SinkhornConfig()) -> SinkhornResult:
    """Entropic OT value <P, C> + eps KL(P | a x b) with uniform marginals and squared Euclidean cost."""
    x, y = _samples(x), _samples(y)
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ContractError("Sinkhorn needs nonempty sample sets")
    epsilon = cfg.resolve(ot.dist(x, y, metric="sqeuclidean"))
    return _entropic_cost(x, y, epsilon, cfg)


def sinkhorn_divergence(x, y, cfg: SinkhornConfig = SinkhornConfig()) -> SinkhornResult:
    """2 W(x, y) - W(x, x) - W(y, y), all three terms sharing one epsilon."""
    x, y = _samples(x), _samples(y)
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ContractError("Sinkhorn needs nonempty sample sets")
    epsilon = cfg.resolve(ot.dist(x, y, metric="sqeuclidean"))
    xy = _entropic_cost(x, y, epsilon, cfg)
    xx = _entropic_cost(x, x, epsilon, cfg)
    yy = _entropic_cost(y, y, epsilon, cfg)
    value = 2.0 * xy.value - xx.value - yy.value
    converged = xy.converged and xx.converged and yy.converged
    violation = max(xy.marginal_violation, xx.marginal_violation, yy.marginal_violation)
    return SinkhornResult(value, converged, violation, epsilon)


def sinkhorn_divergence_series(truth: np.ndarray, pred: np.ndarray,
                               cfg: SinkhornConfig = SinkhornConfig()) -> Tuple[np.ndarray, bool]:
    """SD between the truth and prediction ensembles at every time step."""
    values = []
    converged = True
    for t in range(truth.shape[1]):
        res = sinkhorn_divergence(truth[:, t], pred[:, t], cfg)
        values.append(res.value)
        converged = converged and res.converged
    return np.asarray(values), converged


def mmd_series(truth: np.ndarray, pred: np.ndarray, kernel: KernelSpec, estimator: str = "biased") -> np.ndarray:
    """Squared MMD between the truth and prediction ensembles at every time step."""
    fn = mmd2_unbiased if estimator == "unbiased" else mmd2_biased
    return np.asarray([fn(truth[:, t], pred[:, t], kernel) for t in range(truth.shape[1])])


# --- Wasserstein-1 in one dimension ---

def w1_empirical_1d(x, y) -> float:
    """(1/n) sum_i |sort(x)_i - sort(y)_i|."""
    x = np.sort(np.asarray(x, dtype=np.float64).ravel())
    y = np.sort(np.asarray(y, dtype=np.float64).ravel())
    if x.size != y.size:
        raise ContractError(f"1D Wasserstein needs equal sample counts, got {x.size} and {y.size}")
    if x.size == 0:
        raise ContractError("1D Wasserstein of empty samples")
    return float(np.mean(np.abs(x - y)))


def lorenz_features(states: np.ndarray) -> Dict[str, np.ndarray]:
    x, y, z = states[..., 0], states[..., 1], states[..., 2]
    return {"x": x, "y": y, "z": z, "xy": x * y, "xz": x * z}


def ks_features(fields: np.ndarray, dx: float) -> Dict[str, np.ndarray]:
    return {"u_x": spatial_derivatives(fields, dx, 1), "u_xx": spatial_derivatives(fields, dx, 2)}


def w1_feature_series(truth_features: Dict[str, np.ndarray],
                      pred_features: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Per-step W1 for each feature; features are (n, T, ...) arrays pooled over everything but time."""
    out = {}
    for name, tf in truth_features.items():
        pf = pred_features[name]
        out[name] = np.asarray([w1_empirical_1d(tf[:, t], pf[:, t]) for t in range(tf.shape[1])])
    return out


def w1_feature_aggregate(truth_features: Dict[str, np.ndarray],
                         pred_features: Dict[str, np.ndarray]) -> Dict[str, float]:
    return {name: w1_empirical_1d(tf, pred_features[name]) for name, tf in truth_features.items()}


# --- Spectra ---

@dataclass(frozen=True)
class SpectrumBins:
    wavenumbers: np.ndarray
    energy: np.ndarray


def energy_spectrum(u) -> SpectrumBins:
    """E(K) = sum over DFT indices k with |k| = K of |u_hat(k)|^2, unnormalized DFT, K = 0..N/2."""
    u = np.asarray(u, dtype=np.float64)
    n = u.shape[-1]
    if n < 2 or n & (n - 1):
        raise ContractError(f"energy spectrum needs a power-of-two grid, got {n}")
    power = np.abs(np.fft.fft(u, axis=-1)) ** 2
    index = np.abs(np.rint(np.fft.fftfreq(n) * n)).astype(int)
    flat = power.reshape(-1, n)
    energy = np.stack([np.bincount(index, weights=row, minlength=n // 2 + 1) for row in flat])
    energy = energy.reshape(u.shape[:-1] + (n // 2 + 1,))
    return SpectrumBins(np.arange(n // 2 + 1), energy)


def mean_spectrum(snapshots: np.ndarray) -> np.ndarray:
    """Energy spectrum of every (..., N) snapshot, averaged over snapshots."""
    snapshots = np.asarray(snapshots, dtype=np.float64)
    energy = energy_spectrum(snapshots).energy
    return energy.reshape(-1, energy.shape[-1]).mean(axis=0)


@dataclass(frozen=True)
class MelrResult:
    value: float
    excluded_bins: Tuple[int, ...]


def melr(pred_snapshots, ref_snapshots, weighting: str = "unweighted") -> MelrResult:
    """
    sum_K w_K |log(E_pred(K) / E_ref(K))| over snapshot-averaged spectra.
    Bins with zero energy on either side are excluded and reported; the
    weights are normalized over the bins that remain.
    """
    e_pred = mean_spectrum(pred_snapshots)
    e_ref = mean_spectrum(ref_snapshots)
    if e_pred.shape != e_ref.shape:
        raise ContractError(f"spectra have different lengths: {e_pred.shape} vs {e_ref.shape}")
    keep = (e_pred > 0) & (e_ref > 0)
    excluded = tuple(int(k) for k in np.flatnonzero(~keep))
    if not keep.any():
        raise UndefinedMetricError("MELR undefined: every spectral bin is empty")
    log_ratio = np.abs(np.log(e_pred[keep] / e_ref[keep]))
    if weighting == "unweighted":
        weights = np.full(log_ratio.shape, 1.0 / log_ratio.size)
    elif weighting == "weighted":
        weights = e_ref[keep] / e_ref[keep].sum()
    else:
        raise ContractError(f"unknown MELR weighting '{weighting}'")
    return MelrResult(float(np.sum(weights * log_ratio)), excluded)


# --- Covariance ---

def empirical_covariance(snapshots: np.ndarray) -> np.ndarray:
    flat = np.asarray(snapshots, dtype=np.float64)
    flat = flat.reshape(-1, flat.shape[-1])
    dev = flat - flat.mean(axis=0)
    return dev.T @ dev / flat.shape[0]


def cov_rmse(pred_snapshots, ref_snapshots) -> float:
    """||Cov_pred - Cov_ref||_F / ||Cov_ref||_F with 1/(number of snapshots) normalization."""
    pred = np.asarray(pred_snapshots, dtype=np.float64)
    ref = np.asarray(ref_snapshots, dtype=np.float64)
    if pred.reshape(-1, pred.shape[-1]).shape[0] < 2 or ref.reshape(-1, ref.shape[-1]).shape[0] < 2:
        raise ContractError("covariance RMSE needs at least two snapshots on each side")
    cov_ref = empirical_covariance(ref)
    denom = np.linalg.norm(cov_ref, "fro")
    if denom == 0:
        raise UndefinedMetricError("covariance RMSE undefined: reference covariance is zero")
    return float(np.linalg.norm(empirical_covariance(pred) - cov_ref, "fro") / denom)


# --- Time correlation ---

def autocorrelation(series: np.ndarray) -> Optional[np.ndarray]:
    """rho(i) = C(i) / C(0) with C(i) = (1/N) sum_k (u_k - m)(u_(k-i) - m); None for a constant series."""
    x = np.asarray(series, dtype=np.float64)
    x = x - x.mean()
    n = x.size
    spec = np.fft.rfft(x, 2 * n)
    acov = np.fft.irfft(spec * np.conj(spec), 2 * n)[:n] / n
    if not acov[0] > 0:
        return None
    return acov / acov[0]


def autocorrelation_time_from_rho(rho: np.ndarray, dt: float, truncation: str = "first_negative") -> float:
    """tau = dt (1 + 2 sum_{i>=1} rho(i)), summed up to the first negative lag unless truncation is 'none'."""
    tail = np.asarray(rho[1:], dtype=np.float64)
    if truncation == "first_negative":
        negative = np.flatnonzero(tail < 0)
        if negative.size:
            tail = tail[:negative[0]]
    elif truncation != "none":
        raise ContractError(f"unknown truncation '{truncation}'")
    return dt * (1.0 + 2.0 * float(np.sum(tail)))


def autocorrelation_time(series: np.ndarray, dt: float, truncation: str = "first_negative") -> Optional[float]:
    rho = autocorrelation(series)
    return None if rho is None else autocorrelation_time_from_rho(rho, dt, truncation)


def _mean_tau(series: np.ndarray, dt: float, truncation: str, label: str) -> float:
    arr = np.asarray(series, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ContractError(f"{label} series must be (T, L) or (n, T, L), got {arr.shape}")
    if arr.shape[1] < 10:
        raise ContractError(f"{label} series needs at least 10 time steps, got {arr.shape[1]}")
    taus = []
    for traj in arr:
        for loc in range(traj.shape[1]):
            tau = autocorrelation_time(traj[:, loc], dt, truncation)
            if tau is not None:
                taus.append(tau)
    if not taus:
        raise UndefinedMetricError(f"TCM undefined: every {label} location has zero variance")
    return float(np.mean(taus))


def tcm(pred: np.ndarray, ref: np.ndarray, dt: float, truncation: str = "first_negative") -> float:
    """|mean_loc tau_pred - mean_loc tau_ref| over per-location time series."""
    return abs(_mean_tau(pred, dt, truncation, "prediction") - _mean_tau(ref, dt, truncation, "reference"))


# --- Finite differences ---

def spatial_derivatives(u: np.ndarray, dx: float, order: int) -> np.ndarray:
    """Periodic central differences along the last axis."""
    u = np.asarray(u, dtype=np.float64)
    right = np.roll(u, -1, axis=-1)
    left = np.roll(u, 1, axis=-1)
    if order == 1:
        return (right - left) / (2.0 * dx)
    if order == 2:
        return (right - 2.0 * u + left) / dx ** 2
    raise ContractError(f"derivative order must be 1 or 2, got {order}")


# --- Report ---

@dataclass
class MetricReport:
    """Per-step series and scalar aggregates of one evaluation run."""

    dt: float
    series: Dict[str, np.ndarray] = field(default_factory=dict)
    aggregates: Dict[str, float] = field(default_factory=dict)
    failures: List[Tuple[int, int]] = field(default_factory=list)
    survivors: int = 0
    warnings: List[str] = field(default_factory=list)

    def check(self) -> None:
        for name, values in self.series.items():
            if not np.all(np.isfinite(values)):
                raise UndefinedMetricError(f"series '{name}' has non-finite values")
        for name, value in self.aggregates.items():
            if not np.isfinite(value):
                raise UndefinedMetricError(f"aggregate '{name}' is not finite")
        sd = self.series.get("sinkhorn_divergence")
        if sd is not None and np.any(sd < SD_FLOOR):
            self.warnings.append(f"Sinkhorn divergence below {SD_FLOOR}: min {float(np.min(sd)):.3e}")
