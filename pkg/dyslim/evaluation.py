# dyslim/evaluation.py
"""
Rollout harness that turns a trained surrogate and a held-out dataset into
a MetricReport, and the metrics CSV writer.

Rollouts start from the first state of every test trajectory and run for
rollout_steps steps in normalized space; metrics are computed on
denormalized states. A trajectory whose rollout blows up is recorded as a
failure and left out of every metric.
"""

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from dyslim import metrics
from dyslim.data_io import Normalizer, TrajectoryDataset
from dyslim.errors import ContractError, NonFiniteError, UndefinedMetricError
from dyslim.metrics import MetricReport, SinkhornConfig
from dyslim.models import rollout_array
from dyslim.objectives import KernelSpec
from dyslim.systems import ICConfig, KSConfig, LorenzParams, ks_solver, lorenz_rhs, rk4_step

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ["run", "metric", "t", "value"]


@dataclass(frozen=True)
class EvalConfig:
    label: str = "run"
    rollout_steps: int = 100
    n_initial_conditions: int = 50
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    tcm_truncation: str = "first_negative"
    decorrelation_threshold: float = 0.5
    mmd_estimator: str = "biased"
    workers: int = 1

    def __post_init__(self):
        if self.rollout_steps < 1 or self.n_initial_conditions < 2:
            raise ContractError("evaluation needs rollout_steps >= 1 and at least two initial conditions")


# --- Reference steppers ---

class IdentitySurrogate:
    """Predicts no change. A sanity baseline for the metric suite."""

    def __init__(self, state_dim: int):
        self.state_dim = state_dim

    def predict(self, u: np.ndarray) -> np.ndarray:
        return np.array(u, dtype=np.float64)


class SolverSurrogate:
    """
    Wraps the ground-truth solver as a stepper over one dataset interval, in
    the normalized coordinates the harness uses.
    """

    def __init__(self, dataset: TrajectoryDataset, normalizer: Normalizer):
        self.normalizer = normalizer
        self.state_dim = dataset.state_dim
        cfg = dataset.config
        if dataset.system == "lorenz":
            self._params = LorenzParams(**cfg["params"]) if "params" in cfg else LorenzParams()
            self._h = float(cfg["h"])
            self._n = int(cfg["downsample_factor"])
            self._advance = self._lorenz
        elif dataset.system == "ks":
            ks_cfg = dict(cfg)
            for key in ("n_trajectories", "record_steps", "seed"):
                ks_cfg.pop(key, None)
            ic = ICConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in ks_cfg.pop("ic").items()})
            self._ks = ks_solver(KSConfig(ic=ic, **ks_cfg))
            self._n = int(round(self._ks.config.sample_interval / self._ks.config.h))
            self._advance = lambda u: self._ks.advance(u, self._n)
        else:
            raise ContractError(f"no reference solver for system '{dataset.system}'")

    def _lorenz(self, u: np.ndarray) -> np.ndarray:
        rhs = lambda s: lorenz_rhs(s, self._params)
        for _ in range(self._n):
            u = rk4_step(rhs, u, self._h)
        return u

    def predict(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        return self.normalizer.apply(self._advance(self.normalizer.invert(u)))


# --- Rollouts ---

def _rollout_rows(stepper, u0: np.ndarray, steps: int) -> Tuple[np.ndarray, List[Tuple[int, int]]]:
    """
    Batched rollout with a per-trajectory fallback: if the batch blows up,
    every trajectory is rerun alone so the failure lands on the right row.
    """
    try:
        return rollout_array(stepper, u0, steps), []
    except NonFiniteError:
        pass
    out = np.full((u0.shape[0], steps, u0.shape[1]), np.nan)
    failures = []
    for i in range(u0.shape[0]):
        try:
            out[i] = rollout_array(stepper, u0[i:i + 1], steps)[0]
        except NonFiniteError as e:
            failures.append((i, int(e.step) if e.step is not None else 0))
    return out, failures


def rollout_ensemble(stepper, initial: np.ndarray, steps: int,
                     workers: int = 1) -> Tuple[np.ndarray, List[Tuple[int, int]]]:
    """Rolls out every row of `initial`; chunks run on a thread pool and are joined in order."""
    if workers <= 1 or initial.shape[0] < 2:
        return _rollout_rows(stepper, initial, steps)
    bounds = np.linspace(0, initial.shape[0], min(workers, initial.shape[0]) + 1).astype(int)
    chunks = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        results = list(pool.map(lambda ab: _rollout_rows(stepper, initial[ab[0]:ab[1]], steps), chunks))
    preds = np.concatenate([r[0] for r in results], axis=0)
    failures = [(a + i, s) for (a, _), (_, fails) in zip(chunks, results) for i, s in fails]
    return preds, failures


# --- Report ---

def evaluate(stepper, dataset: TrajectoryDataset, normalizer: Normalizer, config: EvalConfig,
             kernel: Optional[KernelSpec] = None) -> MetricReport:
    """
    Computes the full metric suite for `stepper` against the first
    n_initial_conditions trajectories of `dataset`.
    """
    steps = config.rollout_steps
    if dataset.steps < steps + 1:
        raise ContractError(f"test trajectories hold {dataset.steps} states, rollout needs {steps + 1}")
    n = min(config.n_initial_conditions, dataset.n_trajectories)
    truth = dataset.data[:n, 1:steps + 1]
    initial = normalizer.apply(dataset.data[:n, 0])

    logger.info(f"Rolling out {n} trajectories for {steps} steps")
    pred_norm, failures = rollout_ensemble(stepper, initial, steps, config.workers)
    report = MetricReport(dt=dataset.dt, failures=failures)
    failed = {i for i, _ in failures}
    alive = [i for i in range(n) if i not in failed]
    report.survivors = len(alive)
    report.aggregates["survivors"] = float(len(alive))
    for i, s in failures:
        logger.warning(f"Trajectory {i} blew up at rollout step {s}")
    if len(alive) < 2:
        report.warnings.append("fewer than two surviving trajectories; metrics skipped")
        return report

    truth = truth[alive]
    pred = normalizer.invert(pred_norm[alive])
    truth_norm = normalizer.apply(truth)
    pred_norm = pred_norm[alive]

    cosine = metrics.cosine_similarity_series(truth, pred)
    report.series["cosine_similarity"] = cosine
    report.aggregates["decorrelation_time"] = metrics.decorrelation_time(
        cosine, dataset.dt, config.decorrelation_threshold)

    sd, converged = metrics.sinkhorn_divergence_series(truth, pred, config.sinkhorn)
    report.series["sinkhorn_divergence"] = sd
    if not converged:
        report.warnings.append("Sinkhorn did not converge at every step")

    report.series["mmd"] = metrics.mmd_series(truth_norm, pred_norm, kernel or KernelSpec(), config.mmd_estimator)

    if dataset.system == "ks":
        dx = float(dataset.config.get("L", 64.0)) / dataset.state_dim
        truth_feat = metrics.ks_features(truth, dx)
        pred_feat = metrics.ks_features(pred, dx)
        melr = metrics.melr(pred, truth, "unweighted")
        melr_w = metrics.melr(pred, truth, "weighted")
        report.aggregates["melr"] = melr.value
        report.aggregates["melr_weighted"] = melr_w.value
        report.aggregates["melr_excluded_bins"] = float(len(melr.excluded_bins))
    else:
        truth_feat = metrics.lorenz_features(truth)
        pred_feat = metrics.lorenz_features(pred)

    for name, values in metrics.w1_feature_series(truth_feat, pred_feat).items():
        report.series[f"w1_{name}"] = values
    for name, value in metrics.w1_feature_aggregate(truth_feat, pred_feat).items():
        report.aggregates[f"w1_{name}"] = value

    try:
        report.aggregates["cov_rmse"] = metrics.cov_rmse(pred, truth)
    except UndefinedMetricError as e:
        report.warnings.append(str(e))
    if steps >= 10:
        try:
            report.aggregates["tcm"] = metrics.tcm(pred, truth, dataset.dt, config.tcm_truncation)
        except UndefinedMetricError as e:
            report.warnings.append(str(e))
    report.check()
    return report


def report_rows(report: MetricReport, run: str) -> List[List[str]]:
    """Long-format rows (run, metric, t, value); t is empty for aggregates."""
    rows = []
    for name, values in report.series.items():
        for t, value in enumerate(values, start=1):
            rows.append([run, name, repr(t * report.dt), repr(float(value))])
    for name, value in report.aggregates.items():
        rows.append([run, name, "", repr(float(value))])
    for index, step in report.failures:
        rows.append([run, f"failed_trajectory_{index}", repr(step * report.dt), repr(float(step))])
    return rows


def write_metrics_csv(path: str, report: MetricReport, run: str, config_hash: str,
                      seed: Optional[int] = None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# config_hash: {config_hash}\n")
        if seed is not None:
            f.write(f"# seed: {seed}\n")
        writer = csv.writer(f)
        writer.writerow(METRICS_COLUMNS)
        writer.writerows(report_rows(report, run))
    logger.info(f"Wrote {path}")
