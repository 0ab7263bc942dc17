# dyslim/systems.py
"""
Ground-truth dynamics used to generate training and test data.

- Lorenz 63, integrated with classical RK4 and downsampled.
- Kuramoto-Sivashinsky on a periodic domain,
      u_t = -u u_x - nu u_xx - nu u_xxxx,
  advanced with a Fourier pseudo-spectral ETDRK4 scheme (linear part exact,
  coefficients from a contour integral, 2/3-rule dealiasing).

Every trajectory draws from its own generator seeded by
SeedSequence([seed, trajectory_index]), so results do not depend on how
trajectories are split between workers.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from dyslim.data_io import TrajectoryDataset
from dyslim.errors import ConfigError, GenerationError, NonFiniteError

logger = logging.getLogger(__name__)

# --- Constants ---
CONTOUR_POINTS = 32
FINITE_CHECK_EVERY = 1000

Rhs = Callable[[np.ndarray], np.ndarray]


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """The per-trajectory random stream: SeedSequence entropy [seed, index]."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _chunks(n: int, workers: int) -> List[Tuple[int, int]]:
    workers = max(1, min(int(workers), n)) if n > 0 else 1
    bounds = np.linspace(0, n, workers + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _run_chunks(fn, n: int, workers: int, *args) -> np.ndarray:
    chunks = _chunks(n, workers)
    if len(chunks) <= 1:
        return np.concatenate([fn(a, b, *args) for a, b in chunks], axis=0)
    with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
        futures = [pool.submit(fn, a, b, *args) for a, b in chunks]
        return np.concatenate([f.result() for f in futures], axis=0)


# --- Lorenz 63 ---

@dataclass(frozen=True)
class LorenzParams:
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0


@dataclass(frozen=True)
class LorenzGenConfig:
    h: float = 0.001
    warmup_steps: int = 100_000
    downsample_factor: int = 400
    n_trajectories: int = 8
    steps_per_trajectory: int = 40_000
    seed: int = 0
    init_low: Tuple[float, float, float] = (-20.0, -25.0, 5.0)
    init_high: Tuple[float, float, float] = (20.0, 25.0, 45.0)
    params: LorenzParams = field(default_factory=LorenzParams)

    def __post_init__(self):
        if not self.h > 0:
            raise ConfigError(f"lorenz h must be positive, got {self.h}")
        if self.downsample_factor < 1:
            raise ConfigError(f"downsample_factor must be >= 1, got {self.downsample_factor}")
        if self.warmup_steps < 0 or self.n_trajectories < 0 or self.steps_per_trajectory < 0:
            raise ConfigError("lorenz step and trajectory counts must be non-negative")

    @property
    def dt(self) -> float:
        return self.h * self.downsample_factor


def lorenz_rhs(state: np.ndarray, params: LorenzParams = LorenzParams()) -> np.ndarray:
    """(sigma (y - x), rho x - y - x z, x y - beta z) on the last axis."""
    x, y, z = state[..., 0], state[..., 1], state[..., 2]
    return np.stack([
        params.sigma * (y - x),
        params.rho * x - y - x * z,
        x * y - params.beta * z,
    ], axis=-1)


def rk4_step(rhs: Rhs, state: np.ndarray, h: float, check: bool = True) -> np.ndarray:
    """One classical fourth-order Runge-Kutta step."""
    with np.errstate(all="ignore"):
        k1 = rhs(state)
        k2 = rhs(state + 0.5 * h * k1)
        k3 = rhs(state + 0.5 * h * k2)
        k4 = rhs(state + h * k3)
        out = state + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if check and not np.all(np.isfinite(out)):
        raise NonFiniteError("RK4 step produced a non-finite state")
    return out


def _first_bad_row(states: np.ndarray) -> Optional[int]:
    bad = ~np.all(np.isfinite(states.reshape(states.shape[0], -1)), axis=1)
    return int(np.argmax(bad)) if bad.any() else None


def _lorenz_chunk(start: int, stop: int, config: LorenzGenConfig) -> np.ndarray:
    low = np.asarray(config.init_low)
    high = np.asarray(config.init_high)
    states = np.stack([trajectory_rng(config.seed, i).uniform(low, high) for i in range(start, stop)])
    rhs = lambda s: lorenz_rhs(s, config.params)

    for step in range(config.warmup_steps):
        states = rk4_step(rhs, states, config.h, check=False)
        if (step + 1) % FINITE_CHECK_EVERY == 0:
            bad = _first_bad_row(states)
            if bad is not None:
                raise GenerationError("Lorenz warm-up blew up", start + bad)
    bad = _first_bad_row(states)
    if bad is not None:
        raise GenerationError("Lorenz warm-up blew up", start + bad)

    n_records = config.steps_per_trajectory // config.downsample_factor
    out = np.empty((stop - start, n_records, 3))
    for r in range(n_records):
        for _ in range(config.downsample_factor):
            states = rk4_step(rhs, states, config.h, check=False)
        bad = _first_bad_row(states)
        if bad is not None:
            raise GenerationError("Lorenz trajectory blew up", start + bad)
        out[:, r] = states
    return out


def generate_lorenz_dataset(config: LorenzGenConfig, workers: int = 1) -> TrajectoryDataset:
    """
    Random initial state per trajectory, warm-up steps discarded, then
    steps_per_trajectory solver steps of which every downsample_factor-th
    state is kept. The stored dt is h * downsample_factor.
    """
    logger.info(f"Generating {config.n_trajectories} Lorenz trajectories "
                f"({config.warmup_steps} warm-up, {config.steps_per_trajectory} recorded steps)")
    if config.n_trajectories == 0:
        data = np.zeros((0, config.steps_per_trajectory // config.downsample_factor, 3))
    else:
        data = _run_chunks(_lorenz_chunk, config.n_trajectories, workers, config)
    return TrajectoryDataset(system="lorenz", dt=config.dt, data=data, config=asdict(config))


# --- Kuramoto-Sivashinsky ---

@dataclass(frozen=True)
class ICConfig:
    n_c: int = 30
    wave_multipliers: Tuple[int, ...] = (1, 2, 3)
    amplitude_range: Tuple[float, float] = (-0.5, 0.5)
    phase_range: Tuple[float, float] = (0.0, 2.0 * math.pi)

    def __post_init__(self):
        if self.n_c < 0:
            raise ConfigError(f"n_c must be non-negative, got {self.n_c}")
        if not self.wave_multipliers:
            raise ConfigError("wave_multipliers must not be empty")


@dataclass(frozen=True)
class KSConfig:
    L: float = 64.0
    N: int = 512
    nu: float = 1.0
    h: float = 0.001
    sample_interval: float = 0.2
    warmup_time: float = 20.0
    ic: ICConfig = field(default_factory=ICConfig)

    def __post_init__(self):
        if self.N < 2 or self.N & (self.N - 1):
            raise ConfigError(f"KS grid size N must be a power of two, got {self.N}")
        if not (self.L > 0 and self.h > 0 and self.nu > 0):
            raise ConfigError("KS L, h and nu must be positive")
        if self.sample_interval <= 0 or self.warmup_time < 0:
            raise ConfigError("KS sample_interval must be positive and warmup_time non-negative")

    @property
    def dx(self) -> float:
        return self.L / self.N

    def grid(self) -> np.ndarray:
        return self.L * np.arange(self.N) / self.N


def sinusoid_field(amplitudes: np.ndarray, omegas: np.ndarray, phases: np.ndarray, x: np.ndarray) -> np.ndarray:
    u = np.zeros_like(x, dtype=np.float64)
    for a, w, p in zip(amplitudes, omegas, phases):
        u += a * np.sin(w * x + p)
    return u


def ks_initial_condition(rng: np.random.Generator, config: ICConfig, N: int, L: float) -> np.ndarray:
    """u0(x) = sum_j a_j sin(omega_j x + phi_j) on the uniform grid x_i = i L / N."""
    x = L * np.arange(N) / N
    amplitudes = rng.uniform(config.amplitude_range[0], config.amplitude_range[1], config.n_c)
    multipliers = rng.choice(np.asarray(config.wave_multipliers), size=config.n_c)
    phases = rng.uniform(config.phase_range[0], config.phase_range[1], config.n_c)
    omegas = 2.0 * math.pi * multipliers / L
    return sinusoid_field(amplitudes, omegas, phases, x)


class KSSolver:
    """ETDRK4 stepper for one KS configuration; coefficients are built once."""

    def __init__(self, config: KSConfig, nonlinear: bool = True):
        self.config = config
        self.nonlinear = nonlinear
        n, h, nu = config.N, config.h, config.nu
        k = 2.0 * math.pi / config.L * np.arange(n // 2 + 1)
        self.linear = nu * k ** 2 - nu * k ** 4

        # first-derivative symbol with the Nyquist mode zeroed
        deriv = 1j * k
        deriv[-1] = 0.0
        keep = np.arange(n // 2 + 1) <= n // 3
        self._nl_symbol = -0.5 * deriv * keep

        hl = h * self.linear
        self.E = np.exp(hl)
        self.E2 = np.exp(hl / 2.0)
        roots = np.exp(1j * math.pi * (np.arange(1, CONTOUR_POINTS + 1) - 0.5) / CONTOUR_POINTS)
        lr = hl[:, None] + roots[None, :]
        self.Q = h * np.real(np.mean((np.exp(lr / 2.0) - 1.0) / lr, axis=1))
        self.f1 = h * np.real(np.mean((-4.0 - lr + np.exp(lr) * (4.0 - 3.0 * lr + lr ** 2)) / lr ** 3, axis=1))
        self.f2 = h * np.real(np.mean((2.0 + lr + np.exp(lr) * (-2.0 + lr)) / lr ** 3, axis=1))
        self.f3 = h * np.real(np.mean((-4.0 - 3.0 * lr - lr ** 2 + np.exp(lr) * (4.0 - lr)) / lr ** 3, axis=1))

    def _nonlinear(self, v: np.ndarray) -> np.ndarray:
        if not self.nonlinear:
            return np.zeros_like(v)
        u = np.fft.irfft(v, n=self.config.N, axis=-1)
        return self._nl_symbol * np.fft.rfft(u * u, axis=-1)

    def step_spectral(self, v: np.ndarray) -> np.ndarray:
        nv = self._nonlinear(v)
        a = self.E2 * v + self.Q * nv
        na = self._nonlinear(a)
        b = self.E2 * v + self.Q * na
        nb = self._nonlinear(b)
        c = self.E2 * a + self.Q * (2.0 * nb - nv)
        nc = self._nonlinear(c)
        return self.E * v + nv * self.f1 + 2.0 * (na + nb) * self.f2 + nc * self.f3

    def advance(self, u: np.ndarray, n_steps: int, check: bool = True) -> np.ndarray:
        """Advances physical-space field(s) of shape (..., N) by n_steps steps of size h."""
        if u.shape[-1] != self.config.N:
            raise ConfigError(f"state has {u.shape[-1]} points, solver expects N = {self.config.N}")
        with np.errstate(all="ignore"):
            v = np.fft.rfft(u, axis=-1)
            for _ in range(n_steps):
                v = self.step_spectral(v)
            out = np.fft.irfft(v, n=self.config.N, axis=-1)
        if check and not np.all(np.isfinite(out)):
            raise NonFiniteError("KS step produced a non-finite state")
        return out


@lru_cache(maxsize=8)
def ks_solver(config: KSConfig, nonlinear: bool = True) -> KSSolver:
    return KSSolver(config, nonlinear)


def ks_step(state: np.ndarray, config: KSConfig, nonlinear: bool = True) -> np.ndarray:
    """Advances a KS field by one solver step h."""
    if not np.all(np.isfinite(state)):
        raise NonFiniteError("KS step received a non-finite state")
    return ks_solver(config, nonlinear).advance(np.asarray(state, dtype=np.float64), 1)


def _steps_per_interval(config: KSConfig) -> int:
    ratio = config.sample_interval / config.h
    n = int(round(ratio))
    if n < 1 or abs(ratio - n) > 1e-9 * max(1.0, ratio):
        raise ConfigError(f"sample_interval {config.sample_interval} is not a multiple of h {config.h}")
    return n


def _ks_chunk(start: int, stop: int, config: KSConfig, record_steps: int, seed: int) -> np.ndarray:
    solver = ks_solver(config)
    u = np.stack([ks_initial_condition(trajectory_rng(seed, i), config.ic, config.N, config.L)
                  for i in range(start, stop)])
    sub = _steps_per_interval(config)
    warmup = int(round(config.warmup_time / config.h))

    done = 0
    while done < warmup:
        block = min(FINITE_CHECK_EVERY, warmup - done)
        u = solver.advance(u, block, check=False)
        bad = _first_bad_row(u)
        if bad is not None:
            raise GenerationError("KS warm-up blew up", start + bad)
        done += block

    out = np.empty((stop - start, record_steps, config.N))
    for r in range(record_steps):
        if r > 0:
            u = solver.advance(u, sub, check=False)
            bad = _first_bad_row(u)
            if bad is not None:
                raise GenerationError("KS trajectory blew up", start + bad)
        out[:, r] = u
    return out


def generate_ks_dataset(config: KSConfig, n_trajectories: int, record_steps: int, seed: int,
                        workers: int = 1) -> TrajectoryDataset:
    """
    Samples an initial field per trajectory, integrates warmup_time and
    discards it, then records record_steps fields spaced sample_interval apart.
    """
    _steps_per_interval(config)
    logger.info(f"Generating {n_trajectories} KS trajectories of {record_steps} states (N = {config.N})")
    if n_trajectories == 0:
        data = np.zeros((0, record_steps, config.N))
    else:
        data = _run_chunks(_ks_chunk, n_trajectories, workers, config, record_steps, seed)
    echo = dict(asdict(config), n_trajectories=n_trajectories, record_steps=record_steps, seed=seed)
    return TrajectoryDataset(system="ks", dt=config.sample_interval, data=data, config=echo)


def integrate_lorenz(state: np.ndarray, h: float, n_steps: int, params: LorenzParams = LorenzParams()) -> np.ndarray:
    """Plain RK4 integration, used by oracles and the solver surrogate."""
    rhs = lambda s: lorenz_rhs(s, params)
    for _ in range(n_steps):
        state = rk4_step(rhs, state, h)
    return state


def lorenz_equilibria(params: LorenzParams = LorenzParams()) -> Sequence[np.ndarray]:
    r = math.sqrt(params.beta * (params.rho - 1.0))
    return [np.zeros(3), np.array([r, r, params.rho - 1.0]), np.array([-r, -r, params.rho - 1.0])]
