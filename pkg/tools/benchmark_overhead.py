#!/usr/bin/env python3
"""
Measures the per-step cost of the MMD regularizers on the Lorenz surrogate.

Runs the same number of optimizer steps with and without the regularizers
on synthetic Lorenz windows and prints the ratio of median step times.
"""

import argparse
import os
import sys
import time

import numpy as np

# --- Path Setup ---
SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))
PROJECT_ROOT = os.path.abspath(os.path.join(SCRIPT_DIR, '..'))
sys.path.insert(0, PROJECT_ROOT)

# --- Local/Project Imports ---
try:
    from dyslim.data_io import fit_normalizer
    from dyslim.models import MlpStepperSpec, Surrogate
    from dyslim.objectives import DyslimConfig
    from dyslim.systems import LorenzGenConfig, generate_lorenz_dataset
    from dyslim.training import AdamState, sample_windows, train_step
except ImportError:
    print("Error: The 'dyslim' package is not found.", file=sys.stderr)
    print("Please ensure the script is in a 'tools' directory next to the 'dyslim' package.", file=sys.stderr)
    sys.exit(1)

MAX_RATIO = 1.25


def time_steps(objective: DyslimConfig, dataset, normalizer, steps: int, batch_size: int, seed: int) -> np.ndarray:
    surrogate = Surrogate(MlpStepperSpec(state_dim=3), seed=seed)
    adam = AdamState.zeros(surrogate.params.size)
    rng = np.random.default_rng(seed)
    times = np.empty(steps)
    for i in range(steps):
        batch = sample_windows(dataset, rng, batch_size, 1, normalizer=normalizer)
        began = time.perf_counter()
        adam, _ = train_step(surrogate, adam, batch, objective, 1, 1e-4)
        times[i] = time.perf_counter() - began
    return times


def main():
    parser = argparse.ArgumentParser(
        description="Compare training step time with and without the MMD regularizers.",
        formatter_class=argparse.RawTextHelpFormatter
    )
    parser.add_argument('--steps', type=int, default=1000, help="Steps per configuration.\n(default: 1000)")
    parser.add_argument('--batch-size', type=int, default=64, help="Batch size.\n(default: 64)")
    parser.add_argument('--seed', type=int, default=0)
    args = parser.parse_args()

    print("Generating a small Lorenz dataset...")
    dataset = generate_lorenz_dataset(LorenzGenConfig(warmup_steps=10_000, n_trajectories=16,
                                                      steps_per_trajectory=100 * 400, seed=args.seed))
    normalizer = fit_normalizer(dataset)

    plain = time_steps(DyslimConfig(lambda1=0.0, lambda2=0.0), dataset, normalizer,
                       args.steps, args.batch_size, args.seed)
    regularized = time_steps(DyslimConfig(lambda1=1.0, lambda2=100.0), dataset, normalizer,
                             args.steps, args.batch_size, args.seed)
    ratio = float(np.median(regularized) / np.median(plain))

    print(f"Median step without regularizers: {1000 * np.median(plain):.3f} ms")
    print(f"Median step with regularizers:    {1000 * np.median(regularized):.3f} ms")
    print(f"Ratio: {ratio:.3f} (target <= {MAX_RATIO})")
    sys.exit(0 if ratio <= MAX_RATIO else 1)


if __name__ == '__main__':
    main()
