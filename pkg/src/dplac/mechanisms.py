"""Primitive differentially private operations.

L2 clipping, Gaussian perturbation, the sensitivity-1 private histogram of
one-hot votes used to pick the initial clipping threshold, and the private
scalar-mean channel for client losses. Everything is pure given an explicit
numpy Generator, so callers can parallelize across clients by handing each
one an independently derived stream.
"""

from __future__ import annotations

import numpy as np


def clip(delta: np.ndarray, threshold: float) -> np.ndarray:
    """Scale `delta` to L2 norm at most `threshold`.

    Returns delta * min(1, threshold / ||delta||). Inputs at or below the
    threshold are returned unchanged (same values, fresh array not required).
    """
    if threshold <= 0:
        raise ValueError(f"clipping threshold must be > 0, got {threshold}")
    norm = float(np.linalg.norm(delta))
    if norm <= threshold:
        return delta
    return delta * (threshold / norm)


def gaussian_perturb(v: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """v plus iid zero-mean Gaussian noise of standard deviation sigma.

    sigma = 0 returns v unchanged, bit-exact, without consuming the stream.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return v
    return v + rng.normal(0.0, sigma, size=v.shape)


def one_hot_vote(index: int, size: int) -> np.ndarray:
    """Unit-sensitivity histogram message: a one-hot vector of length `size`."""
    if not 0 <= index < size:
        raise ValueError(f"vote index {index} out of range for size {size}")
    u = np.zeros(size)
    u[index] = 1.0
    return u


def _check_vote(u: np.ndarray) -> None:
    # Sensitivity-1 precondition of the Gaussian mechanism: exactly one 1.
    if u.ndim != 1:
        raise ValueError("votes must be 1-D")
    ones = np.count_nonzero(u == 1.0)
    if ones != 1 or np.count_nonzero(u) != 1:
        raise ValueError("each vote must be one-hot (exactly one entry equal to 1)")


def aggregate_votes(votes: list[np.ndarray], z: float, rng: np.random.Generator) -> np.ndarray:
    """Noisy mean of one-hot votes: (sum(votes) + N(0, z^2 I)) / len(votes).

    Each vote has unit L2 norm, so the Gaussian mechanism runs with clipping
    threshold 1 and the noise standard deviation is z itself. Noise is added
    to the sum before dividing by the vote count.
    """
    if not votes:
        raise ValueError("votes must be nonempty")
    size = votes[0].shape[0]
    total = np.zeros(size)
    for u in votes:
        if u.shape[0] != size:
            raise ValueError("all votes must have the same length")
        _check_vote(u)
        total = total + u
    noisy = gaussian_perturb(total, z, rng)
    return noisy / len(votes)


def select_mode(counts: np.ndarray, grid: np.ndarray) -> float:
    """Grid value at the argmax of the noisy counts; ties go to the smaller index."""
    if counts.shape[0] != grid.shape[0]:
        raise ValueError(
            f"histogram length {counts.shape[0]} does not match grid length {grid.shape[0]}"
        )
    return float(grid[int(np.argmax(counts))])


def nearest_bucket(value: float, grid: np.ndarray) -> int:
    """Index of the grid entry closest to `value`; ties go to the smaller index."""
    if value <= 0:
        raise ValueError(f"bucketed value must be > 0, got {value}")
    return int(np.argmin(np.abs(grid - value)))


def private_scalar_mean(
    values: list[float] | np.ndarray,
    clip_at: float,
    z: float,
    rng: np.random.Generator,
) -> float:
    """Gaussian-mechanism mean of nonnegative scalars clamped to [0, clip_at].

    The noise (std z * clip_at) is added to the clamped sum, then the sum is
    divided by the contribution count.
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("values must be nonempty")
    if clip_at <= 0:
        raise ValueError(f"clip_at must be > 0, got {clip_at}")
    total = float(np.clip(values, 0.0, clip_at).sum())
    if z > 0:
        total += float(rng.normal(0.0, z * clip_at))
    return total / values.size


def validate_threshold_grid(grid) -> np.ndarray:
    """Candidate clipping thresholds: strictly increasing, all positive."""
    s = np.asarray(grid, dtype=float)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("threshold grid must be a nonempty 1-D vector")
    if np.any(s <= 0):
        raise ValueError("threshold grid entries must all be positive")
    if np.any(np.diff(s) <= 0):
        raise ValueError("threshold grid must be strictly increasing")
    return s


def validate_multiplier_grid(mults) -> np.ndarray:
    """Candidate clipping multipliers: strictly increasing in (0, 1], ending at 1."""
    m = np.asarray(mults, dtype=float)
    if m.ndim != 1 or m.size == 0:
        raise ValueError("multiplier grid must be a nonempty 1-D vector")
    if np.any(m <= 0) or np.any(m > 1):
        raise ValueError("multipliers must lie in (0, 1]")
    if np.any(np.diff(m) <= 0):
        raise ValueError("multiplier grid must be strictly increasing")
    if m[-1] != 1.0:
        raise ValueError("multiplier grid must end at 1.0")
    return m
