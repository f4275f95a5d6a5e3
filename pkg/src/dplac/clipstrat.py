"""Clipping-threshold strategies for the federated server loop.

Three interchangeable policies sit behind one seam: a fixed threshold, a
loss-adaptive threshold that decays whenever the validation loss stops
improving (the threshold update in ``update_c``), and a variant of the
adaptive policy that replaces server-side validation loss with a privately
aggregated mean of client losses. The round-1 private initialization built
from one-hot client votes lives here too.

All state transitions are pure: the server owns a ClipState and replaces it
once per round via ``strategy_step``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import flcore, mechanisms

# Candidate thresholds: {1, 1.25, 1.5, 2, 2.5, 3, 4, 6, 8} spread across three
# decades. 27 values, strictly increasing.
DEFAULT_THRESHOLD_GRID: tuple[float, ...] = tuple(
    sorted(b * s for b in (1.0, 1.25, 1.5, 2.0, 2.5, 3.0, 4.0, 6.0, 8.0) for s in (0.1, 1.0, 10.0))
)

# Fractions of a client's own update norm tried when voting; the last entry
# must be 1.0 so the noiseless variant can reproduce the unclipped update.
DEFAULT_MULTIPLIER_GRID: tuple[float, ...] = (0.1, 0.3, 0.5, 0.7, 0.9, 1.0)

# Buckets for the private round-1 loss estimate used when no server-side
# validation loss is available: 25 log-spaced values spanning [0.01, 100].
DEFAULT_LOSS_GRID: tuple[float, ...] = tuple(np.logspace(-2.0, 2.0, 25))

VALID_KINDS = ("fixed", "dp_lac", "dp_clac")


@dataclass(frozen=True)
class ClipState:
    """Server-side threshold state: current C plus the last two loss signals.

    The loss fields are nominally nonnegative, but the private loss channel
    can push them below zero; ``update_c`` guards against that instead of
    rejecting the state.
    """

    C: float
    v_prev: float
    v_prev2: float

    def __post_init__(self) -> None:
        if not (self.C > 0 and np.isfinite(self.C)):
            raise ValueError("threshold C must be positive and finite")
        if not (np.isfinite(self.v_prev) and np.isfinite(self.v_prev2)):
            raise ValueError("loss signals must be finite")


@dataclass(frozen=True)
class StrategyKind:
    """Which threshold policy runs, and the budget split for the private one."""

    kind: str
    fraction_train: float = 2.0 / 3.0

    def __post_init__(self) -> None:
        if self.kind not in VALID_KINDS:
            raise ValueError(f"kind must be one of {VALID_KINDS}, got {self.kind!r}")
        if not 0 < self.fraction_train < 1:
            raise ValueError("fraction_train must lie in (0, 1)")

    @property
    def adaptive(self) -> bool:
        return self.kind in ("dp_lac", "dp_clac")


@dataclass(frozen=True)
class InitCReport:
    """Where the starting threshold came from: histogram vote or configuration."""

    C0: float
    source: str  # "hist" or "configured"
    noisy_histogram: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.C0 <= 0:
            raise ValueError("C0 must be positive")
        if self.source not in ("hist", "configured"):
            raise ValueError(f"source must be 'hist' or 'configured', got {self.source!r}")
        if self.source == "hist" and self.noisy_histogram is None:
            raise ValueError("hist source requires the noisy histogram")


def update_c(state: ClipState) -> tuple[float, bool]:
    """Threshold decay step: C' = C * min(1, v_prev / v_prev2).

    Returns (new_threshold, held). When either loss signal is nonpositive the
    ratio is undefined or would drive C to zero or below, so the threshold is
    held unchanged and the hold is reported for the round log.
    """
    if state.v_prev2 <= 0 or state.v_prev <= 0:
        return state.C, True
    return state.C * min(1.0, state.v_prev / state.v_prev2), False


def strategy_step(kind: StrategyKind, state: ClipState, v_new: float) -> ClipState:
    """Advance the state one round: refresh C (adaptive kinds) and shift losses."""
    if kind.adaptive:
        c_new, _ = update_c(state)
    else:
        c_new = state.C
    return ClipState(C=c_new, v_prev=v_new, v_prev2=state.v_prev)


def client_vote(
    model: flcore.Model,
    data: flcore.Dataset,
    cfg: flcore.LocalConfig,
    grid,
    mults,
    z: float,
    total_clients: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """One client's one-hot threshold vote.

    The client trains locally, then simulates what each candidate clipping
    fraction of its own update norm would do once server noise is added: for
    each multiplier m it clips the update at m times the norm, perturbs it
    with per-coordinate variance (z * m * norm)^2 / total_clients, and scores
    the loss of the perturbed update on its own data. The multiplier whose
    noisy loss lands closest to the noiseless local loss wins (ties to the
    smaller multiplier), and the vote is the grid bucket nearest to that
    multiplier times the norm. A zero-norm update votes for the smallest
    bucket.
    """
    grid = mechanisms.validate_threshold_grid(grid)
    mults = mechanisms.validate_multiplier_grid(mults)
    if total_clients < 1:
        raise ValueError("total_clients must be >= 1")
    delta = flcore.user_update(model, data, cfg, rng)
    norm = float(np.linalg.norm(delta))
    if norm == 0.0:
        return mechanisms.one_hot_vote(0, grid.size)
    local_loss = flcore.loss(model.with_params(model.params + delta), data)
    diffs = np.empty(len(mults))
    root_clients = np.sqrt(total_clients)
    for i, m in enumerate(mults):
        clipped = mechanisms.clip(delta, m * norm)
        noisy = mechanisms.gaussian_perturb(clipped, z * m * norm / root_clients, rng)
        noisy_loss = flcore.loss(model.with_params(model.params + noisy), data)
        diffs[i] = abs(noisy_loss - local_loss)
    best = int(np.argmin(diffs))
    bucket = mechanisms.nearest_bucket(mults[best] * norm, grid)
    return mechanisms.one_hot_vote(bucket, grid.size)


def client_loss(
    model: flcore.Model,
    data: flcore.Dataset,
    cfg: flcore.LocalConfig,
    rng: np.random.Generator,
) -> float:
    """A client's scalar loss signal: loss of its locally updated model on its data."""
    delta = flcore.user_update(model, data, cfg, rng)
    return flcore.loss(model.with_params(model.params + delta), data)


def loss_vote(value: float, grid) -> np.ndarray:
    """One-hot vote for the loss bucket nearest to `value` (nonpositive -> bucket 0)."""
    grid = np.asarray(grid, dtype=float)
    if value <= 0:
        return mechanisms.one_hot_vote(0, grid.size)
    return mechanisms.one_hot_vote(mechanisms.nearest_bucket(value, grid), grid.size)


def init_c(votes, grid, z: float, rng: np.random.Generator) -> InitCReport:
    """Noisy-histogram aggregation of client votes; C0 is the modal bucket's value."""
    grid = np.asarray(grid, dtype=float)
    hist = mechanisms.aggregate_votes(votes, z, rng)
    return InitCReport(
        C0=mechanisms.select_mode(hist, grid), source="hist", noisy_histogram=hist
    )


def clac_loss_channel(
    losses, prev_mean: float, z_loss: float, rng: np.random.Generator
) -> float:
    """Private mean of client losses, clipped at the previous round's noisy mean."""
    if prev_mean <= 0:
        raise ValueError("prev_mean must be positive")
    return mechanisms.private_scalar_mean(losses, prev_mean, z_loss, rng)
