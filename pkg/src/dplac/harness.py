"""Federated training server loop with differentially private aggregation.

One process simulates server and clients: per-round Poisson cohort
sampling, local SGD on each sampled client's shard, clipping plus a single
Gaussian draw on the summed updates, threshold adaptation between rounds,
and per-round telemetry. Client work fans out to an optional thread pool;
every stochastic step draws from a stream derived from (master_seed, round,
client, purpose), so results are bit-identical regardless of worker count.
"""

from __future__ import annotations

import concurrent.futures
import struct
import time
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from . import accountant, clipstrat, flcore, mechanisms

# Stream namespaces. Codes are part of the determinism contract: changing
# them changes every derived stream.
_PURPOSE_CODES = {
    "sample": 1,  # cohort selection (server, per round)
    "local": 2,  # client SGD shuffles (per round, per client)
    "noise": 3,  # aggregation Gaussian (server, per round)
    "vote": 4,  # round-1 threshold vote (per client)
    "init": 5,  # round-1 vote histogram noise (server)
    "lossvote": 6,  # round-1 loss estimate, client side
    "init_loss": 7,  # round-1 loss histogram noise (server)
    "loss_noise": 8,  # per-round scalar loss channel noise (server)
    "model_init": 9,  # mlp weight initialization (server, round 0)
}

CSV_HEADER = "round,cohort_size,C,v,sigma,acc,loss,flags"

_MODEL_MAGIC = b"DPLC"
_MODEL_VERSION = 1


@dataclass(frozen=True)
class DataSpec:
    """Where the training and validation data come from.

    source "synth" draws Gaussian cluster data (validation from seed + 1);
    source "files" loads the tabular text format from the two paths.
    """

    source: str = "synth"
    samples: int = 2000
    features: int = 10
    classes: int = 2
    separation: float = 3.0
    seed: int = 0
    val_samples: int = 400
    train_path: str | None = None
    val_path: str | None = None

    def __post_init__(self) -> None:
        if self.source not in ("synth", "files"):
            raise ValueError(f"data source must be 'synth' or 'files', got {self.source!r}")
        if self.source == "synth":
            if self.samples < 1 or self.val_samples < 1:
                raise ValueError("synthetic data needs samples >= 1 and val_samples >= 1")
        elif not (self.train_path and self.val_path):
            raise ValueError("file data source requires train_path and val_path")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one run needs; privacy.rounds doubles as the round count T."""

    privacy: accountant.PrivacySpec
    local: flcore.LocalConfig
    strategy: clipstrat.StrategyKind
    num_clients: int
    data: DataSpec
    partition: flcore.PartitionSpec
    grid: tuple[float, ...] = clipstrat.DEFAULT_THRESHOLD_GRID
    mults: tuple[float, ...] = clipstrat.DEFAULT_MULTIPLIER_GRID
    model_kind: str = "logistic"
    hidden: int = 16
    initial_C: float | None = None
    master_seed: int = 0
    force_z: float | None = None  # bypass the accountant (testing/ablation)

    def __post_init__(self) -> None:
        mechanisms.validate_threshold_grid(self.grid)
        mechanisms.validate_multiplier_grid(self.mults)
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.privacy.q * self.num_clients < 1:
            raise ValueError(
                f"expected cohort q*N = {self.privacy.q * self.num_clients:.3g} < 1; "
                "raise q or num_clients"
            )
        if self.privacy.rounds < 2:
            raise ValueError("need at least 2 rounds (round 1 only initializes)")
        if self.partition.num_clients != self.num_clients:
            raise ValueError("partition.num_clients must equal num_clients")
        if self.model_kind not in ("logistic", "mlp"):
            raise ValueError(f"model_kind must be 'logistic' or 'mlp', got {self.model_kind!r}")
        if self.model_kind == "mlp" and self.hidden < 1:
            raise ValueError("mlp model needs hidden >= 1")
        if self.initial_C is not None and not self.initial_C > 0:
            raise ValueError("initial_C must be positive when set")
        if self.strategy.kind == "fixed" and self.initial_C is None:
            raise ValueError("the fixed strategy needs an explicit initial_C")
        if self.master_seed < 0:
            raise ValueError("master_seed must be >= 0")
        if self.force_z is not None and self.force_z < 0:
            raise ValueError("force_z must be >= 0 when set")

    @property
    def rounds(self) -> int:
        return self.privacy.rounds


@dataclass(frozen=True)
class RoundRecord:
    """One row of the experiment log."""

    t: int
    cohort_ids: tuple[int, ...]
    C: float
    v: float
    sigma: float
    eval_accuracy: float
    eval_loss: float
    wall_ms: float
    flags: tuple[str, ...]


@dataclass(frozen=True)
class ExperimentResult:
    """Run output; v0 is the loss value that seeded the threshold recurrence."""

    records: list[RoundRecord]
    model: flcore.Model
    init_report: clipstrat.InitCReport
    z: float
    z_loss: float | None
    v0: float


def derive_rng(
    master_seed: int, round_idx: int, client: int, purpose: str
) -> np.random.Generator:
    """Independent stream for one (round, client, purpose) slot.

    Server-scope streams pass client = -1. Distinct argument tuples map to
    distinct seed-sequence entropy, so streams never depend on scheduling
    order; the same tuple always reproduces the same stream.
    """
    if purpose not in _PURPOSE_CODES:
        raise ValueError(
            f"unknown purpose {purpose!r}; expected one of {sorted(_PURPOSE_CODES)}"
        )
    if master_seed < 0 or round_idx < 0 or client < -1:
        raise ValueError("master_seed, round_idx must be >= 0 and client >= -1")
    seq = np.random.SeedSequence(
        (master_seed, round_idx, client + 1, _PURPOSE_CODES[purpose])
    )
    return np.random.default_rng(seq)


def sample_cohort(num_clients: int, q: float, rng: np.random.Generator) -> list[int]:
    """Poisson sampling: each client joins independently with probability q."""
    if not 0 < q <= 1:
        raise ValueError(f"sampling rate q must be in (0, 1], got {q}")
    mask = rng.random(num_clients) < q
    return [int(i) for i in np.flatnonzero(mask)]


def update_w(
    model: flcore.Model,
    deltas: list[np.ndarray],
    threshold: float,
    z: float,
    rng: np.random.Generator,
) -> flcore.Model:
    """DP aggregation: clip each update at C, sum, add N(0, (zC)^2 I), average.

    The sum is accumulated sequentially in the order given, which keeps the
    result bit-reproducible against reference loops that do the same.
    """
    if not deltas:
        raise ValueError("deltas must be nonempty; skip the round instead")
    dim = model.params.shape[0]
    total = np.zeros(dim)
    for delta in deltas:
        if delta.shape != (dim,):
            raise ValueError("all deltas must match the model dimension")
        total += mechanisms.clip(delta, threshold)
    noisy = mechanisms.gaussian_perturb(total, z * threshold, rng)
    return model.with_params(model.params + noisy / len(deltas))


def _map_clients(fn, cohort: list[int], workers: int) -> list:
    if workers <= 1 or len(cohort) <= 1:
        return [fn(k) for k in cohort]
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, cohort))


def _resolve_data(spec: DataSpec) -> tuple[flcore.Dataset, flcore.Dataset]:
    if spec.source == "synth":
        train = flcore.synth_dataset(
            spec.samples, spec.features, spec.classes, spec.separation, spec.seed
        )
        val = flcore.synth_dataset(
            spec.val_samples, spec.features, spec.classes, spec.separation, spec.seed + 1
        )
        return train, val
    train = flcore.load_dataset(spec.train_path)
    val = flcore.load_dataset(spec.val_path)
    if train.num_features != val.num_features:
        raise ValueError("train and validation files disagree on feature count")
    k = max(train.num_classes, val.num_classes)
    if train.num_classes != k:
        train = flcore.Dataset(train.features, train.labels, k)
    if val.num_classes != k:
        val = flcore.Dataset(val.features, val.labels, k)
    return train, val


def _resolve_noise(cfg: ExperimentConfig) -> tuple[float, float | None]:
    if cfg.force_z is not None:
        return cfg.force_z, (cfg.force_z if cfg.strategy.kind == "dp_clac" else None)
    if cfg.strategy.kind == "dp_clac":
        return accountant.split_budget(cfg.privacy, cfg.strategy.fraction_train)
    return accountant.get_noise_multiplier(cfg.privacy), None


def run_experiment(
    cfg: ExperimentConfig,
    workers: int = 1,
    data_override: tuple[flcore.Dataset, flcore.Dataset] | None = None,
) -> ExperimentResult:
    """Run the full loop: initialize the threshold, then train rounds 2..T.

    Round 1 collects threshold votes and builds the private histogram unless
    initial_C is configured, in which case round 1 trains like any other
    round. Each later round refreshes C from the last two loss signals
    (adaptive strategies), samples a cohort, trains, aggregates with noise
    std z*C, and evaluates. Deterministic under cfg.master_seed for any
    worker count.

    data_override supplies (train, validation) datasets directly, for
    callers that already hold data in memory; cfg.data is ignored then.
    """
    seed = cfg.master_seed
    if data_override is not None:
        train, val = data_override
    else:
        train, val = _resolve_data(cfg.data)
    shards = flcore.dirichlet_partition(train, cfg.partition)
    hidden = cfg.hidden if cfg.model_kind == "mlp" else 0
    arch = flcore.Architecture(
        kind=cfg.model_kind,
        num_features=train.num_features,
        num_classes=train.num_classes,
        hidden=hidden,
    )
    if cfg.model_kind == "mlp":
        model = flcore.init_model(arch, derive_rng(seed, 0, -1, "model_init"))
    else:
        model = flcore.init_model(arch)
    z, z_loss = _resolve_noise(cfg)
    is_clac = cfg.strategy.kind == "dp_clac"
    grid = np.asarray(cfg.grid, dtype=float)
    loss_grid = np.asarray(clipstrat.DEFAULT_LOSS_GRID)
    v0 = flcore.loss(model, val)
    records: list[RoundRecord] = []

    def train_round(t: int, base: flcore.Model, c_t: float, cohort: list[int]):
        def work(k: int) -> np.ndarray:
            return flcore.user_update(
                base, shards[k], cfg.local, derive_rng(seed, t, k, "local")
            )

        deltas = _map_clients(work, cohort, workers)
        new_model = update_w(base, deltas, c_t, z, derive_rng(seed, t, -1, "noise"))
        return new_model, deltas

    # Clip bound for the private loss channel when the previous noisy mean
    # went nonpositive: fall back to the last usable positive signal.
    last_positive = v0 if v0 > 0 else float(loss_grid[0])

    def loss_signal(t: int, base: flcore.Model, deltas, cohort, prev_mean, flags):
        # Each sampled client reports the loss of its own updated model on
        # its own shard; the server averages privately.
        nonlocal last_positive
        client_losses = [
            flcore.loss(base.with_params(base.params + d), shards[k])
            for k, d in zip(cohort, deltas)
        ]
        if prev_mean <= 0:
            flags.append("loss_clip_fallback")
            prev_mean = last_positive
        value = clipstrat.clac_loss_channel(
            client_losses, prev_mean, z_loss, derive_rng(seed, t, -1, "loss_noise")
        )
        if value > 0:
            last_positive = value
        return value

    # Round 1: private threshold initialization, or a plain training round
    # when the threshold is configured explicitly.
    start = time.perf_counter()
    flags: list[str] = []
    cohort = sample_cohort(cfg.num_clients, cfg.privacy.q, derive_rng(seed, 1, -1, "sample"))
    if cfg.initial_C is None:
        flags.append("init_hist")
        v_signal = v0
        if not cohort:
            flags.append("empty_cohort")
            c1 = float(grid[grid.size // 2])
            report = clipstrat.InitCReport(C0=c1, source="configured")
            if is_clac:
                flags.append("clac_v0_from_val")
        else:
            def vote(k: int) -> np.ndarray:
                return clipstrat.client_vote(
                    model, shards[k], cfg.local, grid, cfg.mults, z,
                    cfg.num_clients, derive_rng(seed, 1, k, "vote"),
                )

            votes = _map_clients(vote, cohort, workers)
            report = clipstrat.init_c(votes, grid, z, derive_rng(seed, 1, -1, "init"))
            c1 = report.C0
            if is_clac:
                def local_loss(k: int) -> float:
                    return clipstrat.client_loss(
                        model, shards[k], cfg.local, derive_rng(seed, 1, k, "lossvote")
                    )

                losses = _map_clients(local_loss, cohort, workers)
                loss_votes = [clipstrat.loss_vote(l, loss_grid) for l in losses]
                loss_hist = mechanisms.aggregate_votes(
                    loss_votes, z_loss, derive_rng(seed, 1, -1, "init_loss")
                )
                v_signal = mechanisms.select_mode(loss_hist, loss_grid)
    else:
        c1 = cfg.initial_C
        report = clipstrat.InitCReport(C0=c1, source="configured")
        if is_clac:
            # No private loss histogram in this mode; bootstrap the loss
            # channel from the server-side validation loss.
            flags.append("clac_v0_from_val")
        if not cohort:
            flags.append("empty_cohort")
            v_signal = v0
        else:
            base = model
            model, deltas = train_round(1, base, c1, cohort)
            if is_clac:
                v_signal = loss_signal(1, base, deltas, cohort, v0, flags)
            else:
                v_signal = flcore.loss(model, val)
    if v_signal > 0:
        last_positive = v_signal
    # Initialization-only round 1 carries the loss signal into both slots
    # (v_1 = v_0), so the first adaptive step leaves C unchanged. A trained
    # round 1 seeds the recurrence with the pre-training validation loss.
    v_seed = v_signal if cfg.initial_C is None else v0
    state = clipstrat.ClipState(C=c1, v_prev=v_signal, v_prev2=v_seed)
    records.append(
        RoundRecord(
            t=1,
            cohort_ids=tuple(cohort),
            C=c1,
            v=v_signal,
            sigma=z * c1,
            eval_accuracy=flcore.accuracy(model, val),
            eval_loss=flcore.loss(model, val),
            wall_ms=(time.perf_counter() - start) * 1e3,
            flags=tuple(flags),
        )
    )

    for t in range(2, cfg.rounds + 1):
        start = time.perf_counter()
        flags = []
        if cfg.strategy.adaptive:
            c_t, held = clipstrat.update_c(state)
            if held:
                flags.append("c_hold")
        else:
            c_t = state.C
        cohort = sample_cohort(
            cfg.num_clients, cfg.privacy.q, derive_rng(seed, t, -1, "sample")
        )
        if not cohort:
            flags.append("empty_cohort")
            v_t = state.v_prev
        else:
            base = model
            model, deltas = train_round(t, base, c_t, cohort)
            if is_clac:
                v_t = loss_signal(t, base, deltas, cohort, state.v_prev, flags)
            else:
                v_t = flcore.loss(model, val)
        records.append(
            RoundRecord(
                t=t,
                cohort_ids=tuple(cohort),
                C=c_t,
                v=v_t,
                sigma=z * c_t,
                eval_accuracy=flcore.accuracy(model, val),
                eval_loss=flcore.loss(model, val),
                wall_ms=(time.perf_counter() - start) * 1e3,
                flags=tuple(flags),
            )
        )
        state = clipstrat.strategy_step(cfg.strategy, state, v_t)
    return ExperimentResult(
        records=records,
        model=model,
        init_report=report,
        z=z,
        z_loss=z_loss,
        v0=v_seed,
    )


def _fmt(x: float) -> str:
    return "%.9g" % x


def write_round_log(records: list[RoundRecord], path) -> None:
    """Fixed-header per-round log; reals carry 9 significant digits."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in records:
            fh.write(
                ",".join(
                    [
                        str(r.t),
                        str(len(r.cohort_ids)),
                        _fmt(r.C),
                        _fmt(r.v),
                        _fmt(r.sigma),
                        _fmt(r.eval_accuracy),
                        _fmt(r.eval_loss),
                        ";".join(r.flags),
                    ]
                )
                + "\n"
            )


def write_summary(result: ExperimentResult, cfg: ExperimentConfig, path) -> None:
    """key=value run summary; the timestamp stays on the comment header line."""
    last = result.records[-1]
    lines = [
        f"# run summary, written {datetime.now(timezone.utc).isoformat()}",
        f"strategy={cfg.strategy.kind}",
        f"clients={cfg.num_clients}",
        f"rounds={cfg.rounds}",
        f"epsilon={_fmt(cfg.privacy.epsilon)}",
        f"delta={_fmt(cfg.privacy.delta)}",
        f"q={_fmt(cfg.privacy.q)}",
        f"z={_fmt(result.z)}",
    ]
    if result.z_loss is not None:
        lines.append(f"z_loss={_fmt(result.z_loss)}")
    lines += [
        f"C0={_fmt(result.init_report.C0)}",
        f"c0_source={result.init_report.source}",
        f"v0={_fmt(result.v0)}",
        f"final_C={_fmt(last.C)}",
        f"final_accuracy={_fmt(last.eval_accuracy)}",
        f"final_loss={_fmt(last.eval_loss)}",
    ]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_summary(path) -> dict[str, str]:
    """Parse a summary file back into a {key: value-string} mapping."""
    out: dict[str, str] = {}
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            out[key] = value
    return out


def save_model(params: np.ndarray, path) -> None:
    """Snapshot format: 16-byte header (magic, version, dim), float64 LE body."""
    flat = np.asarray(params, dtype="<f8").ravel()
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<I", _MODEL_VERSION))
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.tobytes())


def load_model_params(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != _MODEL_MAGIC:
            raise ValueError(f"{path}: not a model snapshot (bad magic)")
        version = struct.unpack("<I", header[4:8])[0]
        if version != _MODEL_VERSION:
            raise ValueError(f"{path}: unsupported snapshot version {version}")
        dim = struct.unpack("<Q", header[8:16])[0]
        body = fh.read()
    if len(body) != 8 * dim:
        raise ValueError(f"{path}: truncated snapshot ({len(body)} body bytes, {dim} params)")
    return np.frombuffer(body, dtype="<f8").copy()
