"""Flat key=value experiment configuration.

One key per line with section prefixes (privacy.epsilon=4). Parsing keeps
the source line of every entry so type and validation failures point at the
offending line; command-line overrides reuse the same keys. serialize/parse
round-trips exactly (reals are written with 17 significant digits).
"""

from __future__ import annotations

from . import accountant, clipstrat, flcore, harness


class ConfigError(ValueError):
    """Configuration file or override rejected; message carries the location."""


_KNOWN_KEYS = frozenset(
    [
        "privacy.epsilon",
        "privacy.delta",
        "privacy.q",
        "federation.clients",
        "federation.rounds",
        "local.epochs",
        "local.batch_size",
        "local.lr",
        "strategy.kind",
        "strategy.fraction_train",
        "strategy.initial_c",
        "grid.thresholds",
        "grid.multipliers",
        "model.kind",
        "model.hidden",
        "data.source",
        "data.samples",
        "data.features",
        "data.classes",
        "data.separation",
        "data.seed",
        "data.val_samples",
        "data.train_path",
        "data.val_path",
        "partition.alpha",
        "partition.seed",
        "run.master_seed",
        "run.force_z",
    ]
)

# Convenience spellings accepted in overrides and config files.
_ALIASES = {
    "strategy": "strategy.kind",
    "initial_C": "strategy.initial_c",
    "seed": "run.master_seed",
}

_REQUIRED = object()


def parse_entries(text: str, path: str = "<config>") -> dict[str, tuple[str, str]]:
    """Raw key=value lines -> {key: (value, location)}; # starts a comment."""
    entries: dict[str, tuple[str, str]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        loc = f"{path}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{loc}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = _ALIASES.get(key.strip(), key.strip())
        value = value.strip()
        if not key:
            raise ConfigError(f"{loc}: empty key")
        if key in entries:
            raise ConfigError(f"{loc}: duplicate key {key!r}")
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"{loc}: unknown key {key!r}")
        entries[key] = (value, loc)
    return entries


def _typed(entries, key, kind, default=_REQUIRED, path: str = "<config>"):
    if key not in entries:
        if default is _REQUIRED:
            raise ConfigError(f"{path}: missing required key {key!r}")
        return default
    value, loc = entries[key]
    try:
        return kind(value)
    except ValueError:
        raise ConfigError(
            f"{loc}: key {key!r}: cannot parse {value!r} as {kind.__name__}"
        ) from None


def _float_list(entries, key, default, path):
    if key not in entries:
        return default
    value, loc = entries[key]
    try:
        return tuple(float(cell) for cell in value.split(","))
    except ValueError:
        raise ConfigError(f"{loc}: key {key!r}: expected comma-separated reals") from None


def build_config(entries: dict[str, tuple[str, str]], path: str = "<config>") -> harness.ExperimentConfig:
    """Typed entries -> validated ExperimentConfig; all failures are ConfigError."""
    f = lambda key, default=_REQUIRED: _typed(entries, key, float, default, path)
    i = lambda key, default=_REQUIRED: _typed(entries, key, int, default, path)
    s = lambda key, default=_REQUIRED: _typed(entries, key, str, default, path)
    try:
        privacy = accountant.PrivacySpec(
            epsilon=f("privacy.epsilon"),
            delta=f("privacy.delta", 1e-5),
            q=f("privacy.q"),
            rounds=i("federation.rounds"),
        )
        local = flcore.LocalConfig(
            epochs=i("local.epochs"),
            batch_size=i("local.batch_size"),
            lr=f("local.lr"),
        )
        strategy = clipstrat.StrategyKind(
            kind=s("strategy.kind"),
            fraction_train=f("strategy.fraction_train", 2.0 / 3.0),
        )
        num_clients = i("federation.clients")
        data = harness.DataSpec(
            source=s("data.source", "synth"),
            samples=i("data.samples", 2000),
            features=i("data.features", 10),
            classes=i("data.classes", 2),
            separation=f("data.separation", 3.0),
            seed=i("data.seed", 0),
            val_samples=i("data.val_samples", 400),
            train_path=s("data.train_path", None),
            val_path=s("data.val_path", None),
        )
        partition = flcore.PartitionSpec(
            num_clients=num_clients,
            alpha=f("partition.alpha", 1.0),
            seed=i("partition.seed", 0),
        )
        return harness.ExperimentConfig(
            privacy=privacy,
            local=local,
            strategy=strategy,
            num_clients=num_clients,
            data=data,
            partition=partition,
            grid=_float_list(entries, "grid.thresholds", clipstrat.DEFAULT_THRESHOLD_GRID, path),
            mults=_float_list(entries, "grid.multipliers", clipstrat.DEFAULT_MULTIPLIER_GRID, path),
            model_kind=s("model.kind", "logistic"),
            hidden=i("model.hidden", 16),
            initial_C=f("strategy.initial_c", None),
            master_seed=i("run.master_seed", 0),
            force_z=f("run.force_z", None),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def apply_overrides(
    entries: dict[str, tuple[str, str]], overrides
) -> dict[str, tuple[str, str]]:
    out = dict(entries)
    for text in overrides:
        if "=" not in text:
            raise ConfigError(f"override: expected key=value, got {text!r}")
        key, _, value = text.partition("=")
        key = _ALIASES.get(key.strip(), key.strip())
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"override: unknown key {key!r}")
        out[key] = (value.strip(), "override")
    return out


def load_config(path, overrides=(), seed_override: int | None = None) -> harness.ExperimentConfig:
    """Read, override, and validate a config file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}") from exc
    entries = parse_entries(text, str(path))
    entries = apply_overrides(entries, overrides)
    if seed_override is not None:
        entries["run.master_seed"] = (str(seed_override), "override")
    return build_config(entries, str(path))


def serialize_config(cfg: harness.ExperimentConfig) -> str:
    """Canonical text form; parse(serialize(cfg)) reconstructs cfg exactly."""
    g = lambda x: "%.17g" % x
    lines = [
        f"privacy.epsilon={g(cfg.privacy.epsilon)}",
        f"privacy.delta={g(cfg.privacy.delta)}",
        f"privacy.q={g(cfg.privacy.q)}",
        f"federation.clients={cfg.num_clients}",
        f"federation.rounds={cfg.privacy.rounds}",
        f"local.epochs={cfg.local.epochs}",
        f"local.batch_size={cfg.local.batch_size}",
        f"local.lr={g(cfg.local.lr)}",
        f"strategy.kind={cfg.strategy.kind}",
        f"strategy.fraction_train={g(cfg.strategy.fraction_train)}",
    ]
    if cfg.initial_C is not None:
        lines.append(f"strategy.initial_c={g(cfg.initial_C)}")
    lines += [
        "grid.thresholds=" + ",".join(g(x) for x in cfg.grid),
        "grid.multipliers=" + ",".join(g(x) for x in cfg.mults),
        f"model.kind={cfg.model_kind}",
        f"model.hidden={cfg.hidden}",
        f"data.source={cfg.data.source}",
        f"data.samples={cfg.data.samples}",
        f"data.features={cfg.data.features}",
        f"data.classes={cfg.data.classes}",
        f"data.separation={g(cfg.data.separation)}",
        f"data.seed={cfg.data.seed}",
        f"data.val_samples={cfg.data.val_samples}",
    ]
    if cfg.data.train_path is not None:
        lines.append(f"data.train_path={cfg.data.train_path}")
    if cfg.data.val_path is not None:
        lines.append(f"data.val_path={cfg.data.val_path}")
    lines += [
        f"partition.alpha={g(cfg.partition.alpha)}",
        f"partition.seed={cfg.partition.seed}",
        f"run.master_seed={cfg.master_seed}",
    ]
    if cfg.force_z is not None:
        lines.append(f"run.force_z={g(cfg.force_z)}")
    return "\n".join(lines) + "\n"
