"""Flat `section.key = value` configuration with a closed key registry.

Every tunable lives under one dotted key; files, presets, CLI flags, and
`--set` overrides all funnel into the same typed map. Unknown keys fail
before any work starts, and the canonical dump is both the `--dump-config`
output and the text hashed into checkpoint fingerprints.
"""

from __future__ import annotations

from hashlib import sha256
from pathlib import Path

from .contrastive import ContrastiveConfig
from .encoder import EncoderConfig
from .errors import UsageError
from .model import ModelConfig
from .training import TrainConfig, make_fingerprint

_ENC = EncoderConfig()
_MODEL = ModelConfig()
_CTR = ContrastiveConfig()
_TRAIN = TrainConfig()

# key -> (type tag, default); tags: int, float, bool, str, opt-int
REGISTRY: dict[str, tuple[str, object]] = {
    "encoder.layers": ("int", _ENC.layers),
    "encoder.heads": ("int", _ENC.heads),
    "encoder.d_model": ("int", _ENC.d_model),
    "encoder.d_ff": ("int", _ENC.d_ff),
    "encoder.dropout": ("float", _ENC.dropout),
    "encoder.max_positions": ("int", _ENC.max_positions),
    "encoder.interaction_policy": ("str", _ENC.interaction_policy),
    "encoder.label_mode": ("str", _ENC.label_mode),
    "encoder.freeze_labels": ("bool", _ENC.freeze_labels),
    "model.boundary_hidden": ("int", _MODEL.boundary_hidden),
    "model.boundary_dim": ("int", _MODEL.boundary_dim),
    "model.bottleneck": ("opt-int", _MODEL.bottleneck),
    "model.adapter_residual": ("bool", _MODEL.adapter_residual),
    "model.per_first_token": ("bool", _MODEL.per_first_token),
    "model.max_len": ("int", _MODEL.max_len),
    "contrastive.metric": ("str", _CTR.metric),
    "contrastive.tau": ("float", _CTR.tau),
    "contrastive.projection_dim": ("int", _CTR.projection_dim),
    "contrastive.per_anchor": ("bool", _CTR.per_anchor),
    "trainer.epochs": ("int", _TRAIN.epochs),
    "trainer.batch_size": ("int", _TRAIN.batch_size),
    "trainer.encoder_lr": ("float", _TRAIN.encoder_lr),
    "trainer.head_lr": ("float", _TRAIN.head_lr),
    "trainer.weight_decay": ("float", _TRAIN.weight_decay),
    "trainer.seed": ("int", _TRAIN.seed),
    "trainer.with_contrastive": ("bool", _TRAIN.with_contrastive),
    "trainer.dev_fraction": ("float", _TRAIN.dev_fraction),
}

# rates matching a pretrained encoder worth preserving
PRESETS: dict[str, dict[str, object]] = {
    "pretrained-rates": {"trainer.encoder_lr": 2e-5, "trainer.head_lr": 1e-3},
}


def default_config() -> dict[str, object]:
    return {k: default for k, (_, default) in REGISTRY.items()}


def _check_key(key: str) -> None:
    if key not in REGISTRY:
        raise UsageError(f"unknown config key {key!r}")


def parse_value(key: str, raw: str) -> object:
    _check_key(key)
    tag = REGISTRY[key][0]
    raw = raw.strip()
    try:
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "bool":
            low = raw.lower()
            if low in ("true", "false"):
                return low == "true"
            raise ValueError
        if tag == "opt-int":
            return None if raw.lower() == "none" else int(raw)
        return raw
    except ValueError:
        raise UsageError(f"invalid value for {key}: {raw!r} "
                         f"(expected {tag})") from None


def format_value(key: str, value: object) -> str:
    tag = REGISTRY[key][0]
    if tag == "bool":
        return "true" if value else "false"
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


def load_config_file(path) -> dict[str, object]:
    """Parse one file into a partial key map; duplicates are an error."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    out: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key in out:
            raise UsageError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = parse_value(key, raw)
    return out


def parse_overrides(pairs) -> dict[str, object]:
    """`--set dotted.key=value` strings into a typed partial map."""
    out: dict[str, object] = {}
    for pair in pairs:
        if "=" not in pair:
            raise UsageError(f"override {pair!r} must look like key=value")
        key, _, raw = pair.partition("=")
        out[key.strip()] = parse_value(key.strip(), raw)
    return out


def resolve(file=None, preset: str | None = None, flags=None,
            overrides=()) -> dict[str, object]:
    """Defaults, then preset, then file, then flags, then --set overrides."""
    cfg = default_config()
    if preset is not None:
        if preset not in PRESETS:
            raise UsageError(f"unknown preset {preset!r} "
                             f"(have: {', '.join(sorted(PRESETS))})")
        cfg.update(PRESETS[preset])
    if file is not None:
        cfg.update(load_config_file(file))
    if flags:
        for key, value in flags.items():
            _check_key(key)
            cfg[key] = value
    cfg.update(parse_overrides(overrides))
    return cfg


def canonical_text(cfg: dict[str, object]) -> str:
    """Sorted `key = value` lines; stable input for fingerprints."""
    unknown = sorted(set(cfg) - set(REGISTRY))
    if unknown:
        raise UsageError(f"unknown config keys {unknown}")
    lines = [f"{k} = {format_value(k, cfg[k])}" for k in sorted(cfg)]
    return "\n".join(lines) + "\n"


def build_train_config(cfg: dict[str, object]) -> TrainConfig:
    """Typed config tree; dataclass validation runs on construction."""
    full = default_config()
    full.update(cfg)
    enc = EncoderConfig(
        layers=full["encoder.layers"], heads=full["encoder.heads"],
        d_model=full["encoder.d_model"], d_ff=full["encoder.d_ff"],
        dropout=full["encoder.dropout"],
        max_positions=full["encoder.max_positions"],
        interaction_policy=full["encoder.interaction_policy"],
        label_mode=full["encoder.label_mode"],
        freeze_labels=full["encoder.freeze_labels"])
    model = ModelConfig(
        encoder=enc,
        contrastive=ContrastiveConfig(
            metric=full["contrastive.metric"], tau=full["contrastive.tau"],
            projection_dim=full["contrastive.projection_dim"],
            per_anchor=full["contrastive.per_anchor"]),
        boundary_hidden=full["model.boundary_hidden"],
        boundary_dim=full["model.boundary_dim"],
        bottleneck=full["model.bottleneck"],
        adapter_residual=full["model.adapter_residual"],
        per_first_token=full["model.per_first_token"],
        max_len=full["model.max_len"])
    return TrainConfig(
        model=model, epochs=full["trainer.epochs"],
        batch_size=full["trainer.batch_size"],
        encoder_lr=full["trainer.encoder_lr"],
        head_lr=full["trainer.head_lr"],
        weight_decay=full["trainer.weight_decay"],
        seed=full["trainer.seed"],
        with_contrastive=full["trainer.with_contrastive"],
        dev_fraction=full["trainer.dev_fraction"])


def source_label_hash(source_names) -> str:
    """Order-independent digest of the source label set (names only)."""
    return sha256("\n".join(sorted(source_names)).encode("utf-8")).hexdigest()


def fingerprint_for(cfg: dict[str, object], vocab, source_names) -> bytes:
    return make_fingerprint(canonical_text(cfg), vocab.content_hash(),
                            source_label_hash(source_names))
