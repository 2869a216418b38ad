"""Run configuration: flat INI-style key-value file with sections.

Every key has a documented default; unknown sections or keys are rejected so
typos fail loudly. The effective (fully resolved) configuration is echoed to
the output directory of every training run.
"""

import configparser
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

from .constraint import ConstraintConfig
from .errors import ConfigurationError
from .moe import MoEConfig

ENCODER_KINDS = ("toy_frozen_random", "clip_pretrained")
NOISE_TARGETS = ("fusion_input", "off")
DECODER_PAIRINGS = ("matched", "reversed")


@dataclass
class EncoderConfig:
    """Frozen backend description.

    tap_layers=() selects evenly spaced thirds of the depth.
    """

    kind: str = "toy_frozen_random"
    depth: int = 6
    tap_layers: tuple = ()
    patch_size: int = 8
    embed_dim: int = 64
    num_heads: int = 4
    text_dim: int = 32
    prompt_length: int = 12
    vocab_size: int = 16
    backend_seed: int = 0
    use_layernorm: bool = True
    clip_model: str = "ViT-L-14-336"
    weights_path: str = ""

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ConfigurationError(f"unknown encoder kind {self.kind!r}; expected one of {ENCODER_KINDS}")
        if self.prompt_length < 1:
            raise ConfigurationError(f"prompt_length must be >= 1, got {self.prompt_length}")
        if self.tap_layers and len(self.tap_layers) != 3:
            raise ConfigurationError(f"tap_layers needs exactly 3 entries, got {self.tap_layers}")


@dataclass
class TrainConfig:
    """Optimization hyperparameters and pipeline switches.

    The three use_*_loss switches exist to isolate single loss terms in
    diagnostics; prompt_guidance turns the whole cross-modal path (promotion
    plus constraint losses) on or off for ablations.
    """

    epochs: int = 250
    batch_size: int = 8
    learning_rate: float = 0.001
    noise_std: float = 0.1
    noise_into: str = "fusion_input"
    resolution: int = 224
    seed: int = 0
    checkpoint_every: int = 10
    prompt_guidance: bool = True
    detach_text_in_promotion: bool = False
    decoder_pairing: str = "matched"
    use_distill_loss: bool = True
    use_constraint_loss: bool = True
    use_moe_loss: bool = True

    def __post_init__(self):
        if self.noise_into not in NOISE_TARGETS:
            raise ConfigurationError(
                f"noise_into must be one of {NOISE_TARGETS}, got {self.noise_into!r}")
        if self.decoder_pairing not in DECODER_PAIRINGS:
            raise ConfigurationError(
                f"decoder_pairing must be one of {DECODER_PAIRINGS}, got {self.decoder_pairing!r}")
        if self.noise_std < 0:
            raise ConfigurationError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class DataConfig:
    root: str = ""


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    constraint: ConstraintConfig = field(default_factory=ConstraintConfig)
    moe: MoEConfig = field(default_factory=MoEConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def structural_fingerprint(self) -> dict:
        """Fields that must match for a checkpoint to be loadable."""
        fp = {f"encoder.{k}": v for k, v in asdict(self.encoder).items()}
        fp.update({
            "moe.enabled": self.moe.enabled,
            "moe.num_experts": self.moe.num_experts,
            "moe.top_k": self.moe.top_k,
            "moe.hidden_dim": self.moe.hidden_dim,
            "train.resolution": self.train.resolution,
            "train.prompt_guidance": self.train.prompt_guidance,
        })
        return {k: list(v) if isinstance(v, tuple) else v for k, v in fp.items()}


_SECTIONS = {
    "encoder": EncoderConfig,
    "constraint": ConstraintConfig,
    "moe": MoEConfig,
    "train": TrainConfig,
    "data": DataConfig,
}


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigurationError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        if not raw:
            return ()
        return tuple(int(part) for part in raw.split(","))
    return raw


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def load_config(path) -> "RunConfig":
    """Parse an INI file into a RunConfig, rejecting unknown sections/keys."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config file {path}: {exc}") from exc
    return config_from_parser(parser)


def config_from_parser(parser: configparser.ConfigParser) -> "RunConfig":
    kwargs = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigurationError(f"unknown config section [{section}]")
        cls = _SECTIONS[section]
        defaults = {f.name: getattr(cls(), f.name) for f in fields(cls)}
        values = {}
        for key, raw in parser.items(section):
            if key not in defaults:
                raise ConfigurationError(f"unknown key {key!r} in section [{section}]")
            try:
                values[key] = _parse_value(raw, defaults[key])
            except (ValueError, ConfigurationError) as exc:
                raise ConfigurationError(f"bad value for [{section}] {key}: {exc}") from exc
        kwargs[section] = cls(**values)
    return RunConfig(**kwargs)


def config_to_ini(config: RunConfig) -> str:
    """Render the fully resolved configuration, every key present, fixed order."""
    lines = []
    for section, _ in _SECTIONS.items():
        sub = getattr(config, section)
        lines.append(f"[{section}]")
        for f in fields(sub):
            lines.append(f"{f.name} = {_format_value(getattr(sub, f.name))}")
        lines.append("")
    return "\n".join(lines)


def write_effective_config(config: RunConfig, out_dir) -> Path:
    out = Path(out_dir) / "effective_config.ini"
    out.write_text(config_to_ini(config), encoding="utf-8")
    return out


__all__ = [
    "EncoderConfig",
    "TrainConfig",
    "DataConfig",
    "RunConfig",
    "load_config",
    "config_from_parser",
    "config_to_ini",
    "write_effective_config",
]
