"""
Configuration dataclasses and the flat key=value config format.

A config file is utf-8 text with one `key=value` pair per line. `#` starts a
comment, blank lines are ignored. Every key names a field of one of the
dataclasses below; a key that several dataclasses share (vocab_size, feat_dim)
is applied to all of them. Unknown keys are rejected with the key named.

Example file:

    # toy model
    encoder_dim = 32
    pred_layers = 4
    gamma = 0.5
    beta = 0.3
"""

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union, get_args, get_origin, get_type_hints

from . import constants as C
from .errors import ConfigError, DataError


@dataclass
class ModelConfig:
    """Hyperparameters of the encoder, prediction network, AIF and joint network."""
    vocab_size: int = C.VOCAB_SIZE
    feat_dim: int = C.FEAT_DIM
    encoder_dim: int = C.ENCODER_DIM
    model_dim: int = C.MODEL_DIM
    ff_dim: int = C.FF_DIM
    encoder_layers: int = C.ENCODER_LAYERS
    encoder_context: int = C.ENCODER_CONTEXT
    pred_layers: int = C.PRED_LAYERS
    pred_tap_layer: int = C.PRED_TAP_LAYER
    query_dim: int = C.QUERY_DIM
    init_std: float = C.INIT_STD
    classifier_init_std: float = C.CLASSIFIER_INIT_STD
    aif_scale_qk: bool = C.AIF_SCALE_QK
    tie_joint_lm: bool = C.TIE_JOINT_LM
    alignment: str = C.ALIGNMENT_MODE

    def __post_init__(self):
        if self.vocab_size < C.NUM_RESERVED_TOKENS + 1:
            raise ConfigError(f"vocab_size must be at least {C.NUM_RESERVED_TOKENS + 1}, got {self.vocab_size}")
        if self.encoder_dim < 4:
            raise ConfigError(f"encoder_dim must be at least 4, got {self.encoder_dim}")
        if self.feat_dim < 1:
            raise ConfigError(f"feat_dim must be positive, got {self.feat_dim}")
        if self.encoder_context < 1:
            raise ConfigError(f"encoder_context must be positive, got {self.encoder_context}")
        if not (1 <= self.pred_tap_layer <= self.pred_layers):
            raise ConfigError(
                f"pred_tap_layer must be between 1 and pred_layers ({self.pred_layers}), got {self.pred_tap_layer}"
            )
        if self.query_dim != self.model_dim:
            # the tapped prediction-network state is the AIF query as is
            raise ConfigError(f"query_dim must equal model_dim ({self.model_dim}), got {self.query_dim}")
        if self.alignment not in ("aif", "cif"):
            raise ConfigError(f"alignment must be 'aif' or 'cif', got {self.alignment!r}")

    @property
    def content_dim(self) -> int:
        """Encoder columns left for content after the two weight channels."""
        return self.encoder_dim - 2


@dataclass
class TrainConfig:
    """Composite-loss weights and optimiser settings."""
    gamma: float = C.CTC_WEIGHT
    mu: float = C.QUANTITY_WEIGHT
    train_eos: bool = C.TRAIN_EOS
    learning_rate: float = C.LEARNING_RATE
    warmup_steps: int = C.WARMUP_STEPS
    grad_clip: float = C.GRAD_CLIP
    batch_size: int = C.BATCH_SIZE
    epochs: int = C.EPOCHS
    lm_epochs: int = C.LM_EPOCHS
    adapt_epochs: int = C.ADAPT_EPOCHS
    # None means "the prediction network's tap layer"
    freeze_below: Optional[int] = None
    seed: int = C.SEED

    def __post_init__(self):
        if not (0 <= self.gamma <= 1):
            raise ConfigError(f"gamma must be between 0 and 1, got {self.gamma}")
        if self.mu < 0:
            raise ConfigError(f"mu must be non-negative, got {self.mu}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps must be non-negative, got {self.warmup_steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.epochs < 0 or self.lm_epochs < 0 or self.adapt_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.freeze_below is not None and self.freeze_below < 0:
            raise ConfigError(f"freeze_below must be non-negative, got {self.freeze_below}")


@dataclass
class BeamConfig:
    """Beam-search settings: score weights, shallow fusion and the stop rule."""
    beam: int = C.BEAM_SIZE
    beta: float = C.DECODE_CTC_WEIGHT
    lm_weight: float = C.LM_WEIGHT
    max_output_length: int = C.MAX_OUTPUT_LENGTH
    length_cap_margin: int = C.LENGTH_CAP_MARGIN
    eos_rule: bool = C.ONLINE_EOS_RULE

    def __post_init__(self):
        if self.beam < 1:
            raise ConfigError(f"beam must be at least 1, got {self.beam}")
        if not (0 <= self.beta <= 1):
            raise ConfigError(f"beta must be between 0 and 1, got {self.beta}")
        if self.lm_weight < 0:
            raise ConfigError(f"lm_weight must be non-negative, got {self.lm_weight}")
        if self.max_output_length < 1:
            raise ConfigError(f"max_output_length must be positive, got {self.max_output_length}")
        if self.length_cap_margin < 0:
            raise ConfigError(f"length_cap_margin must be non-negative, got {self.length_cap_margin}")


@dataclass
class SynthSpec:
    """Shape of the synthetic speech-like task."""
    vocab_size: int = C.VOCAB_SIZE
    feat_dim: int = C.FEAT_DIM
    num_phones: int = C.NUM_PHONES
    min_tokens: int = C.MIN_TOKENS
    max_tokens: int = C.MAX_TOKENS
    min_duration: int = C.MIN_DURATION
    max_duration: int = C.MAX_DURATION
    noise: float = C.FEATURE_NOISE
    preferred_successors: int = C.PREFERRED_SUCCESSORS
    off_preference_mass: float = C.OFF_PREFERENCE_MASS

    def __post_init__(self):
        if self.vocab_size < C.NUM_RESERVED_TOKENS + 1:
            raise ConfigError(f"vocab_size must be at least {C.NUM_RESERVED_TOKENS + 1}, got {self.vocab_size}")
        if not (1 <= self.min_tokens <= self.max_tokens):
            raise ConfigError(f"token range [{self.min_tokens}, {self.max_tokens}] is empty")
        if not (1 <= self.min_duration <= self.max_duration):
            raise ConfigError(f"duration range [{self.min_duration}, {self.max_duration}] is empty")
        if self.noise < 0:
            raise ConfigError(f"noise must be non-negative, got {self.noise}")
        if not (0 <= self.off_preference_mass < 1):
            raise ConfigError(f"off_preference_mass must be in [0, 1), got {self.off_preference_mass}")
        if self.num_phones < C.MAX_PHONES_PER_TOKEN:
            raise ConfigError(f"num_phones must be at least {C.MAX_PHONES_PER_TOKEN}, got {self.num_phones}")


@dataclass
class Settings:
    """Everything a run can be configured with, in one bundle."""
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    beam: BeamConfig = field(default_factory=BeamConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)

    def sections(self) -> List[Tuple[str, Any]]:
        return [("model", self.model), ("train", self.train), ("beam", self.beam), ("synth", self.synth)]

    def with_overrides(self, pairs: Dict[str, str]) -> "Settings":
        """Return a copy with string overrides applied to every owning section."""
        updates: Dict[str, Dict[str, Any]] = {name: {} for name, _ in self.sections()}
        for key, raw in pairs.items():
            owners = [(name, obj) for name, obj in self.sections() if key in _field_types(type(obj))]
            if not owners:
                raise ConfigError(f"unknown config key: {key}")
            for name, obj in owners:
                updates[name][key] = _coerce(key, raw, _field_types(type(obj))[key])
        return Settings(**{name: replace(obj, **updates[name]) for name, obj in self.sections()})


@dataclass
class RunConfig:
    """One CLI invocation, after argument parsing."""
    command: str
    config_path: Optional[str] = None
    seed: int = C.SEED
    inputs: Dict[str, str] = field(default_factory=dict)
    out: Optional[str] = None
    overrides: Dict[str, str] = field(default_factory=dict)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _field_types(cls) -> Dict[str, Any]:
    hints = get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def _coerce(key: str, raw: str, annotation: Any) -> Any:
    text = raw.strip()
    if get_origin(annotation) is Union:
        args = [a for a in get_args(annotation) if a is not type(None)]
        if text.lower() in ("none", ""):
            return None
        annotation = args[0]
    try:
        if annotation is bool:
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if annotation is int:
            return int(text)
        if annotation is float:
            return float(text)
        return text
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {e}") from e


def parse_pairs(lines: Iterable[str], source: str = "<overrides>") -> Dict[str, str]:
    """
    Parse key=value lines into an ordered dict of raw strings.

    Args:
        lines: Text lines; comments after `#` and blank lines are skipped
        source: Name used in error messages

    Returns:
        Mapping of key to unparsed value (later lines win)

    Raises:
        ConfigError: If a non-blank line has no `=` or an empty key
    """
    pairs: Dict[str, str] = {}
    for lineno, line in enumerate(lines, start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {content!r}")
        key, value = content.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        pairs[key] = value.strip()
    return pairs


def load_settings(path: Optional[str] = None, overrides: Optional[Dict[str, str]] = None) -> Settings:
    """Defaults, then the config file (if any), then explicit overrides."""
    settings = Settings()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise DataError(f"config file not found: {path}")
        settings = settings.with_overrides(parse_pairs(p.read_text(encoding="utf-8").splitlines(), str(p)))
    if overrides:
        settings = settings.with_overrides(overrides)
    return settings


def save_model_config(cfg: ModelConfig, path: str) -> None:
    """Write a ModelConfig in the key=value format (round-trips through load_settings)."""
    lines = ["# LS-Transducer model configuration"]
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
