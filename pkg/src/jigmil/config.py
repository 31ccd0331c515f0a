"""Training configuration with paper-sourced defaults."""

from dataclasses import dataclass, field, fields, asdict

from .calibrate import MODES as LAMBDA_MODES
from .errors import ConfigError
from .graph import SIGMA_RULES

MODEL_VARIANTS = (
    "abmil",
    "abmil+jigsaw",
    "graph-mil",
    "graph-abmil",
    "graph-abmil+jigsaw",
)
AUX_TASKS = ("positional", "consistency", "none")


@dataclass
class TrainConfig:
    k_nn: int = 50
    grid_g: int = 10
    mask_keep_rate: float = 0.9
    model_variant: str = "graph-abmil+jigsaw"
    aux_task: str = "positional"
    lambda_mode: str = "em"
    lambda_fixed: float = 1.0
    lambda_alpha: float = 1.0
    lambda_beta: float = 1.0
    n_lambda: int = 1
    gat_hidden: int = 256
    gat_layers: int = 2
    d4: int = 128
    lr: float = 1e-4
    weight_decay: float = 1e-5
    epochs: int = 20
    seed: int = 42
    sigma_rule: str = "main"

    def __post_init__(self):
        validate_config(self)


_INT_FIELDS = {"k_nn", "grid_g", "n_lambda", "gat_hidden", "gat_layers",
               "d4", "epochs", "seed"}
_FLOAT_FIELDS = {"mask_keep_rate", "lambda_fixed", "lambda_alpha",
                 "lambda_beta", "lr", "weight_decay"}
_STR_FIELDS = {"model_variant", "aux_task", "lambda_mode", "sigma_rule"}


def validate_config(cfg):
    if cfg.model_variant not in MODEL_VARIANTS:
        raise ConfigError(
            f"model_variant must be one of {MODEL_VARIANTS}, got {cfg.model_variant!r}"
        )
    if cfg.aux_task not in AUX_TASKS:
        raise ConfigError(f"aux_task must be one of {AUX_TASKS}, got {cfg.aux_task!r}")
    if cfg.lambda_mode not in LAMBDA_MODES:
        raise ConfigError(
            f"lambda_mode must be one of {LAMBDA_MODES}, got {cfg.lambda_mode!r}"
        )
    if cfg.sigma_rule not in SIGMA_RULES:
        raise ConfigError(
            f"sigma_rule must be one of {SIGMA_RULES}, got {cfg.sigma_rule!r}"
        )
    has_jigsaw = cfg.model_variant.endswith("+jigsaw")
    if has_jigsaw != (cfg.aux_task != "none"):
        raise ConfigError(
            f"variant {cfg.model_variant!r} is inconsistent with "
            f"aux_task {cfg.aux_task!r}: a jigsaw head exists iff aux_task != 'none'"
        )
    positives = {
        "k_nn": cfg.k_nn, "grid_g": cfg.grid_g, "gat_hidden": cfg.gat_hidden,
        "gat_layers": cfg.gat_layers, "d4": cfg.d4, "epochs": cfg.epochs,
        "n_lambda": cfg.n_lambda, "lr": cfg.lr,
        "lambda_alpha": cfg.lambda_alpha, "lambda_beta": cfg.lambda_beta,
    }
    for key, value in positives.items():
        if value <= 0:
            raise ConfigError(f"{key} must be positive, got {value}")
    if not 0.0 < cfg.mask_keep_rate <= 1.0:
        raise ConfigError(
            f"mask_keep_rate must be in (0,1], got {cfg.mask_keep_rate}"
        )
    if cfg.weight_decay < 0:
        raise ConfigError(f"weight_decay must be >= 0, got {cfg.weight_decay}")
    if cfg.lambda_fixed < 0:
        raise ConfigError(f"lambda_fixed must be >= 0, got {cfg.lambda_fixed}")


def config_from_dict(obj):
    """Build a TrainConfig from a plain dict, rejecting unknown keys."""
    if not isinstance(obj, dict):
        raise ConfigError(f"config must be a JSON object, got {type(obj).__name__}")
    known = {f.name for f in fields(TrainConfig)}
    kwargs = {}
    for key, value in obj.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        if key in _INT_FIELDS:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"config key {key!r} must be an integer")
        elif key in _FLOAT_FIELDS:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"config key {key!r} must be a number")
            value = float(value)
        elif key in _STR_FIELDS and not isinstance(value, str):
            raise ConfigError(f"config key {key!r} must be a string")
        kwargs[key] = value
    return TrainConfig(**kwargs)


def config_to_dict(cfg):
    return asdict(cfg)
