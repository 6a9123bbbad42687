from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional

from service.errors import ValidationError

logger = logging.getLogger(__name__)

# Single documented seed; every random draw in the pipeline flows from it.
DEFAULT_SEED: int = 20210705

ENV_SEED = "CARDIQ_SEED"
ENV_LOG_LEVEL = "CARDIQ_LOG_LEVEL"
DEFAULT_LOG_LEVEL = "INFO"

MYOCARDIAL_DENSITY_G_PER_ML: float = 1.05
ROI_EXTENT_MM: float = 90.0
ROI_GRID: int = 128
ROI_PITCH_MM: float = ROI_EXTENT_MM / ROI_GRID  # 0.703125
PER_STUDY_BUDGET_S: float = 5.0

COMMANDS = ("phantom", "train", "segment", "quantify", "evaluate", "bench")


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loss settings for one training run."""

    epochs: int = 500
    batch_size: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_prior: float = 0.1
    seed: int = DEFAULT_SEED
    w_ce: float = 1.0
    w_dice: float = 1.0
    augment: bool = False
    log_every: int = 25
    # convolution arithmetic during training; gradient checks use float64
    precision: str = "float32"

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be >= 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValidationError("moment coefficients must lie in [0, 1)")
        if self.w_ce < 0 or self.w_dice < 0 or self.lambda_prior < 0:
            raise ValidationError("loss weights must be >= 0")
        if self.w_ce + self.w_dice <= 0:
            raise ValidationError("w_ce + w_dice must be > 0")
        if self.precision not in ("float32", "float64"):
            raise ValidationError(f"precision must be float32 or float64, got {self.precision!r}")


@dataclass
class RunConfig:
    """Resolved settings for one CLI invocation."""

    command: str
    inputs: List[Path] = field(default_factory=list)
    output: Optional[Path] = None
    model: Optional[Path] = None
    seed: int = DEFAULT_SEED
    train: TrainConfig = field(default_factory=TrainConfig)
    bench_repetitions: int = 3
    n_cases: int = 10
    frame_base: int = 0
    locate: str = "heuristic"
    report_format: str = "csv"
    workers: int = 1
    manual_times: Optional[Path] = None
    pred: Optional[Path] = None
    truth: Optional[Path] = None
    # second automatic run for the cross-training table
    pred_b: Optional[Path] = None
    series: Optional[Path] = None

    def validate(self) -> None:
        """Check paths and enumerations before any work begins."""
        if self.command not in COMMANDS:
            raise ValidationError(f"unknown command {self.command!r}")
        for p in list(self.inputs) + [x for x in (self.pred, self.truth, self.pred_b, self.series, self.manual_times) if x is not None]:
            if not Path(p).exists():
                raise ValidationError(f"input path does not exist: {p}")
        if self.command in ("segment", "quantify", "bench") and self.locate == "learned" and self.model is None:
            raise ValidationError("--locate learned requires --model")
        if self.command == "evaluate":
            self._validate_evaluate()
        if self.command in ("segment", "bench") and self.model is None:
            raise ValidationError(f"{self.command} requires --model")
        if self.model is not None and self.command != "train" and not Path(self.model).exists():
            raise ValidationError(f"model file does not exist: {self.model}")
        if self.locate not in ("heuristic", "learned"):
            raise ValidationError(f"--locate must be heuristic or learned, got {self.locate!r}")
        if self.report_format not in ("csv", "json"):
            raise ValidationError(f"--format must be csv or json, got {self.report_format!r}")
        if self.frame_base not in (0, 1):
            raise ValidationError("--frame-base must be 0 or 1")
        if self.bench_repetitions < 1 or self.n_cases < 1 or self.workers < 1:
            raise ValidationError("counts must be >= 1")

    def _validate_evaluate(self) -> None:
        if self.series is not None:
            if any(x is not None for x in (self.pred, self.truth, self.pred_b)):
                raise ValidationError("--series cannot be combined with --pred, --truth or --pred-b")
        elif self.pred is None or self.truth is None:
            raise ValidationError("evaluate needs --series, or both --pred and --truth")


# Keys a config file may set, with their target and parser.
_RUN_KEYS = {
    "seed": int,
    "output": Path,
    "model": Path,
    "bench_repetitions": int,
    "n_cases": int,
    "frame_base": int,
    "locate": str,
    "report_format": str,
    "workers": int,
}
_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}
_TRAIN_PARSERS = {"int": int, "float": float, "bool": lambda v: v.strip().lower() in ("1", "true", "yes", "on")}


def read_config_file(path: Path) -> Dict[str, str]:
    """Parse a plain-text ``key = value`` file. Comments start with ``#``."""
    values: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for number, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{number}: expected 'key = value', got {raw.rstrip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ValidationError(f"{path}:{number}: empty key")
            if key not in _RUN_KEYS and key not in _TRAIN_KEYS:
                raise ValidationError(f"{path}:{number}: unknown key {key!r}")
            values[key] = value
    return values


def apply_overrides(config: RunConfig, values: Dict[str, Any]) -> RunConfig:
    """Return ``config`` with run-level and training-level ``values`` applied.

    String values are parsed to the field's type; ``None`` values are ignored
    so argparse namespaces can be passed straight through.
    """
    train_updates: Dict[str, Any] = {}
    for key, value in values.items():
        if value is None:
            continue
        if key in _TRAIN_KEYS:
            parser = _TRAIN_PARSERS.get(str(_TRAIN_KEYS[key]), str)
            train_updates[key] = parser(value) if isinstance(value, str) else value
        elif key in _RUN_KEYS:
            setattr(config, key, _RUN_KEYS[key](value) if isinstance(value, str) else value)
        else:
            raise ValidationError(f"unknown setting {key!r}")
    if "seed" in values and values["seed"] is not None and "seed" not in train_updates:
        train_updates["seed"] = config.seed
    if train_updates:
        try:
            config.train = replace(config.train, **train_updates)
        except (TypeError, ValueError) as e:
            raise ValidationError(f"invalid training setting: {e}") from e
    return config


def env_overrides() -> Dict[str, Any]:
    """Settings taken from the environment (``CARDIQ_SEED``)."""
    out: Dict[str, Any] = {}
    seed = os.environ.get(ENV_SEED)
    if seed:
        try:
            out["seed"] = int(seed)
        except ValueError as e:
            raise ValidationError(f"{ENV_SEED} must be an integer, got {seed!r}") from e
    return out


def log_level() -> str:
    return os.environ.get(ENV_LOG_LEVEL, DEFAULT_LOG_LEVEL).upper()
