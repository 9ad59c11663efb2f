import os
import json
from dataclasses import dataclass, field, asdict
from enum import Enum
from typing import Any, Dict, List, Optional

import psutil
from dotenv import load_dotenv
from pydantic import BaseModel, Field, model_validator

from .core.errors import MissingInputError
from .core.models import (
    DenoiseConfig,
    Method,
    ModelSpec,
    Objective,
    RankPolicy,
    SelectionMetric,
    TrainConfig,
)
from .data.synth import DEFAULT_EPSILONS, LanguageSpec, TaskSpec


class LogLevel(str, Enum):
    DEBUG = "debug"
    INFO = "info"
    WARNING = "warning"
    ERROR = "error"
    CRITICAL = "critical"


def _default_workers() -> int:
    return psutil.cpu_count(logical=False) or 1


def _truthy(value: str) -> bool:
    return value.lower() in ("1", "true", "yes")


@dataclass
class DeftConfig:
    """
    Process-level settings (logging, output, parallelism, run registry).
    Experiment hyperparameters live in ExperimentConfig.
    """

    # Logging settings
    log_level: LogLevel = LogLevel.INFO
    log_to_file: bool = False
    log_file_path: str = "deftx.log"

    # Output
    output_dir: str = "runs"
    show_banner: bool = True

    # Parallel SVD workers; results never depend on this value
    workers: int = field(default_factory=_default_workers)

    # Run registry (SQLite)
    enable_registry: bool = True
    db_path: str = "deftx_runs.db"

    # --- SERIALIZATION METHODS ---

    def override_from_cli(self, args: Any) -> None:
        """CLI arguments win, but only the ones that were given."""
        for name in ("log_level", "log_file_path", "output_dir", "workers", "db_path"):
            value = getattr(args, name, None)
            if value is None:
                continue
            if name == "log_level":
                value = LogLevel(str(value).lower())
            setattr(self, name, value)
        if getattr(args, "log_file_path", None):
            self.log_to_file = True
        if getattr(args, "no_registry", False):
            self.enable_registry = False
        if getattr(args, "quiet", False):
            self.show_banner = False

    def to_json_payload(self) -> str:
        data = asdict(self)
        data["log_level"] = self.log_level.value
        return json.dumps(data)

    @classmethod
    def from_json_payload(cls, payload: str) -> "DeftConfig":
        data = json.loads(payload)
        if "log_level" in data:
            data["log_level"] = LogLevel(data["log_level"])
        return cls(**data)

    @classmethod
    def from_env(cls) -> "DeftConfig":
        load_dotenv()
        workers = os.getenv("DEFTX_WORKERS")
        return cls(
            log_level=LogLevel(os.getenv("DEFTX_LOG_LEVEL", "info").lower()),
            log_to_file=_truthy(os.getenv("DEFTX_LOG_TO_FILE", "")),
            log_file_path=os.getenv("DEFTX_LOG_FILE", "deftx.log"),
            output_dir=os.getenv("DEFTX_OUTPUT_DIR", "runs"),
            show_banner=_truthy(os.getenv("DEFTX_BANNER", "1")),
            workers=int(workers) if workers else _default_workers(),
            enable_registry=_truthy(os.getenv("DEFTX_REGISTRY", "1")),
            db_path=os.getenv("DEFTX_DB_PATH", "deftx_runs.db"),
        )


# Global config instance
_config: Optional[DeftConfig] = None

def get_config() -> DeftConfig:
    global _config
    if _config is None:
        payload = os.environ.get("DEFTX_CONFIG_PAYLOAD")
        if payload:
            try:
                _config = DeftConfig.from_json_payload(payload)
            except Exception:
                _config = DeftConfig.from_env()
        else:
            _config = DeftConfig.from_env()
    return _config

def set_config(config: DeftConfig) -> None:
    global _config
    _config = config


# --- EXPERIMENT CONFIG ---

class SweepGrid(BaseModel):
    """Grid for the `sweep` command; every combination is one result row"""
    methods: List[Method] = Field(default_factory=lambda: [Method.LT_SFT, Method.DEFTX])
    ranks_language: List[str] = Field(default_factory=lambda: ["var:0.9"])
    ranks_task: List[str] = Field(default_factory=lambda: ["var:0.9"])
    k_language_fractions: List[float] = Field(default_factory=lambda: [0.028])
    epsilons: List[float] = Field(default_factory=lambda: list(DEFAULT_EPSILONS))


class ExperimentConfig(BaseModel):
    """Everything a pipeline run depends on, loaded from a sectioned key=value file"""
    seed: int = 0
    model: ModelSpec = Field(default_factory=ModelSpec)
    pretrain: TrainConfig = Field(
        default_factory=lambda: TrainConfig(lr=1e-3, max_steps=400, batch_size=16, eval_interval=100)
    )
    language_train: TrainConfig = Field(
        default_factory=lambda: TrainConfig(lr=1e-3, max_steps=200, batch_size=16, eval_interval=50, l1_lambda=0.1)
    )
    task_train: TrainConfig = Field(
        default_factory=lambda: TrainConfig(
            lr=1e-3, max_steps=200, batch_size=16, eval_interval=50, selection_metric=SelectionMetric.F1
        )
    )
    denoise: DenoiseConfig = Field(default_factory=DenoiseConfig)
    rank_language: RankPolicy = Field(default_factory=RankPolicy.variance)
    rank_task: RankPolicy = Field(default_factory=RankPolicy.variance)
    k_language_fraction: float = Field(default=0.028, gt=0.0, le=1.0)
    k_task_fraction: float = Field(default=0.052, gt=0.0, le=1.0)
    k_language: Optional[int] = Field(default=None, ge=0)
    k_task: Optional[int] = Field(default=None, ge=0)
    method: Method = Method.DEFTX
    languages: List[LanguageSpec] = Field(
        default_factory=lambda: [LanguageSpec(language_id=l, epsilon=0.5) for l in ("aa", "bb", "cc")]
    )
    source_language: str = "aa"
    task: TaskSpec = Field(default_factory=TaskSpec)
    pretrain_sentences: int = Field(default=600, ge=1)
    language_sentences: int = Field(default=400, ge=1)
    task_examples: int = Field(default=300, ge=2)
    test_examples: int = Field(default=150, ge=1)
    holdout_fraction: float = Field(default=0.05, gt=0.0, lt=1.0)
    eval_metric: str = "accuracy"
    sweep: SweepGrid = Field(default_factory=SweepGrid)

    @model_validator(mode="after")
    def _consistent(self) -> "ExperimentConfig":
        ids = [l.language_id for l in self.languages]
        if len(set(ids)) != len(ids):
            raise ValueError("language ids must be unique")
        if self.source_language not in ids:
            raise ValueError(f"source_language {self.source_language!r} is not among {ids}")
        for lang in self.languages:
            if lang.vocab_size != self.model.vocab_size:
                raise ValueError(f"language {lang.language_id!r} vocab differs from the model vocab")
        if self.eval_metric not in ("accuracy", "macro_f1"):
            raise ValueError("eval_metric must be accuracy or macro_f1")
        return self

    def language(self, language_id: str) -> LanguageSpec:
        for lang in self.languages:
            if lang.language_id == language_id:
                return lang
        raise MissingInputError(f"language {language_id!r} is not configured")

    def train_config(self, objective: Objective) -> TrainConfig:
        return self.language_train if objective == Objective.MLM else self.task_train

    def denoise_for(self, objective: Objective) -> DenoiseConfig:
        rank = self.rank_language if objective == Objective.MLM else self.rank_task
        return self.denoise.model_copy(update={"rank_policy": rank})

    def summary(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")
