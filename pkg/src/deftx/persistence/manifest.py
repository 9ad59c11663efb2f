"""
Persistence - Experiment files and run manifests

Experiment settings are read from a sectioned `key = value` file (see
README.md for the format); run manifests are JSON documents written next
to every CLI output.
"""

import configparser
import io
import platform
import sys
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import psutil
from pydantic import BaseModel, ValidationError

from ..config import ExperimentConfig, SweepGrid
from ..core.errors import ConfigError, FormatError, MissingInputError
from ..core.models import DenoiseConfig, ModelSpec, RankPolicy, RunManifest, TrainConfig
from ..data.synth import LanguageSpec, TaskSpec
from .binary import atomic_write

PathLike = Union[str, Path]

# Top-level keys of ExperimentConfig that live in [experiment]
_EXPERIMENT_KEYS = (
    "seed",
    "method",
    "source_language",
    "pretrain_sentences",
    "language_sentences",
    "task_examples",
    "test_examples",
    "holdout_fraction",
    "eval_metric",
)
_TRAIN_SECTIONS = {"pretrain": "pretrain", "train.language": "language_train", "train.task": "task_train"}
_LIST_KEYS = {"denoise_classes", "methods", "ranks_language", "ranks_task", "k_language_fractions", "epsilons"}


def _split(value: str) -> List[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


def _section(parser: configparser.ConfigParser, name: str, model: type[BaseModel], skip: tuple = ()) -> Dict[str, Any]:
    values: Dict[str, Any] = {}
    for key, raw in parser.items(name):
        if key not in model.model_fields or key in skip:
            raise ConfigError(f"unknown key {key!r} in section [{name}]")
        values[key] = _split(raw) if key in _LIST_KEYS else raw
    return values


def parse_experiment(text: str, source: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case-sensitive
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {source}: {exc}") from exc

    data: Dict[str, Any] = {}
    languages: List[Dict[str, Any]] = []
    try:
        for name in parser.sections():
            if name == "experiment":
                for key, raw in parser.items(name):
                    if key not in _EXPERIMENT_KEYS:
                        raise ConfigError(f"unknown key {key!r} in section [experiment]")
                    data[key] = raw
            elif name == "model":
                data["model"] = _section(parser, name, ModelSpec)
            elif name in _TRAIN_SECTIONS:
                data[_TRAIN_SECTIONS[name]] = _section(parser, name, TrainConfig)
            elif name == "denoise":
                denoise = dict(parser.items(name))
                for key in ("rank_language", "rank_task"):
                    if key in denoise:
                        data[key] = RankPolicy.parse(denoise.pop(key))
                rest = configparser.ConfigParser(interpolation=None)
                rest.read_dict({name: denoise})
                data["denoise"] = _section(rest, name, DenoiseConfig, skip=("rank_policy",))
            elif name == "budget":
                for key, raw in parser.items(name):
                    if key not in ("k_language_fraction", "k_task_fraction", "k_language", "k_task"):
                        raise ConfigError(f"unknown key {key!r} in section [budget]")
                    data[key] = raw or None
            elif name == "task":
                data["task"] = _section(parser, name, TaskSpec)
            elif name.startswith("language."):
                spec = _section(parser, name, LanguageSpec, skip=("language_id",))
                spec["language_id"] = name.split(".", 1)[1]
                languages.append(spec)
            elif name == "sweep":
                data["sweep"] = _section(parser, name, SweepGrid)
            else:
                raise ConfigError(f"unknown section [{name}] in {source}")

        if languages:
            vocab = data.get("model", {}).get("vocab_size", ModelSpec().vocab_size)
            for spec in languages:
                spec.setdefault("vocab_size", vocab)
            data["languages"] = languages
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid experiment config {source}: {exc}") from exc


def load_experiment(path: Optional[PathLike]) -> ExperimentConfig:
    """Defaults when path is None."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"no such config file: {path}")
    return parse_experiment(path.read_text(encoding="utf-8"), str(path))


def _ini_value(value: Any) -> str:
    if isinstance(value, (set, frozenset)):
        return ", ".join(sorted(_ini_value(v) for v in value))
    if isinstance(value, (list, tuple)):
        return ", ".join(_ini_value(v) for v in value)
    if isinstance(value, Enum):
        return str(value.value)
    return "" if value is None else str(value)


def experiment_to_ini(cfg: ExperimentConfig) -> str:
    """Inverse of parse_experiment: every resolved value, written out."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["experiment"] = {key: _ini_value(getattr(cfg, key)) for key in _EXPERIMENT_KEYS}
    parser["model"] = {k: _ini_value(v) for k, v in cfg.model}
    for section, attr in _TRAIN_SECTIONS.items():
        parser[section] = {k: _ini_value(v) for k, v in getattr(cfg, attr) if v is not None}
    denoise = {k: _ini_value(v) for k, v in cfg.denoise if k != "rank_policy"}
    denoise["rank_language"] = str(cfg.rank_language)
    denoise["rank_task"] = str(cfg.rank_task)
    parser["denoise"] = denoise
    parser["budget"] = {
        key: _ini_value(getattr(cfg, key)) for key in ("k_language_fraction", "k_task_fraction", "k_language", "k_task")
    }
    parser["task"] = {k: _ini_value(v) for k, v in cfg.task}
    for lang in cfg.languages:
        parser[f"language.{lang.language_id}"] = {k: _ini_value(v) for k, v in lang if k != "language_id"}
    parser["sweep"] = {k: _ini_value(v) for k, v in cfg.sweep}

    buffer = io.StringIO()
    parser.write(buffer)
    return buffer.getvalue()


# --- RUN MANIFESTS ---

def environment_info() -> Dict[str, Any]:
    return {
        "python": sys.version.split()[0],
        "platform": platform.platform(),
        "numpy": np.__version__,
        "cpu_count": psutil.cpu_count(logical=True),
        "physical_cores": psutil.cpu_count(logical=False),
    }


def write_manifest(manifest: RunManifest, path: PathLike) -> Path:
    payload = manifest.model_dump_json(indent=2).encode("utf-8")
    return atomic_write(path, payload)


def read_manifest(path: PathLike) -> RunManifest:
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"no such manifest: {path}")
    try:
        return RunManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as exc:
        raise FormatError(f"invalid manifest: {exc}", path=str(path)) from exc


def manifest_path_for(output: PathLike) -> Path:
    output = Path(output)
    if output.suffix:
        return output.with_suffix(output.suffix + ".manifest.json")
    return output / "manifest.json"
