"""
Persistence Module

Binary containers for checkpoints, vectors, masks and corpora; experiment
config files and run manifests; the SQLite run registry.
"""

from .binary import (
    FORMAT_VERSION,
    save_checkpoint,
    load_checkpoint,
    save_vector,
    load_vector,
    save_mask,
    load_mask,
    save_corpus,
    load_corpus,
    load_any,
    atomic_write,
)
from .manifest import (
    parse_experiment,
    load_experiment,
    experiment_to_ini,
    environment_info,
    write_manifest,
    read_manifest,
    manifest_path_for,
)
from .sqlite import RunRegistry, get_registry, reset_registry

__all__ = [
    "FORMAT_VERSION",
    "save_checkpoint",
    "load_checkpoint",
    "save_vector",
    "load_vector",
    "save_mask",
    "load_mask",
    "save_corpus",
    "load_corpus",
    "load_any",
    "atomic_write",
    "parse_experiment",
    "load_experiment",
    "experiment_to_ini",
    "environment_info",
    "write_manifest",
    "read_manifest",
    "manifest_path_for",
    "RunRegistry",
    "get_registry",
    "reset_registry",
]
