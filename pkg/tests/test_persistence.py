import struct

import numpy as np
import pytest

from deftx.config import DeftConfig, ExperimentConfig
from deftx.core.errors import ConfigError, FormatError, MissingInputError
from deftx.core.models import Method, RankPolicy, RunManifest, TensorClass, VectorKind, VectorMetadata
from deftx.data.synth import gen_corpus
from deftx.deft import global_topk_mask
from deftx.model import ParameterSet
from deftx.persistence import (
    RunRegistry,
    experiment_to_ini,
    load_any,
    load_checkpoint,
    load_corpus,
    load_experiment,
    load_mask,
    load_vector,
    manifest_path_for,
    parse_experiment,
    read_manifest,
    save_checkpoint,
    save_corpus,
    save_mask,
    save_vector,
    write_manifest,
)
from deftx.vectors import SparseVector

from conftest import random_delta, tiny_experiment, tiny_language


@pytest.fixture
def phi(theta0) -> SparseVector:
    delta = random_delta(theta0, np.random.default_rng(0))
    mask = global_topk_mask(delta, 25, theta0.names())
    meta = VectorMetadata(kind=VectorKind.TASK, label="task", parents=["abc"], rank_policy="var:0.9")
    return SparseVector.from_dense(delta, mask, meta)


def _same_vector(a: SparseVector, b: SparseVector) -> bool:
    return (
        a.digest() == b.digest()
        and a.metadata == b.metadata
        and a.shapes == b.shapes
        and a.classes == b.classes
    )


# --- ROUND TRIPS ---

def test_checkpoint_roundtrip(theta0, tmp_path):
    path = save_checkpoint(theta0, tmp_path / "theta0.dftx")
    loaded = load_checkpoint(path)
    assert loaded.bitwise_equal(theta0)
    assert loaded.spec == theta0.spec
    assert loaded.classes == theta0.classes
    assert save_checkpoint(loaded, tmp_path / "again.dftx").read_bytes() == path.read_bytes()


def test_vector_roundtrip(phi, tmp_path):
    path = save_vector(phi, tmp_path / "phi.dfts")
    loaded = load_vector(path)
    assert _same_vector(loaded, phi)
    assert save_vector(loaded, tmp_path / "again.dfts").read_bytes() == path.read_bytes()


def test_mask_roundtrip(phi, tmp_path):
    mask = phi.support()
    assert load_mask(save_mask(mask, tmp_path / "m.dftm")) == mask


def test_corpus_roundtrip(tmp_path):
    corpus = gen_corpus(tiny_language("aa"), 15, seed=3)
    loaded = load_corpus(save_corpus(corpus, tmp_path / "aa.dftc"))
    assert loaded.language_id == "aa" and loaded.seed == 3 and loaded.vocab_size == corpus.vocab_size
    assert np.array_equal(loaded.tokens, corpus.tokens)
    assert np.array_equal(loaded.offsets, corpus.offsets)


def test_load_any_dispatches_on_magic(theta0, phi, tmp_path):
    assert isinstance(load_any(save_checkpoint(theta0, tmp_path / "a.bin")), ParameterSet)
    assert isinstance(load_any(save_vector(phi, tmp_path / "b.bin")), SparseVector)


# --- CORRUPTION ---

@pytest.mark.parametrize("kind", ["checkpoint", "vector"])
def test_truncated_files_never_load(theta0, phi, tmp_path, kind):
    source = save_checkpoint(theta0, tmp_path / "x.dftx") if kind == "checkpoint" else save_vector(phi, tmp_path / "x.dfts")
    payload = source.read_bytes()
    cuts = np.random.default_rng(0).integers(0, len(payload), size=100)
    broken = tmp_path / "broken"
    for cut in cuts:
        broken.write_bytes(payload[: int(cut)])
        with pytest.raises(FormatError):
            load_any(broken)


def test_bad_magic_and_version(phi, tmp_path):
    payload = bytearray(save_vector(phi, tmp_path / "v.dfts").read_bytes())
    bad = tmp_path / "bad.dfts"
    bad.write_bytes(b"NOPE" + bytes(payload[4:]))
    with pytest.raises(FormatError) as info:
        load_vector(bad)
    assert info.value.offset == 0

    payload[4] = 99
    bad.write_bytes(bytes(payload))
    with pytest.raises(FormatError) as info:
        load_vector(bad)
    assert info.value.offset == 4


def test_trailing_bytes(theta0, tmp_path):
    path = save_checkpoint(theta0, tmp_path / "t.dftx")
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(FormatError):
        load_checkpoint(path)


@pytest.mark.parametrize("extents", [(2**63 + 5, 2), (2**40, 2**40), (2**30, 2)])
def test_corrupt_extents_raise_format_error(tmp_path, extents):
    params = ParameterSet({"w": np.ones((3, 2))}, {"w": TensorClass.WEIGHT})
    payload = bytearray(save_checkpoint(params, tmp_path / "w.dftx").read_bytes())
    # header, two empty strings, tensor count, name "w", class code
    shape_at = 8 + 4 + 4 + 4 + 5 + 1
    assert payload[shape_at] == 2
    payload[shape_at + 1 : shape_at + 17] = struct.pack("<QQ", *extents)
    broken = tmp_path / "broken.dftx"
    broken.write_bytes(bytes(payload))
    with pytest.raises(FormatError) as info:
        load_checkpoint(broken)
    assert info.value.offset >= shape_at


def test_missing_file(tmp_path):
    with pytest.raises(MissingInputError):
        load_any(tmp_path / "nothing.dftx")


# --- EXPERIMENT FILES ---

def test_experiment_ini_roundtrip():
    cfg = tiny_experiment(rank_language=RankPolicy.uniform(4), k_task=12)
    assert parse_experiment(experiment_to_ini(cfg)) == cfg


def test_default_experiment_ini_roundtrip():
    cfg = ExperimentConfig()
    assert parse_experiment(experiment_to_ini(cfg)) == cfg


def test_parse_experiment_sections():
    cfg = parse_experiment(
        """
        [experiment]
        seed = 7
        method = lt-sft

        [model]
        vocab_size = 32
        d_model = 16

        [denoise]
        rank_language = 8
        rank_task = var:0.8:linear
        residual_retain_fraction = 0.1

        [language.aa]
        epsilon = 0.2

        [language.xx]
        epsilon = 0.8

        [sweep]
        ranks_language = 4, 8
        epsilons = 0.2, 0.8
        """.replace("\n        ", "\n")
    )
    assert cfg.seed == 7 and cfg.method == Method.LT_SFT
    assert cfg.model.vocab_size == 32 and cfg.model.d_model == 16
    assert cfg.rank_language == RankPolicy.uniform(8)
    assert str(cfg.rank_task) == "var:0.8:linear"
    assert cfg.denoise.residual_retain_fraction == 0.1
    assert [l.language_id for l in cfg.languages] == ["aa", "xx"]
    assert all(l.vocab_size == 32 for l in cfg.languages)
    assert cfg.sweep.ranks_language == ["4", "8"]
    assert cfg.sweep.epsilons == [0.2, 0.8]


@pytest.mark.parametrize(
    "text",
    [
        "[experiment]\nunknown = 1\n",
        "[mystery]\nx = 1\n",
        "[model]\nd_model = 7\nn_heads = 2\n",
        "[train.language]\nlr = -1\n",
        "[denoise]\nrank_language = many\n",
        "not an ini file",
    ],
)
def test_invalid_experiment_files(text):
    with pytest.raises(ConfigError):
        parse_experiment(text)


def test_load_experiment(tmp_path):
    assert load_experiment(None) == ExperimentConfig()
    with pytest.raises(MissingInputError):
        load_experiment(tmp_path / "missing.ini")


# --- MANIFESTS ---

def test_manifest_roundtrip(tmp_path):
    manifest = RunManifest(run_id="r1", command="pretrain", seeds={"experiment": 0}, outputs={"checkpoint": "x"})
    path = write_manifest(manifest, manifest_path_for(tmp_path / "theta0.dftx"))
    assert path.name == "theta0.dftx.manifest.json"
    assert read_manifest(path) == manifest
    assert manifest_path_for(tmp_path / "overlap") == tmp_path / "overlap" / "manifest.json"


def test_invalid_manifest(tmp_path):
    path = tmp_path / "m.json"
    path.write_text("{}")
    with pytest.raises(FormatError):
        read_manifest(path)


# --- REGISTRY ---

def test_run_registry(tmp_path):
    config = DeftConfig(enable_registry=True, db_path=str(tmp_path / "runs.db"), workers=1)
    registry = RunRegistry(config)
    registry.start_run("r1", "sweep")
    registry.save_results("r1", [{"method": "deftx", "score": 0.5}])
    registry.finish_run(RunManifest(run_id="r1", command="sweep"))

    runs = registry.get_runs()
    assert [(r["id"], r["command"], r["status"]) for r in runs] == [("r1", "sweep", "ok")]
    assert registry.get_results("r1") == [{"method": "deftx", "score": 0.5}]
    assert registry.get_manifest("r1").command == "sweep"

    registry.fail_run("r1", "boom")
    assert registry.get_runs()[0]["status"] == "failed: boom"
    registry.delete_run("r1")
    assert registry.get_runs() == []


def test_disabled_registry(tmp_path):
    registry = RunRegistry(DeftConfig(enable_registry=False, db_path=str(tmp_path / "x.db"), workers=1))
    registry.start_run("r1", "pretrain")
    assert registry.get_runs() == []
    assert registry.get_manifest("r1") is None
    assert not (tmp_path / "x.db").exists()
