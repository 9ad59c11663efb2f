import logging
from pathlib import Path

import numpy as np
import pytest

from deftx.analysis import read_table
from deftx.cli import main
from deftx.core.models import VectorKind, VectorMetadata
from deftx.deft import global_topk_mask
from deftx.model.params import init_params
from deftx.numerics import make_rng
from deftx.persistence import (
    experiment_to_ini,
    load_checkpoint,
    load_corpus,
    load_vector,
    read_manifest,
    save_checkpoint,
    save_vector,
)
from deftx.vectors import SparseVector

from conftest import TINY_SPEC, random_delta, tiny_experiment


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    """Working directory with a base checkpoint and an experiment file."""
    root = logging.getLogger()
    saved, level = root.handlers[:], root.level
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("DEFTX_OUTPUT_DIR", str(tmp_path / "out"))
    monkeypatch.setenv("DEFTX_REGISTRY", "0")
    monkeypatch.setenv("DEFTX_BANNER", "0")
    monkeypatch.setenv("DEFTX_WORKERS", "1")
    monkeypatch.setenv("DEFTX_DB_PATH", str(tmp_path / "runs.db"))
    monkeypatch.delenv("DEFTX_LOG_TO_FILE", raising=False)
    save_checkpoint(init_params(TINY_SPEC, make_rng(0, "init")), tmp_path / "theta0.dftx")
    (tmp_path / "exp.ini").write_text(experiment_to_ini(tiny_experiment()))
    yield tmp_path
    for handler in root.handlers:
        if handler not in saved:
            handler.close()
    root.handlers = saved
    root.setLevel(level)
    logging.captureWarnings(False)


def deftx(command: str, *rest: str) -> int:
    return main([command, "--config", "exp.ini", *rest])


def _vector_file(path: Path, seed: int, k: int = 30) -> Path:
    theta0 = load_checkpoint("theta0.dftx")
    delta = random_delta(theta0, np.random.default_rng(seed))
    phi = SparseVector.from_dense(
        delta, global_topk_mask(delta, k, theta0.names()), VectorMetadata(kind=VectorKind.LANGUAGE, label=path.stem)
    )
    return save_vector(phi, path)


def test_pretrain_writes_checkpoint_and_manifest(workspace):
    assert deftx("pretrain", "-o", "base.dftx") == 0
    theta = load_checkpoint("base.dftx")
    assert theta.spec == TINY_SPEC
    manifest = read_manifest("base.dftx.manifest.json")
    assert manifest.command == "pretrain"
    assert manifest.outputs["checkpoint"] == "base.dftx"
    assert "pretrain" in manifest.seeds
    assert any(name.startswith("train_log:") for name in manifest.outputs)


def test_gen_corpus(workspace):
    assert deftx("gen-corpus", "--lang", "bb", "--sentences", "10", "-o", "bb.dftc") == 0
    corpus = load_corpus("bb.dftc")
    assert len(corpus) == 10 and corpus.language_id == "bb"


def test_compose_without_vectors_reproduces_base(workspace):
    assert deftx("compose", "--base", "theta0.dftx", "-o", "same.dftx") == 0
    assert Path("same.dftx").read_bytes() == Path("theta0.dftx").read_bytes()
    manifest = read_manifest("same.dftx.manifest.json")
    assert "theta0.dftx" in manifest.inputs


def test_eval_writes_one_row(workspace):
    assert deftx("eval", "--base", "theta0.dftx", "--lang", "bb", "-o", "eval.csv") == 0
    assert Path("eval.csv").read_text().startswith("# majority baseline:")
    frame = read_table("eval.csv")
    assert len(frame) == 1
    assert frame.loc[0, "method"] == "base" and frame.loc[0, "target"] == "bb"
    assert 0.0 <= frame.loc[0, "score"] <= 1.0


def test_overlap_tables(workspace):
    _vector_file(Path("a.dfts"), 0)
    _vector_file(Path("b.dfts"), 1)
    _vector_file(Path("t.dfts"), 2, k=60)
    assert deftx("overlap", "a.dfts", "b.dfts", "-o", "ov") == 0
    for name in ("overlap_matrix.csv", "overlap_long.csv", "sparsity.csv", "manifest.json"):
        assert (workspace / "ov" / name).is_file()
    assert len(read_table("ov/overlap_long.csv")) == 4

    assert deftx("overlap", "--group", "g=a.dfts,b.dfts", "--reference", "g=t.dfts", "-o", "grp") == 0
    assert len(read_table("grp/group_overlap.csv")) == 2


def test_overlap_needs_matching_groups(workspace):
    _vector_file(Path("a.dfts"), 0)
    assert deftx("overlap", "--group", "g=a.dfts", "-o", "x") == 2
    assert deftx("overlap", "a.dfts", "-o", "x") == 2


def test_train_lang_writes_vector_and_mask(workspace):
    code = deftx("train-lang", "--base", "theta0.dftx", "--lang", "bb", "-o", "bb.dfts", "--mask-output", "bb.dftm")
    assert code == 0
    phi = load_vector("bb.dfts")
    assert phi.metadata.kind == VectorKind.LANGUAGE and phi.metadata.label == "lang-bb"
    assert Path("bb.dftm").is_file()


# --- EXIT CODES ---

def test_usage_errors(workspace):
    assert main(["--version"]) == 0
    assert main(["frobnicate"]) == 2
    assert deftx("train-lang", "--base", "theta0.dftx", "--lang", "bb", "--k-lang", "5", "--k-lang-fraction", "0.1") == 2


def test_missing_input(workspace):
    assert deftx("train-lang", "--base", "nope.dftx", "--lang", "bb") == 3
    assert main(["pretrain", "--config", "missing.ini"]) == 3


def test_format_error(workspace):
    Path("junk.dftx").write_bytes(b"garbage")
    assert deftx("compose", "--base", "junk.dftx") == 4


def test_config_errors(workspace):
    Path("bad.ini").write_text("[model]\nd_model = 7\nn_heads = 2\n")
    assert main(["pretrain", "--config", "bad.ini"]) == 6
    assert deftx("train-lang", "--base", "theta0.dftx", "--lang", "bb", "--k-lang", str(10**9)) == 6


def test_incompatible_base(workspace):
    other = init_params(TINY_SPEC.model_copy(update={"d_model": 4}), make_rng(0, "init"))
    save_checkpoint(other, "small.dftx")
    _vector_file(Path("a.dfts"), 0)
    assert deftx("compose", "--base", "small.dftx", "a.dfts") == 7


def test_workers_do_not_change_vectors(workspace):
    args = ("train-lang", "--base", "theta0.dftx", "--lang", "bb")
    assert deftx(*args, "--workers", "1", "-o", "w1.dfts") == 0
    assert deftx(*args, "--workers", "8", "-o", "w8.dfts") == 0
    assert Path("w1.dfts").read_bytes() == Path("w8.dfts").read_bytes()


@pytest.mark.slow
def test_four_commands_match_ablate_none(workspace):
    assert deftx("train-lang", "--base", "theta0.dftx", "--lang", "aa", "-o", "aa.dfts") == 0
    assert deftx("train-task", "--base", "theta0.dftx", "--source-lang-vector", "aa.dfts", "-o", "task.dfts") == 0
    assert deftx("train-lang", "--base", "theta0.dftx", "--lang", "bb", "-o", "bb.dfts") == 0
    assert deftx("compose", "--base", "theta0.dftx", "task.dfts", "bb.dfts", "--head", "task.head.dftx", "-o", "m.dftx") == 0

    assert deftx("ablate", "--variant", "none", "--base", "theta0.dftx", "--targets", "bb", "-o", "abl") == 0
    assert Path("m.dftx").read_bytes() == Path("abl/composed_bb.dftx").read_bytes()
    assert load_vector("task.dfts").metadata.parents == [load_vector("aa.dfts").digest()]


@pytest.mark.slow
def test_sweep_command(workspace):
    ini = experiment_to_ini(tiny_experiment()).replace("methods = lt-sft, deftx", "methods = deftx")
    ini = ini.replace("epsilons = 0.2, 0.5, 0.8", "epsilons = 0.5")
    Path("exp.ini").write_text(ini.replace("ranks_language = var:0.9", "ranks_language = 4, 8"))
    assert deftx("sweep", "-o", "sweep.csv") == 0
    frame = read_table("sweep.csv")
    assert len(frame) == 4
    assert sorted(frame["rank_language"].astype(str).unique()) == ["4", "8"]
    assert set(frame["target"]) == {"bb", "cc"}


def test_monitor_flag_streams_training_records(workspace, monkeypatch):
    from deftx.monitor import MonitorApp

    seen = []

    def drain_until_finished(app):
        while True:
            item = app.record_queue.get(timeout=120)
            seen.append(item)
            if item["type"] == "finished":
                return

    monkeypatch.setattr(MonitorApp, "run", drain_until_finished)
    assert deftx("train-lang", "--base", "theta0.dftx", "--lang", "bb", "-o", "bb.dfts", "--monitor") == 0
    assert Path("bb.dfts").is_file()
    assert any(item["type"] == "train_record" for item in seen)
    assert seen[-1] == {"type": "finished", "data": {"code": 0}}


def test_monitor_flag_reports_failure_code(workspace, monkeypatch):
    from deftx.monitor import MonitorApp

    codes = []

    def drain_until_finished(app):
        while True:
            item = app.record_queue.get(timeout=60)
            if item["type"] == "finished":
                codes.append(item["data"]["code"])
                return

    monkeypatch.setattr(MonitorApp, "run", drain_until_finished)
    assert deftx("train-lang", "--base", "nope.dftx", "--lang", "bb", "--monitor") == 3
    assert codes == [3]
