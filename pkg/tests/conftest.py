import numpy as np
import pytest

import deftx.config as config_module
from deftx.config import DeftConfig, ExperimentConfig
from deftx.core.models import ModelSpec, SelectionMetric, TrainConfig
from deftx.data.batching import ExampleSet
from deftx.data.synth import LanguageSpec, TaskSpec, gen_corpus, gen_task_data
from deftx.model.params import ParameterSet, init_params
from deftx.numerics import make_rng
from deftx.optim import TrainingData
from deftx.persistence import reset_registry

TINY_SPEC = ModelSpec(vocab_size=24, d_model=8, n_layers=1, n_heads=2, d_ff=16, max_seq_len=14, n_classes=3)
TINY_TASK = TaskSpec(n_classes=3, markers_per_class=2)


def tiny_language(language_id: str, epsilon: float = 0.5) -> LanguageSpec:
    return LanguageSpec(language_id=language_id, vocab_size=24, epsilon=epsilon, min_len=6, max_len=12)


def tiny_experiment(**update) -> ExperimentConfig:
    data = dict(
        seed=0,
        model=TINY_SPEC,
        pretrain=TrainConfig(lr=3e-3, max_steps=30, batch_size=8, eval_interval=10),
        language_train=TrainConfig(lr=3e-3, max_steps=12, batch_size=8, eval_interval=6, l1_lambda=0.1),
        task_train=TrainConfig(
            lr=3e-3, max_steps=20, batch_size=8, eval_interval=10, selection_metric=SelectionMetric.F1
        ),
        languages=[tiny_language(l) for l in ("aa", "bb", "cc")],
        task=TINY_TASK,
        pretrain_sentences=60,
        language_sentences=60,
        task_examples=60,
        test_examples=30,
        holdout_fraction=0.1,
        k_language_fraction=0.05,
        k_task_fraction=0.05,
    )
    data.update(update)
    return ExperimentConfig(**data)


@pytest.fixture(autouse=True)
def process_config(tmp_path, monkeypatch):
    """Isolated process settings: no registry, no banner, output under tmp_path."""
    for name in ("DEFTX_CONFIG_PAYLOAD", "DEFTX_WORKERS", "DEFTX_OUTPUT_DIR", "DEFTX_REGISTRY"):
        monkeypatch.delenv(name, raising=False)
    config = DeftConfig(
        output_dir=str(tmp_path / "runs"),
        workers=1,
        enable_registry=False,
        show_banner=False,
        db_path=str(tmp_path / "runs.db"),
    )
    monkeypatch.setattr(config_module, "_config", config)
    reset_registry()
    yield config
    reset_registry()


@pytest.fixture
def tiny_spec() -> ModelSpec:
    return TINY_SPEC


@pytest.fixture
def theta0(tiny_spec) -> ParameterSet:
    return init_params(tiny_spec, make_rng(0, "init"))


@pytest.fixture
def experiment() -> ExperimentConfig:
    return tiny_experiment()


@pytest.fixture
def mlm_data() -> TrainingData:
    corpus = gen_corpus(tiny_language("aa"), 48, seed=3)
    return TrainingData.from_examples(corpus.to_examples(TINY_SPEC.max_seq_len), TINY_SPEC.vocab_size, 0.1, seed=3)


@pytest.fixture
def task_data() -> TrainingData:
    data = gen_task_data(tiny_language("aa"), TINY_TASK, 48, seed=4)
    return TrainingData.from_examples(data.to_examples(TINY_SPEC.max_seq_len), TINY_SPEC.vocab_size, 0.1, seed=4)


@pytest.fixture
def task_test() -> ExampleSet:
    return gen_task_data(tiny_language("bb"), TINY_TASK, 30, seed=5).to_examples(TINY_SPEC.max_seq_len)


@pytest.fixture
def short_mlm() -> TrainConfig:
    return TrainConfig(lr=3e-3, max_steps=6, batch_size=8, eval_interval=3)


@pytest.fixture
def short_task() -> TrainConfig:
    return TrainConfig(lr=3e-3, max_steps=6, batch_size=8, eval_interval=3, selection_metric=SelectionMetric.ACCURACY)


def random_delta(params, rng: np.random.Generator):
    return params.map(lambda n, t: rng.standard_normal(t.shape))
