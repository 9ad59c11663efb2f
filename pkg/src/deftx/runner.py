"""
Experiment Runner

Turns an ExperimentConfig into concrete jobs: synthetic data with derived
seeds, pretraining of the base model, language and task vectors, zero-shot
evaluation, ablations and the sweep grid. The CLI is a thin layer on top.
"""

import atexit
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
from rich.console import Console
from rich.panel import Panel

from .config import DeftConfig, ExperimentConfig, get_config
from .core.errors import IncompatibleError
from .core.models import AblationVariant, Method, Objective, RankPolicy, TensorClass, TrainConfig
from .core.provenance import stable_int
from .data.batching import ExampleSet
from .data.synth import Corpus, LanguageSpec, gen_corpus, gen_task_data
from .deft import Composable, SftResult, budget_from_fraction
from .loggers.train_logger import TrainLogger
from .model.params import ParameterSet, init_params
from .numerics import make_rng
from .optim import TrainingData, full_finetune, trainable_names
from .transfer import ComposedModel, train_language_vector, train_task_vector, zero_shot_eval

logger = logging.getLogger(__name__)


def derive_seed(seed: int, *keys: Union[str, int]) -> int:
    """Non-negative 63-bit seed for a (role, language, ...) job."""
    return stable_int(seed, *keys)


@dataclass
class TransferScore:
    method: str
    source: str
    target: str
    metric: str
    score: float
    majority: float
    composed: Optional[ComposedModel] = None


class ExperimentRunner:
    def __init__(
        self,
        experiment: ExperimentConfig,
        config: Optional[DeftConfig] = None,
        run_dir: Optional[Union[str, Path]] = None,
        console: Optional[Console] = None,
    ):
        self.experiment = experiment
        self.config = config or get_config()
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.console = console or Console(stderr=True)
        self._loggers: List[TrainLogger] = []
        atexit.register(self.close)

    # --- LOGGING ---

    def print_banner(self, command: str, run_id: str) -> None:
        if not self.config.show_banner:
            return
        exp = self.experiment
        lines = [
            f"command      {command}",
            f"run          {run_id}",
            f"method       {exp.method.value}",
            f"languages    {', '.join(f'{l.language_id}(eps={l.epsilon:g})' for l in exp.languages)}",
            f"ranks        r_l={exp.rank_language}  r_t={exp.rank_task}",
            f"workers      {self.config.workers}",
            f"registry     {self.config.db_path if self.config.enable_registry else 'disabled'}",
        ]
        self.console.print(Panel("\n".join(lines), title="deftx", expand=False))

    def train_logger(self, label: str) -> TrainLogger:
        path = self.run_dir / f"train_{label}.jsonl" if self.run_dir is not None else None
        train_logger = TrainLogger(path=path, run=label)
        self._loggers.append(train_logger)
        return train_logger

    def close(self) -> None:
        for train_logger in self._loggers:
            train_logger.close()
        self._loggers.clear()

    # --- DATA ---

    def _language(self, language_id: str, epsilon: Optional[float] = None) -> LanguageSpec:
        lang = self.experiment.language(language_id)
        return lang if epsilon is None else lang.model_copy(update={"epsilon": epsilon})

    def pretrain_examples(self, epsilon: Optional[float] = None) -> ExampleSet:
        """Mixed-language corpus, one block per configured language."""
        exp = self.experiment
        sentences: List[np.ndarray] = []
        for lang in exp.languages:
            spec = self._language(lang.language_id, epsilon)
            corpus = gen_corpus(spec, exp.pretrain_sentences, derive_seed(exp.seed, "pretrain", spec.language_id))
            sentences.extend(corpus.sentences())
        return ExampleSet.from_sentences(sentences, exp.model.max_seq_len)

    def language_corpus(self, language_id: str, epsilon: Optional[float] = None) -> Corpus:
        exp = self.experiment
        spec = self._language(language_id, epsilon)
        return gen_corpus(spec, exp.language_sentences, derive_seed(exp.seed, "language", language_id))

    def corpus_data(self, corpus: Corpus) -> TrainingData:
        exp = self.experiment
        if corpus.vocab_size != exp.model.vocab_size:
            raise IncompatibleError(f"corpus vocab {corpus.vocab_size} differs from the model vocab")
        return TrainingData.from_examples(
            corpus.to_examples(exp.model.max_seq_len),
            exp.model.vocab_size,
            exp.holdout_fraction,
            derive_seed(exp.seed, "holdout", "language", corpus.language_id),
        )

    def language_data(self, language_id: str, epsilon: Optional[float] = None) -> TrainingData:
        return self.corpus_data(self.language_corpus(language_id, epsilon))

    def task_data(self, language_id: str, epsilon: Optional[float] = None) -> TrainingData:
        exp = self.experiment
        spec = self._language(language_id, epsilon)
        data = gen_task_data(spec, exp.task, exp.task_examples, derive_seed(exp.seed, "task-train", language_id))
        return TrainingData.from_examples(
            data.to_examples(exp.model.max_seq_len),
            exp.model.vocab_size,
            exp.holdout_fraction,
            derive_seed(exp.seed, "holdout", "task", language_id),
        )

    def test_examples(self, language_id: str, epsilon: Optional[float] = None) -> ExampleSet:
        exp = self.experiment
        spec = self._language(language_id, epsilon)
        data = gen_task_data(spec, exp.task, exp.test_examples, derive_seed(exp.seed, "task-test", language_id))
        return data.to_examples(exp.model.max_seq_len)

    # --- BUDGETS ---

    def k_language(self, theta0: ParameterSet, fraction: Optional[float] = None) -> int:
        exp = self.experiment
        if exp.k_language is not None and fraction is None:
            return exp.k_language
        eligible = trainable_names(theta0, Objective.MLM, theta0.names_of(TensorClass.LAYER_NORM))
        return budget_from_fraction(theta0, exp.k_language_fraction if fraction is None else fraction, eligible)

    def k_task(self, theta0: ParameterSet) -> int:
        exp = self.experiment
        if exp.k_task is not None:
            return exp.k_task
        return budget_from_fraction(theta0, exp.k_task_fraction, trainable_names(theta0, Objective.CLASSIFY))

    # --- JOBS ---

    def phase_config(self, cfg: TrainConfig, role: str, language_id: str = "") -> TrainConfig:
        """Training seed derived from (experiment seed, role, language, configured seed)."""
        return cfg.model_copy(update={"seed": derive_seed(self.experiment.seed, role, language_id, cfg.seed)})

    def pretrain(self, epsilon: Optional[float] = None) -> ParameterSet:
        exp = self.experiment
        examples = self.pretrain_examples(epsilon)
        data = TrainingData.from_examples(
            examples, exp.model.vocab_size, exp.holdout_fraction, derive_seed(exp.seed, "holdout", "pretrain")
        )
        theta = init_params(exp.model, make_rng(exp.seed, "init"))
        logger.info("pretraining on %d sentences (%d languages)", len(examples), len(exp.languages))
        cfg = self.phase_config(exp.pretrain, "pretrain")
        return full_finetune(theta, data, Objective.MLM, cfg, train_logger=self.train_logger("pretrain"))

    def train_language(
        self,
        theta0: ParameterSet,
        language_id: str,
        method: Optional[Method] = None,
        variant: AblationVariant = AblationVariant.NONE,
        rank: Optional[RankPolicy] = None,
        k: Optional[int] = None,
        epsilon: Optional[float] = None,
        data: Optional[TrainingData] = None,
    ) -> SftResult:
        exp = self.experiment
        denoise = exp.denoise_for(Objective.MLM)
        if rank is not None:
            denoise = denoise.model_copy(update={"rank_policy": rank})
        label = f"lang-{language_id}"
        return train_language_vector(
            data if data is not None else self.language_data(language_id, epsilon),
            theta0,
            self.phase_config(exp.language_train, "language", language_id),
            self.k_language(theta0) if k is None else k,
            denoise,
            Method(method or exp.method),
            self.config.workers,
            self.train_logger(label),
            label,
            variant,
        )

    def train_languages(self, theta0: ParameterSet, language_ids: Sequence[str], **kwargs) -> Dict[str, SftResult]:
        """Independent language jobs, run concurrently; each job is deterministic on its own."""
        if not language_ids:
            return {}
        jobs = max(1, min(self.config.workers, len(language_ids)))
        with ThreadPoolExecutor(max_workers=jobs, thread_name_prefix="lang") as pool:
            results = list(pool.map(lambda lid: self.train_language(theta0, lid, **kwargs), language_ids))
        return dict(zip(language_ids, results))

    def train_task(
        self,
        theta0: ParameterSet,
        language_id: str,
        phi_src: Optional[Composable],
        method: Optional[Method] = None,
        variant: AblationVariant = AblationVariant.NONE,
        rank: Optional[RankPolicy] = None,
        epsilon: Optional[float] = None,
    ) -> SftResult:
        exp = self.experiment
        denoise = exp.denoise_for(Objective.CLASSIFY)
        if rank is not None:
            denoise = denoise.model_copy(update={"rank_policy": rank})
        label = f"task-{language_id}"
        return train_task_vector(
            self.task_data(language_id, epsilon),
            theta0,
            phi_src,
            self.phase_config(exp.task_train, "task", language_id),
            self.k_task(theta0),
            denoise,
            Method(method or exp.method),
            self.config.workers,
            self.train_logger(label),
            label,
            variant,
        )

    def evaluate(
        self,
        model: ComposedModel,
        target: str,
        metric: Optional[str] = None,
        epsilon: Optional[float] = None,
    ) -> TransferScore:
        metric = metric or self.experiment.eval_metric
        test = self.test_examples(target, epsilon)
        score = zero_shot_eval(model, test, metric)
        majority = float(np.bincount(test.labels).max() / len(test))
        logger.info("zero-shot %s on %s: %.4f (majority %.4f)", metric, target, score, majority)
        return TransferScore(method="", source="", target=target, metric=metric, score=score, majority=majority)

    def transfer(
        self,
        theta0: ParameterSet,
        targets: Iterable[str],
        method: Optional[Method] = None,
        variant: AblationVariant = AblationVariant.NONE,
        rank_language: Optional[RankPolicy] = None,
        rank_task: Optional[RankPolicy] = None,
        k_language: Optional[int] = None,
        epsilon: Optional[float] = None,
        with_language_vector: bool = True,
    ) -> List[TransferScore]:
        """
        Source vector, task vector on top of it, one vector per target,
        then zero-shot scores of theta0 + task + target with the task head.
        """
        exp = self.experiment
        method = Method(method or exp.method)
        source = exp.source_language
        targets = list(targets)
        lang_kwargs = dict(method=method, variant=variant, rank=rank_language, k=k_language, epsilon=epsilon)

        src = self.train_language(theta0, source, **lang_kwargs)
        task = self.train_task(theta0, source, src.vector, method, variant, rank_task, epsilon)
        todo = [t for t in targets if t != source]
        vectors = self.train_languages(theta0, todo, **lang_kwargs) if with_language_vector else {}
        vectors[source] = src

        label = method.value if variant == AblationVariant.NONE else f"{method.value}:{variant.value}"
        scores = []
        for target in targets:
            applied = [task.vector, vectors[target].vector] if with_language_vector else [task.vector]
            provenance = task.parents + [v.digest() for v in applied]
            model = ComposedModel(theta0, applied, task.head, provenance)
            score = self.evaluate(model, target, epsilon=epsilon)
            score.method, score.source, score.composed = label, source, model
            scores.append(score)
        return scores

    # --- SWEEP ---

    def sweep(self) -> List[Dict[str, object]]:
        """One row per (method, r_l, r_t, k_l, epsilon, target) cell."""
        exp = self.experiment
        grid = exp.sweep
        targets = [l.language_id for l in exp.languages if l.language_id != exp.source_language]
        rows: List[Dict[str, object]] = []
        for epsilon in grid.epsilons:
            theta0 = self.pretrain(epsilon)
            k_task = self.k_task(theta0)
            for k_fraction in grid.k_language_fractions:
                k_lang = self.k_language(theta0, k_fraction)
                baseline: Optional[List[TransferScore]] = None
                for method in grid.methods:
                    for r_l in grid.ranks_language:
                        for r_t in grid.ranks_task:
                            if method == Method.LT_SFT and baseline is not None:
                                scores = baseline  # ranks do not enter LT-SFT
                            else:
                                scores = self.transfer(
                                    theta0, targets, method,
                                    rank_language=RankPolicy.parse(r_l), rank_task=RankPolicy.parse(r_t),
                                    k_language=k_lang, epsilon=epsilon,
                                )
                                if method == Method.LT_SFT:
                                    baseline = scores
                            for score in scores:
                                rows.append(self.result_row(score, r_l, r_t, k_lang, k_task, epsilon))
        return rows

    def result_row(
        self,
        score: TransferScore,
        rank_language: Union[str, RankPolicy],
        rank_task: Union[str, RankPolicy],
        k_language: int,
        k_task: int,
        epsilon: float,
    ) -> Dict[str, object]:
        return {
            "method": score.method,
            "rank_language": str(rank_language),
            "rank_task": str(rank_task),
            "k_language": k_language,
            "k_task": k_task,
            "epsilon": epsilon,
            "seed": self.experiment.seed,
            "source": score.source,
            "target": score.target,
            "metric": score.metric,
            "score": score.score,
        }
