"""
deftx command line

    deftx pretrain    -o theta0.dftx
    deftx train-lang  --base theta0.dftx --lang bb -o lang_bb.dfts
    deftx train-task  --base theta0.dftx --source-lang-vector lang_aa.dfts -o task.dfts
    deftx compose     --base theta0.dftx task.dfts lang_bb.dfts --head task.head.dftx -o model.dftx
    deftx eval        --base model.dftx --lang bb
    deftx overlap     lang_aa.dfts lang_bb.dfts task.dfts -o overlap/
    deftx ablate      --variant no_sft
    deftx sweep       -o sweep.csv
    deftx train-lang  --base theta0.dftx --lang bb -o lang_bb.dfts --monitor

--monitor runs a training command in the background and follows it in the
monitor app.

Flags override the experiment file given with --config. Every run writes a
manifest next to its primary output and is recorded in the run registry.
"""

import argparse
import json
import logging
import sys
import threading
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from queue import Queue
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import pandas as pd

from .analysis import (
    OVERLAP_DENOMINATOR,
    group_overlap_frame,
    read_table,
    score_summary,
    sparsity_report,
    write_overlap_tables,
    write_results_table,
    write_table,
)
from .config import DeftConfig, ExperimentConfig, set_config
from .core.errors import DeftError, FormatError, MissingInputError, UsageError
from .core.models import AblationVariant, Method, RankPolicy, RunManifest, VectorKind
from .core.provenance import create_run_id, digest_file
from .deft import Composable
from .loggers import init_record_queue, setup_logging
from .model.params import ParameterSet
from .persistence import (
    RunRegistry,
    environment_info,
    experiment_to_ini,
    load_any,
    load_checkpoint,
    load_corpus,
    load_experiment,
    load_vector,
    manifest_path_for,
    save_checkpoint,
    save_corpus,
    save_mask,
    save_vector,
    write_manifest,
)
from .runner import ExperimentRunner, TransferScore, derive_seed
from .transfer import ComposedModel
from .vectors import SparseVector

logger = logging.getLogger("deftx.cli")

PathLike = Union[str, Path]


# --- RUN CONTEXT ---

class RunContext:
    """Collects input and output digests of one CLI run and writes its manifest."""

    def __init__(self, command: str, args: argparse.Namespace, experiment: ExperimentConfig, config: DeftConfig):
        self.command = command
        self.args = args
        self.experiment = experiment
        self.config = config
        self.run_id = create_run_id()
        self.inputs: Dict[str, str] = {}
        self.outputs: Dict[str, str] = {}
        self.seeds: Dict[str, int] = {"experiment": experiment.seed}
        self.registry = RunRegistry(config) if config.enable_registry else None
        self.runner = ExperimentRunner(experiment, config, Path(config.output_dir) / "logs" / self.run_id)

    def input(self, path: PathLike) -> Path:
        path = Path(path)
        if not path.is_file():
            raise MissingInputError(f"no such input file: {path}")
        self.inputs[str(path)] = digest_file(path)
        return path

    def output(self, name: str, path: PathLike) -> Path:
        """Re-reads a written output; a file that does not load is a format error."""
        path = Path(path)
        if path.suffix == ".csv":
            read_table(path)
        elif path.suffix == ".json":
            try:
                json.loads(path.read_text(encoding="utf-8"))
            except ValueError as exc:
                raise FormatError(f"invalid JSON output: {exc}", path=str(path)) from exc
        elif path.suffix != ".jsonl":
            load_any(path)
        self.outputs[name] = str(path)
        self.outputs[f"{name}:sha256"] = digest_file(path)
        return path

    def collect_train_logs(self) -> None:
        run_dir = self.runner.run_dir
        self.runner.close()
        if run_dir is not None and run_dir.is_dir():
            for path in sorted(run_dir.glob("*.jsonl")):
                self.output(f"train_log:{path.stem}", path)

    def manifest(self) -> RunManifest:
        return RunManifest(
            run_id=self.run_id,
            command=self.command,
            config={
                "experiment": self.experiment.summary(),
                "experiment_ini": experiment_to_ini(self.experiment),
                "workers": self.config.workers,
                "argv": [str(a) for a in getattr(self.args, "argv", [])],
            },
            seeds=self.seeds,
            inputs=self.inputs,
            outputs=self.outputs,
            environment=environment_info(),
        )

    def finish(self, primary: PathLike) -> Path:
        self.collect_train_logs()
        manifest = self.manifest()
        path = write_manifest(manifest, manifest_path_for(primary))
        if self.registry is not None:
            self.registry.finish_run(manifest)
        logger.info("manifest written to %s", path)
        return path


# --- HELPERS ---

def _experiment(args: argparse.Namespace) -> ExperimentConfig:
    """Experiment file, then flag overrides."""
    exp = load_experiment(args.config)
    update: Dict[str, Any] = {}
    if args.seed is not None:
        update["seed"] = args.seed
    if getattr(args, "method", None):
        update["method"] = Method(args.method)
    if args.rank_l:
        update["rank_language"] = RankPolicy.parse(args.rank_l)
    if args.rank_t:
        update["rank_task"] = RankPolicy.parse(args.rank_t)
    for count, fraction in (("k_lang", "k_lang_fraction"), ("k_task", "k_task_fraction")):
        if getattr(args, count) is not None and getattr(args, fraction) is not None:
            raise UsageError(f"--{count.replace('_', '-')} and --{fraction.replace('_', '-')} are exclusive")
    if args.k_lang is not None:
        update["k_language"] = args.k_lang
    if args.k_task is not None:
        update["k_task"] = args.k_task
    if args.k_lang_fraction is not None:
        update.update(k_language=None, k_language_fraction=args.k_lang_fraction)
    if args.k_task_fraction is not None:
        update.update(k_task=None, k_task_fraction=args.k_task_fraction)
    if not update:
        return exp
    return ExperimentConfig.model_validate({**exp.model_dump(), **update})


def _default_output(config: DeftConfig, name: str) -> Path:
    return Path(config.output_dir) / name


def _load_composable(ctx: RunContext, path: PathLike) -> Composable:
    """Sparse vector file, or a checkpoint holding a dense delta."""
    item = load_any(ctx.input(path))
    if not isinstance(item, (SparseVector, ParameterSet)):
        raise UsageError(f"{path} is neither a vector nor a checkpoint")
    return item


def _load_head(ctx: RunContext, path: Optional[PathLike]) -> Optional[ParameterSet]:
    return load_checkpoint(ctx.input(path)) if path else None


def _base(ctx: RunContext, path: Optional[PathLike]) -> ParameterSet:
    if path:
        return load_checkpoint(ctx.input(path))
    logger.info("no --base given, pretraining the base model first")
    return ctx.runner.pretrain()


def _console_score(ctx: RunContext, score: TransferScore) -> None:
    ctx.runner.console.print(
        f"[bold]{score.metric}[/] on {score.target}: [cyan]{score.score:.4f}[/] "
        f"(majority baseline {score.majority:.4f})"
    )


def _eval_row(ctx: RunContext, vectors: Sequence[Composable], score: TransferScore) -> Dict[str, object]:
    meta = {v.metadata.kind: v.metadata for v in vectors if isinstance(v, SparseVector)}
    lang, task = meta.get(VectorKind.LANGUAGE), meta.get(VectorKind.TASK)
    primary = task or lang
    score.method = primary.method if primary is not None else "base"
    score.source = ctx.experiment.source_language
    return ctx.runner.result_row(
        score,
        (lang.rank_policy if lang else None) or "-",
        (task.rank_policy if task else None) or "-",
        lang.k if lang else 0,
        task.k if task else 0,
        ctx.experiment.language(score.target).epsilon,
    )


def _parse_groups(items: Optional[List[str]], option: str) -> Dict[str, List[str]]:
    groups: Dict[str, List[str]] = {}
    for item in items or []:
        name, sep, paths = item.partition("=")
        if not sep or not name or not paths:
            raise UsageError(f"{option} expects NAME=path[,path...], got {item!r}")
        groups.setdefault(name, []).extend(p.strip() for p in paths.split(",") if p.strip())
    return groups


# --- COMMANDS ---

def cmd_pretrain(ctx: RunContext, args: argparse.Namespace) -> Path:
    ctx.seeds["pretrain"] = ctx.runner.phase_config(ctx.experiment.pretrain, "pretrain").seed
    theta0 = ctx.runner.pretrain()
    out = save_checkpoint(theta0, args.output or _default_output(ctx.config, "theta0.dftx"))
    ctx.output("checkpoint", out)
    return out


def cmd_gen_corpus(ctx: RunContext, args: argparse.Namespace) -> Path:
    exp = ctx.experiment
    if args.sentences is not None:
        ctx.runner.experiment = exp = exp.model_copy(update={"language_sentences": args.sentences})
    ctx.seeds["corpus"] = derive_seed(exp.seed, "language", args.lang)
    corpus = ctx.runner.language_corpus(args.lang)
    out = save_corpus(corpus, args.output or _default_output(ctx.config, f"corpus_{args.lang}.dftc"))
    ctx.output("corpus", out)
    return out


def cmd_train_lang(ctx: RunContext, args: argparse.Namespace) -> Path:
    theta0 = load_checkpoint(ctx.input(args.base))
    data = ctx.runner.corpus_data(load_corpus(ctx.input(args.corpus))) if args.corpus else None
    ctx.seeds["language"] = ctx.runner.phase_config(ctx.experiment.language_train, "language", args.lang).seed
    result = ctx.runner.train_language(theta0, args.lang, data=data)
    out = save_vector(result.phi, args.output or _default_output(ctx.config, f"lang_{args.lang}.dfts"))
    ctx.output("vector", out)
    if args.mask_output:
        ctx.output("mask", save_mask(result.mask, args.mask_output))
    return out


def cmd_train_task(ctx: RunContext, args: argparse.Namespace) -> Path:
    theta0 = load_checkpoint(ctx.input(args.base))
    lang = args.lang or ctx.experiment.source_language
    phi_src = load_vector(ctx.input(args.source_lang_vector)) if args.source_lang_vector else None
    ctx.seeds["task"] = ctx.runner.phase_config(ctx.experiment.task_train, "task", lang).seed
    result = ctx.runner.train_task(theta0, lang, phi_src)
    out = Path(args.output or _default_output(ctx.config, f"task_{lang}.dfts"))
    ctx.output("vector", save_vector(result.phi, out))
    head = Path(args.head_output) if args.head_output else out.with_suffix(".head.dftx")
    ctx.output("head", save_checkpoint(result.head, head))
    return out


def cmd_compose(ctx: RunContext, args: argparse.Namespace) -> Path:
    theta0 = load_checkpoint(ctx.input(args.base))
    vectors = [_load_composable(ctx, p) for p in args.vectors]
    model = ComposedModel(theta0, vectors, _load_head(ctx, args.head), [v.digest() for v in vectors])
    out = save_checkpoint(model.materialize(), args.output or _default_output(ctx.config, "composed.dftx"))
    ctx.output("checkpoint", out)
    return out


def cmd_eval(ctx: RunContext, args: argparse.Namespace) -> Path:
    theta0 = load_checkpoint(ctx.input(args.base))
    vectors = [_load_composable(ctx, p) for p in args.vectors]
    model = ComposedModel(theta0, vectors, _load_head(ctx, args.head))
    ctx.seeds["test"] = derive_seed(ctx.experiment.seed, "task-test", args.lang)
    score = ctx.runner.evaluate(model, args.lang, args.metric)
    _console_score(ctx, score)
    out = write_results_table(
        [_eval_row(ctx, vectors, score)],
        args.output or _default_output(ctx.config, f"eval_{args.lang}.csv"),
        header=[f"majority baseline: {score.majority:.6f}"],
    )
    ctx.output("results", out)
    return out


def cmd_overlap(ctx: RunContext, args: argparse.Namespace) -> Path:
    out_dir = Path(args.output or _default_output(ctx.config, "overlap"))
    vectors = [load_vector(ctx.input(p)) for p in args.vectors]
    groups = _parse_groups(args.group, "--group")
    references = _parse_groups(args.reference, "--reference")
    if len(vectors) < 2 and not groups:
        raise UsageError("overlap needs at least two vectors or a --group")
    if set(references) != set(groups):
        raise UsageError("every --group needs a --reference with the same name")

    if vectors:
        labels = args.labels or [v.metadata.label or Path(p).stem for v, p in zip(vectors, args.vectors)]
        if len(labels) != len(vectors):
            raise UsageError("--labels needs one label per vector")
        if len(vectors) >= 2:
            for name, path in write_overlap_tables(vectors, labels, out_dir).items():
                ctx.output(f"overlap_{name}", path)
        frames = [sparsity_report(v).to_frame().assign(vector=label) for v, label in zip(vectors, labels)]
        ctx.output("sparsity", write_table(pd.concat(frames, ignore_index=True), out_dir / "sparsity.csv"))

    if groups:
        loaded = {name: [load_vector(ctx.input(p)) for p in paths] for name, paths in groups.items()}
        refs: Dict[str, List[SparseVector]] = {}
        for name, paths in references.items():
            ref = [load_vector(ctx.input(p)) for p in paths]
            refs[name] = ref * len(loaded[name]) if len(ref) == 1 else ref
            if len(refs[name]) != len(loaded[name]):
                raise UsageError(f"--reference {name} needs one vector, or one per group member")
        first = next(iter(loaded.values()))
        labels = [v.metadata.label or str(i) for i, v in enumerate(first)]
        frame = group_overlap_frame(loaded, refs, labels)
        header = [f"overlap denominator: {OVERLAP_DENOMINATOR}"]
        ctx.output("group_overlap", write_table(frame, out_dir / "group_overlap.csv", header))
    return out_dir


def cmd_ablate(ctx: RunContext, args: argparse.Namespace) -> Path:
    exp = ctx.experiment
    variant = AblationVariant(args.variant)
    out_dir = Path(args.output or _default_output(ctx.config, f"ablate_{variant.value}"))
    theta0 = _base(ctx, args.base)
    targets = args.targets or [l.language_id for l in exp.languages if l.language_id != exp.source_language]
    scores = ctx.runner.transfer(theta0, targets, Method.DEFTX, variant)

    k_language, k_task = ctx.runner.k_language(theta0), ctx.runner.k_task(theta0)
    rows = []
    for score in scores:
        _console_score(ctx, score)
        path = save_checkpoint(score.composed.materialize(), out_dir / f"composed_{score.target}.dftx")
        ctx.output(f"composed_{score.target}", path)
        rows.append(ctx.runner.result_row(
            score, exp.rank_language, exp.rank_task, k_language, k_task, exp.language(score.target).epsilon
        ))
    table = ctx.output("results", write_results_table(rows, out_dir / "results.csv"))
    if ctx.registry is not None:
        ctx.registry.save_results(ctx.run_id, rows)
    return table


def cmd_sweep(ctx: RunContext, args: argparse.Namespace) -> Path:
    rows = ctx.runner.sweep()
    out = write_results_table(
        rows,
        args.output or _default_output(ctx.config, "sweep.csv"),
        header=[f"seed: {ctx.experiment.seed}", f"source: {ctx.experiment.source_language}"],
    )
    ctx.output("results", out)
    if ctx.registry is not None:
        ctx.registry.save_results(ctx.run_id, rows)
    ctx.runner.console.print(score_summary(read_table(out)).to_string(index=False))
    return out


def cmd_monitor(args: argparse.Namespace, config: DeftConfig) -> int:
    from .monitor import MonitorApp

    MonitorApp(registry=RunRegistry(config), log_paths=[Path(p) for p in args.log or []]).run()
    return 0


COMMANDS: Dict[str, Callable[[RunContext, argparse.Namespace], Path]] = {
    "pretrain": cmd_pretrain,
    "gen-corpus": cmd_gen_corpus,
    "train-lang": cmd_train_lang,
    "train-task": cmd_train_task,
    "compose": cmd_compose,
    "eval": cmd_eval,
    "overlap": cmd_overlap,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


# --- PARSER ---

def _package_version() -> str:
    try:
        return version("deftx")
    except PackageNotFoundError:
        return "0+unknown"


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("process")
    g.add_argument("--config", help="experiment file ([model], [train.language], [denoise], ... sections)")
    g.add_argument("--log-level", choices=["debug", "info", "warning", "error", "critical"])
    g.add_argument("--log-file-path", help="also log to this file (DEBUG level)")
    g.add_argument("--output-dir", help="directory for default output paths and training logs")
    g.add_argument("--workers", type=int, help="parallel SVD and language jobs; results do not depend on it")
    g.add_argument("--db-path", help="SQLite run registry")
    g.add_argument("--no-registry", action="store_true", help="do not record the run in the registry")
    g.add_argument("-q", "--quiet", action="store_true", help="no banner")

    e = common.add_argument_group("experiment overrides")
    e.add_argument("--seed", type=int, help="experiment seed; data and training seeds derive from it")
    e.add_argument("--rank-l", help="language rank policy: an integer (uniform) or var:F[:linear]")
    e.add_argument("--rank-t", help="task rank policy: an integer (uniform) or var:F[:linear]")
    e.add_argument("--k-lang", type=int, help="language vector budget (absolute)")
    e.add_argument("--k-task", type=int, help="task vector budget (absolute)")
    e.add_argument("--k-lang-fraction", type=float, help="language budget as a fraction of eligible scalars")
    e.add_argument("--k-task-fraction", type=float, help="task budget as a fraction of eligible scalars")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="deftx",
        description="SVD-denoised composable sparse fine-tuning for zero-shot cross-lingual transfer",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {_package_version()}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, parents=[common], help=help_text, description=help_text)

    def watchable(p: argparse.ArgumentParser) -> None:
        p.add_argument("--monitor", action="store_true", help="follow training live in the monitor app")

    p = add("pretrain", "train the base model on the mixed-language synthetic corpus")
    p.add_argument("-o", "--output", help="checkpoint path (default OUTPUT_DIR/theta0.dftx)")
    watchable(p)

    p = add("gen-corpus", "write a synthetic corpus file for one language")
    p.add_argument("--lang", required=True)
    p.add_argument("--sentences", type=int, help="number of sentences (default from the experiment)")
    p.add_argument("-o", "--output")

    p = add("train-lang", "train a language vector (MLM, layer norms frozen)")
    p.add_argument("--base", required=True, help="base checkpoint")
    p.add_argument("--lang", required=True)
    p.add_argument("--corpus", help="corpus file instead of the generated one")
    p.add_argument("--method", choices=[m.value for m in Method])
    p.add_argument("--mask-output", help="also write the selected mask")
    p.add_argument("-o", "--output")
    watchable(p)

    p = add("train-task", "train a task vector and its classification head")
    p.add_argument("--base", required=True, help="base checkpoint")
    p.add_argument("--lang", help="task language (default: the source language)")
    p.add_argument("--source-lang-vector", help="vector applied to the base before task training")
    p.add_argument("--method", choices=[m.value for m in Method])
    p.add_argument("--head-output", help="head checkpoint (default OUTPUT.head.dftx)")
    p.add_argument("-o", "--output")
    watchable(p)

    p = add("compose", "add vectors (and a head) to a base checkpoint")
    p.add_argument("--base", required=True)
    p.add_argument("vectors", nargs="*", help="vector files, or checkpoints holding dense deltas")
    p.add_argument("--head", help="classification head checkpoint")
    p.add_argument("-o", "--output")

    p = add("eval", "zero-shot score on a language's synthetic test set")
    p.add_argument("--base", required=True)
    p.add_argument("vectors", nargs="*")
    p.add_argument("--head")
    p.add_argument("--lang", required=True, help="target language")
    p.add_argument("--metric", choices=["accuracy", "macro_f1"])
    p.add_argument("-o", "--output", help="one-row results table")

    p = add("overlap", "support overlap between vectors")
    p.add_argument("vectors", nargs="*")
    p.add_argument("--labels", nargs="+")
    p.add_argument("--group", action="append", metavar="NAME=PATHS", help="e.g. lt-sft=aa.dfts,bb.dfts")
    p.add_argument("--reference", action="append", metavar="NAME=PATHS", help="vectors each group member is compared with")
    p.add_argument("-o", "--output", help="output directory")

    p = add("ablate", "run a component ablation end to end")
    p.add_argument("--variant", required=True, choices=[v.value for v in AblationVariant])
    p.add_argument("--base", help="base checkpoint (default: pretrain first)")
    p.add_argument("--targets", nargs="+", help="target languages (default: all but the source)")
    p.add_argument("-o", "--output", help="output directory")
    watchable(p)

    p = add("sweep", "grid over method, ranks, budget and epsilon from the [sweep] section")
    p.add_argument("-o", "--output", help="results table (default OUTPUT_DIR/sweep.csv)")
    watchable(p)

    p = sub.add_parser("monitor", parents=[common], help="browse registered runs and training logs")
    p.add_argument("--log", nargs="+", help="training log files to follow")
    return parser


# --- ENTRY POINT ---

def run_command(args: argparse.Namespace, config: DeftConfig) -> int:
    """Runs one pipeline command and maps its outcome to an exit code."""
    ctx: Optional[RunContext] = None
    try:
        ctx = RunContext(args.command, args, _experiment(args), config)
        if ctx.registry is not None:
            ctx.registry.start_run(ctx.run_id, args.command)
        ctx.runner.print_banner(args.command, ctx.run_id)
        primary = COMMANDS[args.command](ctx, args)
        ctx.finish(primary)
        return 0
    except DeftError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        if ctx is not None and ctx.registry is not None:
            ctx.registry.fail_run(ctx.run_id, str(exc))
        return exc.exit_code
    except Exception as exc:
        logger.exception("unexpected error in %s", args.command)
        if ctx is not None and ctx.registry is not None:
            ctx.registry.fail_run(ctx.run_id, repr(exc))
        return 1
    finally:
        if ctx is not None:
            ctx.runner.close()


def run_monitored(args: argparse.Namespace, config: DeftConfig) -> int:
    """
    Runs the command in a worker thread while the monitor app shows its
    training records live. Quitting the app does not cancel the run.
    """
    from .monitor import MonitorApp

    queue: Queue = Queue()
    outcome: Dict[str, int] = {}

    def work() -> None:
        init_record_queue(queue)
        try:
            outcome["code"] = run_command(args, config)
        finally:
            init_record_queue(None)
            queue.put({"type": "finished", "data": {"code": outcome.get("code", 1)}})

    worker = threading.Thread(target=work, name=f"deftx-{args.command}", daemon=True)
    worker.start()
    MonitorApp(registry=RunRegistry(config), record_queue=queue).run()
    if worker.is_alive():
        logger.info("monitor closed, waiting for %s to finish", args.command)
    worker.join()
    return outcome.get("code", 1)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv

    # CLI > env > defaults
    config = DeftConfig.from_env()
    config.override_from_cli(args)
    set_config(config)
    setup_logging(config)

    if args.command == "monitor":
        return cmd_monitor(args, config)
    if getattr(args, "monitor", False):
        return run_monitored(args, config)
    return run_command(args, config)


if __name__ == "__main__":
    sys.exit(main())
