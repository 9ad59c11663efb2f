"""
DeFT-X

Two-phase sparse fine-tuning with an SVD-denoised winning-ticket mask:

    theta1 = full fine-tune of theta0
    delta  = theta1 - theta0
    delta' = per-matrix (rank-r part + top-n of the residual)
    mask   = global top-k of |delta'| over the eligible tensors
    phi    = sparse fine-tune of theta0 under the mask

LT-SFT is the same procedure with the denoising step switched off.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Collection, Dict, List, Optional, Tuple, Union

import numpy as np
from numpy.typing import ArrayLike

from .core.errors import BudgetError, ConfigError, DimensionalityError
from .core.models import (
    AblationVariant,
    DenoiseConfig,
    Method,
    Objective,
    RankPolicy,
    TrainConfig,
    VarianceMeasure,
    VectorKind,
    VectorMetadata,
)
from .core.provenance import digest_json, digest_model
from .loggers.train_logger import TrainLogger
from .model.params import DeltaSet, ParameterSet, head_names, init_head
from .numerics import Tensor, as_tensor, make_rng, round_half_up, svd, top_k_indices
from .optim import TrainingData, check_freeze, full_finetune, sparse_train, trainable_names
from .vectors import BinaryMask, SparseVector

logger = logging.getLogger(__name__)

Composable = Union[SparseVector, DeltaSet]

# Cumulative-variance comparisons tolerate this much relative rounding.
_VARIANCE_RTOL = 1e-12


@dataclass
class SftResult:
    """Output of one DeFT-X / LT-SFT / ablation run"""
    vector: Composable
    mask: Optional[BinaryMask]
    denoised: DeltaSet
    head: Optional[ParameterSet] = None
    # digests of the vectors this run started from
    parents: List[str] = field(default_factory=list)

    @property
    def phi(self) -> SparseVector:
        if not isinstance(self.vector, SparseVector):
            raise TypeError("this run produced a dense vector")
        return self.vector


# --- DELTA AND DENOISING ---

def compute_delta(theta1: ParameterSet, theta0: ParameterSet) -> DeltaSet:
    return theta1 - theta0


def select_rank(S: ArrayLike, policy: RankPolicy) -> int:
    """Rank kept for singular values S (non-increasing) under `policy`."""
    S = np.asarray(S, dtype=np.float64)
    if policy.kind == "uniform":
        return min(int(policy.rank), S.size)

    weights = S * S if policy.measure == VarianceMeasure.SQUARED else S
    total = float(weights.sum())
    if total <= 0.0:
        return 0
    cumulative = np.cumsum(weights)
    target = policy.fraction * total - _VARIANCE_RTOL * total
    r = int(np.searchsorted(cumulative, target, side="left")) + 1
    return min(r, S.size)


def _denoise(W: Tensor, rank: Union[int, RankPolicy], retain_fraction: float) -> Tuple[Tensor, int]:
    W = as_tensor(W)
    if W.ndim != 2:
        raise DimensionalityError(f"denoising expects a 2-D matrix, got shape {W.shape}")
    factors = svd(W)
    r = select_rank(factors.S, rank) if isinstance(rank, RankPolicy) else int(rank)
    if not 0 <= r <= factors.S.size:
        raise ConfigError(f"rank {r} outside [0, {factors.S.size}] for a {W.shape} matrix")

    low_rank = factors.reconstruct(r) if r > 0 else np.zeros_like(W)
    residual = W - low_rank
    keep = top_k_indices(residual, round_half_up(retain_fraction * W.size))
    sparse = np.zeros(W.size)
    sparse[keep] = residual.reshape(-1)[keep]
    return low_rank + sparse.reshape(W.shape), r


def denoise_matrix(W: ArrayLike, r: int, retain_fraction: float) -> Tensor:
    """
    L + S where L is the rank-r truncation of W and S keeps the
    round(retain_fraction * size) largest-magnitude entries of W - L.
    """
    return _denoise(W, r, retain_fraction)[0]


def denoise_delta(delta: DeltaSet, cfg: DenoiseConfig, workers: int = 1) -> DeltaSet:
    """
    Denoises every matrix whose class is in cfg.denoise_classes; all other
    tensors pass through unchanged. Matrices are independent, so running
    them on `workers` threads gives bit-identical output.
    """
    targets = [
        name for name in delta.names()
        if delta.class_of(name) in cfg.denoise_classes and delta[name].ndim == 2
    ]
    result = delta.copy()
    if not targets:
        return result

    def job(name: str) -> Tuple[Tensor, int]:
        return _denoise(delta[name], cfg.rank_policy, cfg.residual_retain_fraction)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="svd") as pool:
            outputs = list(pool.map(job, targets))
    else:
        outputs = [job(name) for name in targets]

    ranks: Dict[str, int] = {}
    for name, (tensor, r) in zip(targets, outputs):
        result[name] = tensor
        ranks[name] = r
    logger.debug("denoised %d matrices with %s, ranks %s", len(targets), cfg.rank_policy, ranks)
    return result


# --- MASKS ---

def global_topk_mask(delta: DeltaSet, k: int, eligible: Collection[str]) -> BinaryMask:
    """
    Exactly k coordinates with the largest |value| across the eligible
    tensors. Ties go to the earlier tensor, then the lower index.
    """
    wanted = set(eligible)
    names = [n for n in delta.names() if n in wanted]
    sizes = [delta[n].size for n in names]
    available = int(sum(sizes))
    if k < 0 or k > available:
        raise BudgetError(f"budget k={k} exceeds the {available} eligible scalars")

    flat = np.concatenate([delta[n].reshape(-1) for n in names]) if names else np.zeros(0)
    chosen = top_k_indices(flat, k)
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    indices = {}
    for name, start, stop in zip(names, offsets[:-1], offsets[1:]):
        lo, hi = np.searchsorted(chosen, [start, stop])
        if hi > lo:
            indices[name] = chosen[lo:hi] - start
    return BinaryMask(shapes=delta.shapes, indices=indices)


def budget_from_fraction(params: ParameterSet, fraction: float, eligible: Collection[str]) -> int:
    if not 0.0 <= fraction <= 1.0:
        raise BudgetError(f"budget fraction {fraction} outside [0, 1]")
    return round_half_up(fraction * params.num_scalars(eligible))


# --- TWO-PHASE PROCEDURE ---

def _with_fresh_head(theta0: ParameterSet, objective: Objective, seed: int, phase: str) -> ParameterSet:
    if Objective(objective) != Objective.CLASSIFY:
        return theta0
    return theta0.with_fragment(init_head(theta0.spec, make_rng(seed, "head", phase)))


def _restrict(delta: DeltaSet, names: Collection[str]) -> DeltaSet:
    keep = set(names)
    return delta.map(lambda n, t: t if n in keep else np.zeros_like(t))


def vector_metadata(
    objective: Objective,
    method: str,
    theta0: ParameterSet,
    cfg: TrainConfig,
    denoise_cfg: DenoiseConfig,
    k: int,
    label: str = "",
) -> VectorMetadata:
    kind = VectorKind.TASK if Objective(objective) == Objective.CLASSIFY else VectorKind.LANGUAGE
    config = {
        "train": cfg.model_dump(mode="json"),
        "denoise": denoise_cfg.model_dump(mode="json"),
        "k": k,
        "method": method,
    }
    return VectorMetadata(
        kind=kind,
        method=method,
        label=label,
        k=k,
        config_digest=digest_json(config),
        spec_digest=digest_model(theta0.spec) if theta0.spec is not None else "",
        rank_policy=str(denoise_cfg.rank_policy) if denoise_cfg.enabled else None,
    )


def _phase_one(
    data: TrainingData,
    objective: Objective,
    theta0: ParameterSet,
    cfg: TrainConfig,
    k: int,
    denoise_cfg: DenoiseConfig,
    freeze: Collection[str],
    workers: int,
    train_logger: Optional[TrainLogger],
) -> Tuple[ParameterSet, DeltaSet, BinaryMask, List[str]]:
    frozen = check_freeze(theta0, freeze)
    eligible = trainable_names(theta0, objective, frozen)
    start = _with_fresh_head(theta0, objective, cfg.seed, "full")
    theta1 = full_finetune(
        start, data, objective, cfg, frozen, train_logger.child("full") if train_logger else None
    )
    delta = _restrict(compute_delta(theta1, start), eligible)
    denoised = denoise_delta(delta, denoise_cfg, workers) if denoise_cfg.enabled else delta
    mask = global_topk_mask(denoised, k, eligible)
    return theta1, denoised, mask, eligible


def deftx(
    data: TrainingData,
    objective: Objective,
    theta0: ParameterSet,
    cfg: TrainConfig,
    k: int,
    denoise_cfg: DenoiseConfig,
    freeze: Collection[str] = (),
    workers: int = 1,
    train_logger: Optional[TrainLogger] = None,
    label: str = "",
    method: str = Method.DEFTX.value,
) -> SftResult:
    """
    Full fine-tune, denoise the delta, pick the top-k mask, then sparse
    fine-tune from theta0. For classification a fresh head is drawn at the
    start of each phase; it trains densely and is returned separately.
    """
    _, denoised, mask, _ = _phase_one(data, objective, theta0, cfg, k, denoise_cfg, freeze, workers, train_logger)

    start = _with_fresh_head(theta0, objective, cfg.seed, "sparse")
    heads = head_names(start) if Objective(objective) == Objective.CLASSIFY else []
    metadata = vector_metadata(objective, method, theta0, cfg, denoise_cfg, k, label)
    phi, result = sparse_train(
        start, mask, data, objective, cfg, freeze, dense=heads,
        train_logger=train_logger.child("sparse") if train_logger else None,
        metadata=metadata,
    )
    head = result.params.fragment(heads) if heads else None
    logger.info("%s vector %s: k=%d over %d tensors", method, label or "-", phi.k, sum(1 for _ in phi.nonempty()))
    return SftResult(vector=phi, mask=mask, denoised=denoised, head=head)


def lt_sft(
    data: TrainingData,
    objective: Objective,
    theta0: ParameterSet,
    cfg: TrainConfig,
    k: int,
    freeze: Collection[str] = (),
    train_logger: Optional[TrainLogger] = None,
    label: str = "",
) -> SftResult:
    """DeFT-X without denoising: the mask comes from the raw |delta|."""
    return deftx(
        data, objective, theta0, cfg, k, DenoiseConfig.disabled(), freeze,
        train_logger=train_logger, label=label, method=Method.LT_SFT.value,
    )


def ablation(
    variant: AblationVariant,
    data: TrainingData,
    objective: Objective,
    theta0: ParameterSet,
    cfg: TrainConfig,
    k: int,
    denoise_cfg: DenoiseConfig,
    freeze: Collection[str] = (),
    workers: int = 1,
    train_logger: Optional[TrainLogger] = None,
    label: str = "",
) -> SftResult:
    """
    none            - the full procedure
    no_higher_order - residual retention 0, then the full procedure
    no_prune_no_sft - the dense denoised delta itself
    no_sft          - the denoised delta on the mask, no second phase
    """
    variant = AblationVariant(variant)
    method = f"{Method.DEFTX.value}:{variant.value}"
    if variant == AblationVariant.NONE:
        return deftx(data, objective, theta0, cfg, k, denoise_cfg, freeze, workers, train_logger, label)
    if variant == AblationVariant.NO_HIGHER_ORDER:
        stripped = denoise_cfg.model_copy(update={"residual_retain_fraction": 0.0})
        return deftx(data, objective, theta0, cfg, k, stripped, freeze, workers, train_logger, label, method)

    theta1, denoised, mask, _ = _phase_one(
        data, objective, theta0, cfg, k, denoise_cfg, freeze, workers, train_logger
    )
    head = theta1.fragment(head_names(theta1)) if Objective(objective) == Objective.CLASSIFY else None
    if variant == AblationVariant.NO_PRUNE_NO_SFT:
        return SftResult(vector=denoised, mask=None, denoised=denoised, head=head)

    metadata = vector_metadata(objective, method, theta0, cfg, denoise_cfg, k, label)
    phi = SparseVector.from_dense(denoised, mask, metadata)
    return SftResult(vector=phi, mask=mask, denoised=denoised, head=head)
