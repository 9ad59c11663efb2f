import numpy as np
import pytest

from deftx.analysis import jaccard
from deftx.core.errors import BudgetError, ConfigError
from deftx.core.models import (
    AblationVariant,
    DenoiseConfig,
    Method,
    Objective,
    RankPolicy,
    TensorClass,
    TrainConfig,
    VarianceMeasure,
)
from deftx.deft import (
    ablation,
    budget_from_fraction,
    compute_delta,
    deftx,
    denoise_delta,
    denoise_matrix,
    global_topk_mask,
    lt_sft,
    select_rank,
)
from deftx.model import ParameterSet
from deftx.numerics import relative_error, top_k_indices
from deftx.optim import trainable_names
from deftx.transfer import compose
from deftx.vectors import SparseVector

from conftest import random_delta


# --- RANK POLICY ---

def test_select_rank_variance():
    assert select_rank([3.0, 1.0], RankPolicy.variance(0.9)) == 1
    assert select_rank([1.0, 1.0, 1.0, 1.0], RankPolicy.variance(0.9)) == 4
    assert select_rank([1.0, 1.0, 1.0, 1.0], RankPolicy.variance(0.5)) == 2
    assert select_rank([5.0, 0.0, 0.0], RankPolicy.variance(1.0)) == 1


def test_select_rank_linear_measure():
    assert select_rank([2.0, 1.0, 1.0], RankPolicy.variance(0.6, VarianceMeasure.LINEAR)) == 2
    assert select_rank([2.0, 1.0, 1.0], RankPolicy.variance(0.6, VarianceMeasure.SQUARED)) == 1


def test_select_rank_uniform_clamps():
    assert select_rank([3.0, 2.0, 1.0], RankPolicy.uniform(2)) == 2
    assert select_rank([3.0, 2.0, 1.0], RankPolicy.uniform(100)) == 3


def test_select_rank_zero_spectrum():
    assert select_rank([0.0, 0.0], RankPolicy.variance(0.9)) == 0


def test_rank_policy_parse():
    assert RankPolicy.parse("100") == RankPolicy.uniform(100)
    assert RankPolicy.parse("var:0.9") == RankPolicy.variance(0.9)
    assert RankPolicy.parse("var:0.8:linear") == RankPolicy.variance(0.8, VarianceMeasure.LINEAR)
    assert str(RankPolicy.parse("var:0.8:linear")) == "var:0.8:linear"
    assert str(RankPolicy.uniform(16)) == "16"
    with pytest.raises(ConfigError):
        RankPolicy.parse("lots")
    with pytest.raises(ConfigError):
        RankPolicy.parse("0")


# --- DENOISING ---

def test_denoise_full_rank_is_identity():
    W = np.random.default_rng(0).standard_normal((9, 6))
    assert relative_error(denoise_matrix(W, 6, 0.0), W) <= 1e-10


def test_denoise_full_retention_is_identity():
    W = np.random.default_rng(1).standard_normal((7, 11))
    assert relative_error(denoise_matrix(W, 2, 1.0), W) <= 1e-10


def test_denoise_rank_zero_keeps_largest_entries():
    W = np.random.default_rng(2).standard_normal((5, 4))
    out = denoise_matrix(W, 0, 0.25)
    keep = top_k_indices(W, 5)
    assert np.count_nonzero(out) == 5
    assert np.array_equal(out.reshape(-1)[keep], W.reshape(-1)[keep])


def test_denoise_sign_flip_equivariance():
    for seed in range(5):
        W = np.random.default_rng(seed).standard_normal((8, 5))
        a = denoise_matrix(W, 2, 0.1)
        b = denoise_matrix(-W, 2, 0.1)
        assert np.array_equal(b, -a)


def test_denoise_rank_outside_range():
    with pytest.raises(ConfigError):
        denoise_matrix(np.ones((3, 3)), 4, 0.0)


def _planted(seed: int):
    rng = np.random.default_rng(seed)
    n = 32
    U, _ = np.linalg.qr(rng.standard_normal((n, 2)))
    V, _ = np.linalg.qr(rng.standard_normal((n, 2)))
    low_rank = (U * np.array([20.0, 12.0])) @ V.T
    spikes = np.zeros(n * n)
    where = rng.choice(n * n, size=round(0.05 * n * n), replace=False)
    spikes[where] = 3.0 * rng.choice([-1.0, 1.0], size=where.size)
    signal = low_rank + spikes.reshape(n, n)
    noisy = signal + 0.5 * rng.standard_normal((n, n))
    return signal, noisy


def _recall(chosen: np.ndarray, planted: np.ndarray) -> float:
    return np.intersect1d(chosen, planted).size / planted.size


def test_denoising_recovers_planted_coordinates():
    wins = 0
    for seed in range(20):
        signal, noisy = _planted(seed)
        k = round(0.1 * signal.size)
        planted = top_k_indices(signal, k)
        denoised = _recall(top_k_indices(denoise_matrix(noisy, 2, 0.05), k), planted)
        plain = _recall(top_k_indices(noisy, k), planted)
        wins += denoised >= plain
    assert wins >= 16


def test_denoise_delta_only_touches_denoise_classes(theta0):
    delta = random_delta(theta0, np.random.default_rng(0))
    out = denoise_delta(delta, DenoiseConfig(rank_policy=RankPolicy.uniform(2)))
    for name in delta.names():
        changed = not np.array_equal(out[name], delta[name])
        assert changed == (delta.class_of(name) in (TensorClass.WEIGHT, TensorClass.EMBEDDING)), name


def test_denoise_delta_disabled_is_copy(theta0):
    delta = random_delta(theta0, np.random.default_rng(0))
    out = denoise_delta(delta, DenoiseConfig.disabled())
    assert out.bitwise_equal(delta)
    assert out is not delta


def test_denoise_delta_worker_count_invariant(theta0):
    delta = random_delta(theta0, np.random.default_rng(4))
    cfg = DenoiseConfig()
    assert denoise_delta(delta, cfg, workers=1).bitwise_equal(denoise_delta(delta, cfg, workers=4))


def test_bias_is_never_denoised():
    with pytest.raises(ValueError):
        DenoiseConfig(denoise_classes=frozenset({TensorClass.BIAS}))


# --- MASKS ---

def _oracle(delta: ParameterSet, k: int, eligible):
    entries = [
        (-abs(float(v)), position, name, i)
        for position, name in enumerate(n for n in delta.names() if n in eligible)
        for i, v in enumerate(delta[name].reshape(-1))
    ]
    entries.sort()
    return {(name, i) for _, _, name, i in entries[:k]}


def test_global_topk_matches_full_sort(theta0):
    eligible = set(trainable_names(theta0, Objective.MLM))
    for seed in range(20):
        delta = random_delta(theta0, np.random.default_rng(seed))
        k = 10 + 7 * seed
        mask = global_topk_mask(delta, k, eligible)
        assert mask.k == k
        assert mask.coordinates() == _oracle(delta, k, eligible)


def test_global_topk_nesting(theta0):
    eligible = trainable_names(theta0, Objective.MLM)
    delta = random_delta(theta0, np.random.default_rng(3))
    for k in (5, 40, 200):
        assert global_topk_mask(delta, k, eligible).issubset(global_topk_mask(delta, 2 * k, eligible))


def test_global_topk_ties_prefer_earlier_tensor():
    delta = ParameterSet(
        {"a": np.ones(3), "b": np.ones(3)}, {"a": TensorClass.BIAS, "b": TensorClass.BIAS}
    )
    mask = global_topk_mask(delta, 4, ["a", "b"])
    assert mask.support("a").tolist() == [0, 1, 2]
    assert mask.support("b").tolist() == [0]


def test_global_topk_respects_eligibility_and_budget(theta0):
    delta = random_delta(theta0, np.random.default_rng(0))
    mask = global_topk_mask(delta, 50, ["embed.token"])
    assert {name for name, _ in mask.nonempty()} == {"embed.token"}
    with pytest.raises(BudgetError):
        global_topk_mask(delta, theta0["embed.token"].size + 1, ["embed.token"])


def test_budget_from_fraction(theta0):
    eligible = ["embed.token"]
    assert budget_from_fraction(theta0, 0.5, eligible) == theta0["embed.token"].size // 2
    with pytest.raises(BudgetError):
        budget_from_fraction(theta0, 1.5, eligible)


# --- TWO-PHASE PROCEDURE ---

def test_deftx_language_vector(theta0, mlm_data, short_mlm):
    frozen = theta0.names_of(TensorClass.LAYER_NORM)
    result = deftx(mlm_data, Objective.MLM, theta0, short_mlm, 60, DenoiseConfig(), freeze=frozen, label="aa")
    phi = result.phi
    assert phi.k == 60 and result.mask.k == 60
    assert phi.support() == result.mask
    assert phi.metadata.method == Method.DEFTX.value
    assert phi.metadata.label == "aa"
    assert phi.metadata.rank_policy == "var:0.9"
    touched = {name for name, _, _ in phi.nonempty()}
    assert not touched & set(frozen)
    assert all(not name.startswith("cls.") for name in touched)
    assert result.head is None


def test_deftx_is_deterministic(theta0, mlm_data, short_mlm):
    a = deftx(mlm_data, Objective.MLM, theta0, short_mlm, 40, DenoiseConfig())
    b = deftx(mlm_data, Objective.MLM, theta0, short_mlm, 40, DenoiseConfig(), workers=4)
    assert a.phi.digest() == b.phi.digest()


def test_lt_sft_uses_raw_delta(theta0, mlm_data, short_mlm):
    result = lt_sft(mlm_data, Objective.MLM, theta0, short_mlm, 40)
    assert result.phi.metadata.method == Method.LT_SFT.value
    assert result.phi.metadata.rank_policy is None
    assert global_topk_mask(result.denoised, 40, trainable_names(theta0, Objective.MLM)) == result.mask


def test_task_vector_returns_head(theta0, task_data, short_task):
    result = deftx(task_data, Objective.CLASSIFY, theta0, short_task, 50, DenoiseConfig())
    assert result.head is not None
    assert result.head.names() == theta0.names_of(TensorClass.HEAD)
    assert result.phi.k == 50
    assert all(not name.startswith("cls.") and not name.startswith("mlm.") for name, _, _ in result.phi.nonempty())


def test_untrained_run_still_selects_k(theta0, mlm_data):
    result = deftx(mlm_data, Objective.MLM, theta0, TrainConfig(max_steps=0), 60, DenoiseConfig())
    assert result.mask.k == 60


def test_low_rank_denoising_changes_the_mask(theta0, mlm_data, short_mlm):
    raw = lt_sft(mlm_data, Objective.MLM, theta0, short_mlm, 60)
    rank_one = DenoiseConfig(rank_policy=RankPolicy.uniform(1), residual_retain_fraction=0.0)
    denoised = deftx(mlm_data, Objective.MLM, theta0, short_mlm, 60, rank_one)
    overlap = jaccard(raw.mask, denoised.mask)
    assert 0.0 <= overlap < 1.0


def test_compute_delta(theta0):
    other = theta0.map(lambda n, t: t + 1.0)
    delta = compute_delta(other, theta0)
    assert all(np.allclose(t, 1.0) for _, t in delta.items())


# --- ABLATIONS ---

@pytest.fixture
def ablation_args(theta0, mlm_data, short_mlm):
    frozen = theta0.names_of(TensorClass.LAYER_NORM)
    return dict(data=mlm_data, objective=Objective.MLM, theta0=theta0, cfg=short_mlm, k=50,
                denoise_cfg=DenoiseConfig(), freeze=frozen)


def test_no_sft_equals_masked_denoised_delta(theta0, ablation_args):
    result = ablation(AblationVariant.NO_SFT, **ablation_args)
    assert isinstance(result.vector, SparseVector)
    assert result.vector.metadata.method == "deftx:no_sft"
    composed = compose(theta0, [result.vector])
    expected = theta0.map(lambda n, t: np.where(result.mask.dense(n), t + result.denoised[n], t))
    assert composed.bitwise_equal(expected)


def test_no_prune_no_sft_equals_dense_denoised_delta(theta0, ablation_args):
    result = ablation(AblationVariant.NO_PRUNE_NO_SFT, **ablation_args)
    assert result.mask is None
    assert isinstance(result.vector, ParameterSet)
    assert compose(theta0, [result.vector]).bitwise_equal(theta0 + result.denoised)
    frozen = ablation_args["freeze"]
    assert all(np.all(result.denoised[name] == 0.0) for name in frozen)


def test_no_higher_order_drops_residual(ablation_args):
    result = ablation(AblationVariant.NO_HIGHER_ORDER, **ablation_args)
    assert result.phi.metadata.method == "deftx:no_higher_order"
    assert result.phi.k == 50


def test_none_variant_is_deftx(ablation_args):
    a = ablation(AblationVariant.NONE, **ablation_args)
    args = dict(ablation_args)
    b = deftx(args.pop("data"), args.pop("objective"), args.pop("theta0"), args.pop("cfg"), args.pop("k"),
              args.pop("denoise_cfg"), **args)
    assert a.phi.digest() == b.phi.digest()
