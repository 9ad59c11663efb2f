import numpy as np
import pytest

from deftx.core.errors import ConfigError, DeftWarning, IncompatibleError, TrainingFailure
from deftx import optim
from deftx.core.models import (
    L1Anchor,
    ModelSpec,
    Objective,
    OptimizerKind,
    SelectionMetric,
    TensorClass,
    TrainConfig,
)
from deftx.data.batching import ExampleSet, make_batch
from deftx.loggers import TrainLogger
from deftx.model import ParameterSet, init_params, loss_and_grad, predict
from deftx.model.batch import Batch
from deftx.numerics import make_rng
from deftx.optim import (
    AdamWState,
    TrainingData,
    adamw_step,
    dense_plan,
    full_finetune,
    score_predictions,
    sparse_finetune,
    sparse_train,
    train,
    trainable_names,
)
from deftx.vectors import BinaryMask


def _scalar_set(value) -> ParameterSet:
    arr = np.atleast_1d(np.asarray(value, dtype=np.float64))
    return ParameterSet({"w": arr}, {"w": TensorClass.BIAS})


def _off_mask_equal(after: ParameterSet, before: ParameterSet, mask: BinaryMask, dense=()) -> bool:
    for name in before.names():
        if name in dense:
            continue
        keep = ~mask.dense(name).reshape(-1)
        a = after[name].reshape(-1)[keep].view(np.uint64)
        b = before[name].reshape(-1)[keep].view(np.uint64)
        if not np.array_equal(a, b):
            return False
    return True


# --- SINGLE STEP ---

def test_adamw_first_step_by_hand():
    params, grads = _scalar_set(1.0), _scalar_set(0.5)
    cfg = TrainConfig(lr=0.01)
    plan = dense_plan(["w"])
    adamw_step(params, grads, AdamWState.zeros(params, plan), 0, 0.01, cfg, plan)
    m_hat = (0.1 * 0.5) / (1 - 0.9)
    v_hat = (0.001 * 0.25) / (1 - 0.999)
    expected = 1.0 - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert params["w"][0] == pytest.approx(expected, rel=1e-14)


def test_zero_gradient_is_a_no_op():
    params, grads = _scalar_set([1.5, -2.0]), _scalar_set([0.0, 0.0])
    plan = dense_plan(["w"])
    adamw_step(params, grads, AdamWState.zeros(params, plan), 0, 0.1, TrainConfig(lr=0.1), plan)
    assert params["w"].tolist() == [1.5, -2.0]


def test_decoupled_weight_decay():
    params, grads = _scalar_set([2.0]), _scalar_set([0.0])
    cfg = TrainConfig(lr=0.1, weight_decay=0.5)
    plan = dense_plan(["w"])
    adamw_step(params, grads, AdamWState.zeros(params, plan), 0, 0.1, cfg, plan)
    assert params["w"][0] == pytest.approx(2.0 * (1 - 0.1 * 0.5), rel=1e-15)


def test_sgd_single_step_identity(theta0):
    rng = make_rng(0, "sgd")
    examples = ExampleSet.from_sentences([np.arange(3, 12), np.arange(5, 15)], theta0.spec.max_seq_len)
    batch = make_batch(examples, [0, 1], Objective.MLM, rng, theta0.spec.vocab_size, 0.5)
    _, grads = loss_and_grad(theta0, batch, Objective.MLM)

    names = trainable_names(theta0, Objective.MLM)
    plan = dense_plan(names)
    cfg = TrainConfig(lr=0.1, optimizer=OptimizerKind.SGD)
    params = theta0.copy()
    adamw_step(params, grads, AdamWState.zeros(params, plan), 0, 0.1, cfg, plan)
    for name in names:
        assert np.array_equal(params[name], theta0[name] - 0.1 * grads[name])


def test_masked_coordinates_only():
    params, grads = _scalar_set([1.0, 1.0, 1.0]), _scalar_set([0.3, 0.3, 0.3])
    plan = {"w": np.array([1], dtype=np.int64)}
    state = AdamWState.zeros(params, plan)
    adamw_step(params, grads, state, 0, 0.01, TrainConfig(lr=0.01), plan)
    assert params["w"][0] == 1.0 and params["w"][2] == 1.0
    assert params["w"][1] < 1.0
    assert state.m["w"].shape == (1,)


def test_non_finite_gradient():
    params, grads = _scalar_set([1.0]), _scalar_set([np.inf])
    plan = dense_plan(["w"])
    with pytest.raises(TrainingFailure) as info:
        adamw_step(params, grads, AdamWState.zeros(params, plan), 4, 0.1, TrainConfig(lr=0.1), plan)
    assert info.value.step == 5


def test_l1_soft_threshold_toward_anchor():
    cfg = TrainConfig(lr=0.1, l1_lambda=1.0)
    plan = dense_plan(["w"])

    params = _scalar_set([0.05, 0.5])
    adamw_step(params, _scalar_set([0.0, 0.0]), AdamWState.zeros(params, plan), 0, 0.1, cfg, plan)
    np.testing.assert_allclose(params["w"], [0.0, 0.4], atol=1e-15)

    anchor = _scalar_set([0.05, 0.5])
    params = anchor.copy()
    adamw_step(params, _scalar_set([0.0, 0.0]), AdamWState.zeros(params, plan), 0, 0.1, cfg, plan, anchor)
    assert params["w"].tolist() == [0.05, 0.5]


def test_single_coordinate_matches_scalar_adamw():
    cfg = TrainConfig(lr=0.05, max_steps=30)
    target, total = 3.0, 30
    params = _scalar_set([0.0, 0.0, 0.0, 0.0])
    plan = {"w": np.array([2], dtype=np.int64)}
    state = AdamWState.zeros(params, plan)
    for step in range(total):
        grads = _scalar_set(params["w"] - target)
        adamw_step(params, grads, state, step, cfg.lr_at(step, total), cfg, plan)

    w, m, v = 0.0, 0.0, 0.0
    for step in range(total):
        g = w - target
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        m_hat = m / (1 - 0.9 ** (step + 1))
        v_hat = v / (1 - 0.999 ** (step + 1))
        w -= cfg.lr * (total - step) / total * m_hat / (np.sqrt(v_hat) + 1e-8)

    assert params["w"][2] == pytest.approx(w, rel=1e-12)
    assert params["w"][[0, 1, 3]].tolist() == [0.0, 0.0, 0.0]


# --- SCHEDULE ---

def test_total_steps_rule():
    assert TrainConfig(max_steps=100, max_epochs=1, batch_size=8).total_steps(40) == 5
    assert TrainConfig(max_steps=3, max_epochs=1, batch_size=8).total_steps(40) == 3
    assert TrainConfig(max_steps=100, max_epochs=1, min_steps=10, batch_size=8).total_steps(40) == 10


def test_linear_decay():
    cfg = TrainConfig(lr=1.0)
    assert cfg.lr_at(0, 4) == 1.0
    assert cfg.lr_at(2, 4) == 0.5
    assert cfg.lr_at(4, 4) == 0.0


# --- TRAINING LOOPS ---

def test_zero_lr_returns_theta0(theta0, mlm_data):
    cfg = TrainConfig(lr=0.0, max_steps=3, batch_size=8, eval_interval=1)
    theta1 = full_finetune(theta0, mlm_data, Objective.MLM, cfg)
    assert theta1.bitwise_equal(theta0)


def test_full_finetune_freeze(theta0, mlm_data, short_mlm):
    frozen = theta0.names_of(TensorClass.LAYER_NORM)
    theta1 = full_finetune(theta0, mlm_data, Objective.MLM, short_mlm, freeze=frozen)
    for name in frozen:
        assert np.array_equal(theta1[name], theta0[name])
    assert not np.array_equal(theta1["embed.token"], theta0["embed.token"])
    # MLM never touches the classification head
    for name in theta0.names_of(TensorClass.HEAD):
        assert np.array_equal(theta1[name], theta0[name])


def test_full_finetune_reduces_loss(theta0, mlm_data):
    cfg = TrainConfig(lr=1e-2, max_steps=40, batch_size=8, eval_interval=10)
    logger = TrainLogger(run="test")
    full_finetune(theta0, mlm_data, Objective.MLM, cfg, train_logger=logger)
    evals = [r.eval_metric for r in logger.records if r.eval_metric is not None]
    assert len(logger.records) == 40
    assert len(evals) == 4
    assert min(evals[1:]) < evals[0]


def test_unknown_freeze_name(theta0, mlm_data, short_mlm):
    with pytest.raises(IncompatibleError):
        full_finetune(theta0, mlm_data, Objective.MLM, short_mlm, freeze=["no.such.tensor"])


def test_mlm_must_select_by_val_loss(theta0, mlm_data):
    cfg = TrainConfig(max_steps=2, selection_metric=SelectionMetric.ACCURACY)
    with pytest.raises(ConfigError):
        full_finetune(theta0, mlm_data, Objective.MLM, cfg)


def test_empty_training_data(theta0, short_mlm):
    empty = ExampleSet.from_sentences([], theta0.spec.max_seq_len)
    data = TrainingData(train=empty, validation=None, vocab_size=theta0.spec.vocab_size)
    with pytest.raises(ConfigError):
        full_finetune(theta0, data, Objective.MLM, short_mlm)


def test_sparse_finetune_keeps_off_mask_coordinates(theta0, mlm_data, short_mlm):
    rng = np.random.default_rng(0)
    eligible = trainable_names(theta0, Objective.MLM, theta0.names_of(TensorClass.LAYER_NORM))
    indices = {}
    for name in eligible[:6]:
        size = theta0[name].size
        indices[name] = np.sort(rng.choice(size, size=max(1, size // 10), replace=False)).astype(np.int64)
    mask = BinaryMask(shapes=theta0.shapes, indices=indices)

    phi, result = sparse_train(theta0, mask, mlm_data, Objective.MLM, short_mlm)
    assert phi.support() == mask
    assert _off_mask_equal(result.params, theta0, mask)
    for name, idx, values in phi.nonempty():
        np.testing.assert_array_equal(values, result.params[name].reshape(-1)[idx] - theta0[name].reshape(-1)[idx])


def test_sparse_finetune_trains_dense_head(theta0, task_data, short_task):
    mask = BinaryMask(shapes=theta0.shapes, indices={"embed.token": np.arange(10, dtype=np.int64)})
    heads = theta0.names_of(TensorClass.HEAD)
    phi, result = sparse_train(theta0, mask, task_data, Objective.CLASSIFY, short_task, dense=heads)
    assert _off_mask_equal(result.params, theta0, mask, dense=heads)
    assert not np.array_equal(result.params["cls.out.weight"], theta0["cls.out.weight"])
    assert all(not name.startswith("cls.") for name, _, _ in phi.nonempty())


def test_empty_mask_warns(theta0, mlm_data, short_mlm):
    with pytest.warns(DeftWarning):
        phi = sparse_finetune(theta0, BinaryMask.empty(theta0), mlm_data, Objective.MLM, short_mlm)
    assert phi.k == 0


def test_full_mask_zero_lr_gives_explicit_zeros(theta0, mlm_data):
    eligible = trainable_names(theta0, Objective.MLM)
    mask = BinaryMask.full(theta0, eligible)
    cfg = TrainConfig(lr=0.0, max_steps=2, batch_size=8, eval_interval=1)
    phi = sparse_finetune(theta0, mask, mlm_data, Objective.MLM, cfg)
    assert phi.k == theta0.num_scalars(eligible)
    assert all(np.all(values == 0.0) for _, _, values in phi.nonempty())


def test_mask_on_frozen_tensor_is_rejected(theta0, mlm_data, short_mlm):
    mask = BinaryMask(shapes=theta0.shapes, indices={"layers.0.ln1.gain": np.array([0], dtype=np.int64)})
    with pytest.raises(IncompatibleError):
        sparse_finetune(theta0, mask, mlm_data, Objective.MLM, short_mlm, freeze=["layers.0.ln1.gain"])


def test_score_predictions():
    y_true = np.array([0, 0, 1, 1])
    y_pred = np.array([0, 1, 1, 1])
    assert score_predictions(y_true, y_pred, "accuracy", 2) == 0.75
    assert score_predictions(y_true, y_pred, "macro_f1", 3) == pytest.approx((2 / 3 + 0.8 + 0.0) / 3)
    with pytest.raises(ConfigError):
        score_predictions(y_true, y_pred, "recall", 2)


def test_degenerate_predictor_scores():
    y_true = np.array([0, 1, 2])
    y_pred = np.zeros(3, dtype=np.int64)
    assert score_predictions(y_true, y_pred, "accuracy", 3) == pytest.approx(1 / 3)
    assert score_predictions(y_true, y_pred, "macro_f1", 3) == pytest.approx((0.5 + 0.0 + 0.0) / 3)


@pytest.mark.slow
def test_separable_task_is_learned():
    spec = ModelSpec(vocab_size=24, d_model=8, n_layers=1, n_heads=2, d_ff=16, max_seq_len=10, n_classes=2)
    rng = np.random.default_rng(0)
    sentences, labels = [], []
    for i in range(64):
        y = i % 2
        low, high = (3, 13) if y == 0 else (13, 24)
        sentences.append(rng.integers(low, high, size=6))
        labels.append(y)
    examples = ExampleSet.from_sentences(sentences, spec.max_seq_len, labels)
    data = TrainingData(train=examples, validation=None, vocab_size=spec.vocab_size)
    cfg = TrainConfig(lr=1e-2, max_steps=200, batch_size=16, eval_interval=50, selection_metric=SelectionMetric.ACCURACY)

    theta0 = init_params(spec, make_rng(0, "init"))
    theta1 = full_finetune(theta0, data, Objective.CLASSIFY, cfg)
    preds = np.argmax(predict(theta1, Batch(examples.token_ids, examples.attention_mask)), axis=1)
    assert np.mean(preds == examples.labels) >= 0.95


def test_non_finite_eval_metric_is_never_best(theta0, task_data, monkeypatch):
    cfg = TrainConfig(lr=1e-3, max_steps=6, batch_size=8, eval_interval=2, selection_metric=SelectionMetric.ACCURACY)
    plan = dense_plan(theta0.names_of(TensorClass.HEAD))

    metrics = iter([float("nan"), 0.4, 0.3])
    monkeypatch.setattr(optim, "_evaluate", lambda *args: next(metrics))
    result = train(theta0, task_data, Objective.CLASSIFY, cfg, plan)
    assert result.best_step == 4 and result.best_metric == 0.4

    monkeypatch.setattr(optim, "_evaluate", lambda *args: float("nan"))
    result = train(theta0, task_data, Objective.CLASSIFY, cfg, plan)
    assert result.best_step == 6 and result.best_metric is None
    assert result.params is not None


# --- L1 THROUGH THE TRAINING LOOP ---

def _l1_config(anchor: L1Anchor) -> TrainConfig:
    # evaluated only after the last step, so the final parameters are returned
    return TrainConfig(lr=0.1, max_steps=6, batch_size=8, eval_interval=100, l1_lambda=1.0, l1_anchor=anchor)


def test_l1_default_anchor_is_initial():
    assert TrainConfig().l1_anchor == L1Anchor.INITIAL


def test_l1_initial_anchor_keeps_untouched_weights(theta0, mlm_data):
    # the classification head gets no MLM gradient
    plan = dense_plan(["cls.dense.weight"])
    result = train(theta0, mlm_data, Objective.MLM, _l1_config(L1Anchor.INITIAL), plan)
    assert np.array_equal(result.params["cls.dense.weight"], theta0["cls.dense.weight"])


def test_l1_zero_anchor_shrinks_toward_zero(theta0, mlm_data):
    plan = dense_plan(["cls.dense.weight"])
    cfg = _l1_config(L1Anchor.ZERO)
    result = train(theta0, mlm_data, Objective.MLM, cfg, plan)

    total = cfg.total_steps(len(mlm_data.train))
    threshold = cfg.l1_lambda * sum(cfg.lr_at(i, total) for i in range(total))
    w0 = theta0["cls.dense.weight"]
    expected = np.sign(w0) * np.maximum(np.abs(w0) - threshold, 0.0)
    np.testing.assert_allclose(result.params["cls.dense.weight"], expected, rtol=0, atol=1e-12)
    assert np.any(expected == 0.0) and np.any(expected != 0.0)
