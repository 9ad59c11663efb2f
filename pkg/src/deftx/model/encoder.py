"""
Model - Encoder

Pre-LN transformer encoder with an MLM head and a two-layer classification
head on position 0, with hand-written reverse-mode gradients.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Tuple

import numpy as np

from ..core.errors import EmptyObjectiveError, IncompatibleError
from ..core.models import ModelSpec, Objective
from ..numerics import Tensor
from .batch import IGNORE_INDEX, Batch
from .params import GradientSet, ParameterSet

LN_EPS = 1e-5
MASK_BIAS = -1e9
_GELU_C = np.sqrt(2.0 / np.pi)


@dataclass
class ForwardResult:
    loss: float
    logits: Tensor
    cache: Dict[str, Any] = field(default_factory=dict, repr=False)


# --- ELEMENTARY OPS ---

def _layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tuple[Tensor, Tuple[Tensor, Tensor]]:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def _layer_norm_backward(dy: Tensor, gain: Tensor, cache: Tuple[Tensor, Tensor]) -> Tuple[Tensor, Tensor, Tensor]:
    xhat, inv = cache
    n = dy.shape[-1]
    dgain = (dy * xhat).reshape(-1, n).sum(axis=0)
    dbias = dy.reshape(-1, n).sum(axis=0)
    dxhat = dy * gain
    dx = (inv / n) * (
        n * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def _gelu(x: Tensor) -> Tuple[Tensor, Tensor]:
    th = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    y = 0.5 * x * (1.0 + th)
    dydx = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return y, dydx


def _softmax(z: Tensor) -> Tensor:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _cross_entropy(logits: Tensor, labels: np.ndarray) -> Tuple[float, Tensor]:
    """Mean cross-entropy over rows with label != IGNORE_INDEX, and dL/dlogits."""
    flat = logits.reshape(-1, logits.shape[-1])
    y = labels.reshape(-1)
    valid = y != IGNORE_INDEX
    count = int(valid.sum())
    if count == 0:
        raise EmptyObjectiveError("every label in the batch is ignored")
    shifted = flat - flat.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_p = shifted - log_z
    rows = np.flatnonzero(valid)
    loss = float(-log_p[rows, y[rows]].sum() / count)

    grad = np.zeros_like(flat)
    grad[rows] = np.exp(log_p[rows])
    grad[rows, y[rows]] -= 1.0
    grad /= count
    return loss, grad.reshape(logits.shape)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, T, d = x.shape
    return x.reshape(B, T, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


# --- VALIDATION ---

def _spec_of(params: ParameterSet) -> ModelSpec:
    if params.spec is None:
        raise IncompatibleError("parameter set carries no ModelSpec")
    return params.spec


def _check_batch(spec: ModelSpec, batch: Batch, objective: Objective) -> None:
    ids = batch.token_ids
    if ids.ndim != 2 or batch.attention_mask.shape != ids.shape:
        raise IncompatibleError(f"token ids {ids.shape} and attention mask {batch.attention_mask.shape} disagree")
    if ids.shape[1] > spec.max_seq_len:
        raise IncompatibleError(f"sequence length {ids.shape[1]} exceeds max_seq_len={spec.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= spec.vocab_size):
        raise IncompatibleError(f"token ids must lie in [0, {spec.vocab_size})")
    if objective == Objective.MLM:
        if batch.mlm_labels is None or batch.mlm_labels.shape != ids.shape:
            raise IncompatibleError("MLM objective needs (B, T) mlm_labels")
        scored = batch.mlm_labels[batch.mlm_labels != IGNORE_INDEX]
        if scored.size and (scored.min() < 0 or scored.max() >= spec.vocab_size):
            raise IncompatibleError("MLM targets out of vocabulary range")
    else:
        if batch.class_labels is None or batch.class_labels.shape != (ids.shape[0],):
            raise IncompatibleError("classify objective needs (B,) class_labels")
        scored = batch.class_labels[batch.class_labels != IGNORE_INDEX]
        if scored.size and (scored.min() < 0 or scored.max() >= spec.n_classes):
            raise IncompatibleError(f"class labels must lie in [0, {spec.n_classes})")


# --- FORWARD ---

def _encode(params: ParameterSet, batch: Batch) -> Tuple[Tensor, Dict[str, Any]]:
    spec = _spec_of(params)
    ids = batch.token_ids
    B, T = ids.shape
    H = spec.n_heads
    scale = 1.0 / np.sqrt(spec.head_dim)
    key_bias = ((1.0 - batch.attention_mask) * MASK_BIAS)[:, None, None, :]

    x = params["embed.token"][ids] + params["embed.position"][:T]
    layers: List[Dict[str, Any]] = []
    for l in range(spec.n_layers):
        p = f"layers.{l}"
        c: Dict[str, Any] = {}
        h, c["ln1"] = _layer_norm(x, params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"])
        c["h"] = h
        q = _split_heads(h @ params[f"{p}.attn.query.weight"] + params[f"{p}.attn.query.bias"], H)
        k = _split_heads(h @ params[f"{p}.attn.key.weight"] + params[f"{p}.attn.key.bias"], H)
        v = _split_heads(h @ params[f"{p}.attn.value.weight"] + params[f"{p}.attn.value.bias"], H)
        att = _softmax(q @ k.transpose(0, 1, 3, 2) * scale + key_bias)
        ctx = _merge_heads(att @ v)
        c.update(q=q, k=k, v=v, att=att, ctx=ctx)
        x = x + ctx @ params[f"{p}.attn.output.weight"] + params[f"{p}.attn.output.bias"]

        h2, c["ln2"] = _layer_norm(x, params[f"{p}.ln2.gain"], params[f"{p}.ln2.bias"])
        pre = h2 @ params[f"{p}.ffn.in.weight"] + params[f"{p}.ffn.in.bias"]
        act, dact = _gelu(pre)
        c.update(h2=h2, act=act, dact=dact)
        x = x + act @ params[f"{p}.ffn.out.weight"] + params[f"{p}.ffn.out.bias"]
        layers.append(c)

    xf, final_cache = _layer_norm(x, params["final_ln.gain"], params["final_ln.bias"])
    return xf, {"layers": layers, "final_ln": final_cache, "xf": xf, "scale": scale}


def _classifier(params: ParameterSet, xf: Tensor) -> Tuple[Tensor, Tensor]:
    z = np.tanh(xf[:, 0, :] @ params["cls.dense.weight"] + params["cls.dense.bias"])
    return z @ params["cls.out.weight"] + params["cls.out.bias"], z


def forward_loss(params: ParameterSet, batch: Batch, objective: Objective) -> ForwardResult:
    """
    Mean cross-entropy over scored positions (mlm) or examples (classify).
    """
    objective = Objective(objective)
    _check_batch(_spec_of(params), batch, objective)
    xf, cache = _encode(params, batch)
    if objective == Objective.MLM:
        logits = xf @ params["mlm.decoder.weight"] + params["mlm.decoder.bias"]
        loss, dlogits = _cross_entropy(logits, batch.mlm_labels)
    else:
        logits, z = _classifier(params, xf)
        cache["z"] = z
        loss, dlogits = _cross_entropy(logits, batch.class_labels)
    cache["dlogits"] = dlogits
    return ForwardResult(loss=loss, logits=logits, cache=cache)


def predict(params: ParameterSet, batch: Batch) -> Tensor:
    """Classification logits, shape (B, n_classes)"""
    _spec_of(params)
    xf, _ = _encode(params, batch)
    logits, _ = _classifier(params, xf)
    return logits


# --- BACKWARD ---

def backward(
    params: ParameterSet,
    batch: Batch,
    objective: Objective,
    forward: ForwardResult | None = None,
) -> GradientSet:
    """Gradient of forward_loss for every tensor, index-compatible with params."""
    objective = Objective(objective)
    if forward is None:
        forward = forward_loss(params, batch, objective)
    spec = _spec_of(params)
    cache = forward.cache
    grads = params.zeros_like()
    dlogits = cache["dlogits"]
    xf = cache["xf"]
    B, T, d = xf.shape

    # 1. Heads
    dxf = np.zeros_like(xf)
    if objective == Objective.MLM:
        grads["mlm.decoder.weight"] = xf.reshape(-1, d).T @ dlogits.reshape(-1, spec.vocab_size)
        grads["mlm.decoder.bias"] = dlogits.reshape(-1, spec.vocab_size).sum(axis=0)
        dxf = dlogits @ params["mlm.decoder.weight"].T
    else:
        z = cache["z"]
        grads["cls.out.weight"] = z.T @ dlogits
        grads["cls.out.bias"] = dlogits.sum(axis=0)
        dpre = (dlogits @ params["cls.out.weight"].T) * (1.0 - z * z)
        cls_in = xf[:, 0, :]
        grads["cls.dense.weight"] = cls_in.T @ dpre
        grads["cls.dense.bias"] = dpre.sum(axis=0)
        dxf[:, 0, :] = dpre @ params["cls.dense.weight"].T

    # 2. Final layer norm
    dx, dg, db = _layer_norm_backward(dxf, params["final_ln.gain"], cache["final_ln"])
    grads["final_ln.gain"], grads["final_ln.bias"] = dg, db

    # 3. Blocks, last to first
    scale = cache["scale"]
    for l in reversed(range(spec.n_layers)):
        p = f"layers.{l}"
        c = cache["layers"][l]

        # FFN residual branch
        dact = dx @ params[f"{p}.ffn.out.weight"].T
        grads[f"{p}.ffn.out.weight"] = c["act"].reshape(-1, spec.d_ff).T @ dx.reshape(-1, d)
        grads[f"{p}.ffn.out.bias"] = dx.reshape(-1, d).sum(axis=0)
        dpre = dact * c["dact"]
        grads[f"{p}.ffn.in.weight"] = c["h2"].reshape(-1, d).T @ dpre.reshape(-1, spec.d_ff)
        grads[f"{p}.ffn.in.bias"] = dpre.reshape(-1, spec.d_ff).sum(axis=0)
        dh2 = dpre @ params[f"{p}.ffn.in.weight"].T
        dln, dg, db = _layer_norm_backward(dh2, params[f"{p}.ln2.gain"], c["ln2"])
        grads[f"{p}.ln2.gain"], grads[f"{p}.ln2.bias"] = dg, db
        dx = dx + dln

        # Attention residual branch
        grads[f"{p}.attn.output.weight"] = c["ctx"].reshape(-1, d).T @ dx.reshape(-1, d)
        grads[f"{p}.attn.output.bias"] = dx.reshape(-1, d).sum(axis=0)
        dctx = _split_heads(dx @ params[f"{p}.attn.output.weight"].T, spec.n_heads)
        att, q, k, v = c["att"], c["q"], c["k"], c["v"]
        datt = dctx @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ dctx
        dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
        dq = (dscores @ k) * scale
        dk = (dscores.transpose(0, 1, 3, 2) @ q) * scale

        h = c["h"].reshape(-1, d)
        dh = np.zeros((B, T, d))
        for proj, dproj in (("query", dq), ("key", dk), ("value", dv)):
            dflat = _merge_heads(dproj)
            grads[f"{p}.attn.{proj}.weight"] = h.T @ dflat.reshape(-1, d)
            grads[f"{p}.attn.{proj}.bias"] = dflat.reshape(-1, d).sum(axis=0)
            dh = dh + dflat @ params[f"{p}.attn.{proj}.weight"].T
        dln, dg, db = _layer_norm_backward(dh, params[f"{p}.ln1.gain"], c["ln1"])
        grads[f"{p}.ln1.gain"], grads[f"{p}.ln1.bias"] = dg, db
        dx = dx + dln

    # 4. Embeddings
    dtok = np.zeros_like(params["embed.token"])
    np.add.at(dtok, batch.token_ids.reshape(-1), dx.reshape(-1, d))
    grads["embed.token"] = dtok
    dpos = np.zeros_like(params["embed.position"])
    dpos[:T] = dx.sum(axis=0)
    grads["embed.position"] = dpos
    return grads


def loss_and_grad(params: ParameterSet, batch: Batch, objective: Objective) -> Tuple[float, GradientSet]:
    forward = forward_loss(params, batch, objective)
    return forward.loss, backward(params, batch, objective, forward)
