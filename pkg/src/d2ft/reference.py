"""Unpartitioned reference transformer.

Works on the monolithic parameter layout of :func:`d2ft.model.init_parameters`
with full ``d x d`` projections and a reshaped multi-head attention.  It shares
nothing with the subnet code path except the elementwise primitives, and is
used to check that an all-FULL partitioned model computes the same loss and
gradients, and that the Standard training policy follows the same trajectory.
"""
from __future__ import annotations

import numpy as np

from .model import (ModelConfig, cross_entropy, gelu, gelu_grad, layer_norm,
                    layer_norm_backward, softmax)


def _split_heads(t: np.ndarray, H: int) -> np.ndarray:
    B, S, d = t.shape
    return t.reshape(B, S, H, d // H).transpose(0, 2, 1, 3)


def _merge_heads(t: np.ndarray) -> np.ndarray:
    B, H, S, dh = t.shape
    return t.transpose(0, 2, 1, 3).reshape(B, S, H * dh)


def _mm_grad(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    return np.einsum("bsi,bsj->ij", a, g)


def forward_backward(config: ModelConfig, params: dict, tokens, labels, *, backward=True):
    """Loss and gradients (same nested layout as ``params``, norms excluded)."""
    H = config.heads_per_block
    dh = config.head_dim
    x = tokens @ params["embed_w"] + params["embed_b"] + params["pos"]
    saved = []
    for bp in params["blocks"]:
        u, ln1 = layer_norm(x, bp["ln1_g"], bp["ln1_b"])
        q = _split_heads(u @ bp["wq"] + bp["bq"], H)
        k = _split_heads(u @ bp["wk"] + bp["bk"], H)
        v = _split_heads(u @ bp["wv"] + bp["bv"], H)
        probs = softmax(np.einsum("bhqe,bhke->bhqk", q, k) / np.sqrt(dh))
        attn = _merge_heads(np.einsum("bhqk,bhke->bhqe", probs, v))
        z, ln2 = layer_norm(x, bp["ln2_g"], bp["ln2_b"])
        pre = z @ bp["w1"] + bp["b1"]
        act = gelu(pre)
        saved.append((x, u, ln1, q, k, v, probs, attn, z, ln2, pre, act))
        x = x + (attn @ bp["wo"] + bp["bo"]) + (act @ bp["w2"] + bp["b2"])
    hn, lnf = layer_norm(x, params["lnf_g"], params["lnf_b"])
    pooled = hn.mean(axis=1)
    logits = pooled @ params["head_w"] + params["head_b"]
    loss, dlogits = cross_entropy(logits, labels)
    if not backward:
        return loss, logits

    grads = {"head_w": pooled.T @ dlogits, "head_b": dlogits.sum(axis=0)}
    S = config.seq_len
    dx = layer_norm_backward(
        np.broadcast_to((dlogits @ params["head_w"].T)[:, None, :] / S, x.shape),
        params["lnf_g"], lnf)
    block_grads = []
    for bp, (xin, u, ln1, q, k, v, probs, attn, z, ln2, pre, act) in zip(
            reversed(params["blocks"]), reversed(saved)):
        g = {}
        g["wo"] = _mm_grad(attn, dx)
        g["bo"] = dx.sum(axis=(0, 1))
        g["w2"] = _mm_grad(act, dx)
        g["b2"] = dx.sum(axis=(0, 1))
        dpre = (dx @ bp["w2"].T) * gelu_grad(pre)
        g["w1"] = _mm_grad(z, dpre)
        g["b1"] = dpre.sum(axis=(0, 1))
        dattn = _split_heads(dx @ bp["wo"].T, H)
        dprobs = np.einsum("bhqe,bhke->bhqk", dattn, v)
        dv = np.einsum("bhqk,bhqe->bhke", probs, dattn)
        ds = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) / np.sqrt(dh)
        dq = _merge_heads(np.einsum("bhqk,bhke->bhqe", ds, k))
        dk = _merge_heads(np.einsum("bhqk,bhqe->bhke", ds, q))
        dv = _merge_heads(dv)
        du = np.zeros_like(u)
        for name, dt in (("q", dq), ("k", dk), ("v", dv)):
            g["w" + name] = _mm_grad(u, dt)
            g["b" + name] = dt.sum(axis=(0, 1))
            du = du + dt @ bp["w" + name].T
        dx = (dx + layer_norm_backward(dpre @ bp["w1"].T, bp["ln2_g"], ln2)
              + layer_norm_backward(du, bp["ln1_g"], ln1))
        block_grads.append(g)
    grads["blocks"] = block_grads[::-1]
    grads["embed_w"] = _mm_grad(tokens, dx)
    grads["embed_b"] = dx.sum(axis=(0, 1))
    grads["pos"] = dx.sum(axis=0)
    return loss, grads


def partition_gradients(config: ModelConfig, grads: dict) -> dict[int, dict[str, np.ndarray]]:
    """Slice monolithic gradients into the subnet layout of ``model_forward_backward``."""
    dh, fs, H = config.head_dim, config.ffn_slice, config.heads_per_block
    out = {0: {"w": grads["embed_w"], "b": grads["embed_b"], "pos": grads["pos"]}}
    for l, g in enumerate(grads["blocks"]):
        for h in range(H):
            cs, fsl = slice(h * dh, (h + 1) * dh), slice(h * fs, (h + 1) * fs)
            out[1 + l * H + h] = {
                "wq": g["wq"][:, cs], "bq": g["bq"][cs], "wk": g["wk"][:, cs], "bk": g["bk"][cs],
                "wv": g["wv"][:, cs], "bv": g["bv"][cs], "wo": g["wo"][cs], "bo": g["bo"][cs],
                "w1": g["w1"][:, fsl], "b1": g["b1"][fsl], "w2": g["w2"][fsl], "b2": g["b2"][cs],
            }
    out[1 + config.num_block_subnets] = {"w": grads["head_w"], "b": grads["head_b"]}
    return out


def sgd_update(params: dict, grads: dict, velocity: dict, lr: float, momentum: float) -> None:
    """In-place momentum SGD over the nested monolithic layout."""
    for key, g in grads.items():
        if key == "blocks":
            for bp, bg, bv in zip(params["blocks"], g, velocity.setdefault(
                    "blocks", [{} for _ in g])):
                for name, gg in bg.items():
                    v = bv.get(name)
                    v = gg.copy() if v is None else momentum * v + gg
                    bv[name] = v
                    bp[name] = bp[name] - lr * v
            continue
        v = velocity.get(key)
        v = g.copy() if v is None else momentum * v + g
        velocity[key] = v
        params[key] = params[key] - lr * v
