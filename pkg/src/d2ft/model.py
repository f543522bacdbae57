"""Head-partitioned toy transformer with manual gradients.

The model is split into ``L*H + 2`` subnets: the embedding, one subnet per
(block, head) pair, and the classification head.  A block subnet owns one
attention head (its Q/K/V column slices and the matching row slice of the
output projection) plus a ``1/H`` slice of the feed-forward network (a column
slice of the first layer and the matching row slice of the second).  Blocks use
the parallel residual form::

    y = x + sum_h [ attn_h(LN1(x)) + ffn_h(LN2(x)) ]

so every subnet's contribution is a function of the block input only and the
contributions are exactly additive.  Norm layers are frozen and each block
subnet carries its own copy.

Every subnet of a block runs one of three operations per micro-batch:

* ``FULL`` -- forward and backward; parameters receive gradients.
* ``FORWARD_ONLY`` -- forward contribution is added, backward is skipped;
  upstream gradients flow through the residual route only.
* ``SHORTCUT`` -- the subnet is bypassed and contributes nothing.
"""
from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, InputError, StateError

LN_EPS = 1e-5
STANDARD_LORA_RANK = 240
"""Rank of the reference "Standard LoRA" configuration (ViT-small scale)."""

BLOCK_PARAM_NAMES = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "w1", "b1", "w2", "b2")
LORA_TARGETS = ("q", "k", "v")


class OperationKind(enum.IntEnum):
    """Per-(subnet, micro-batch) operation; values are the schedule-table codes."""

    FULL = 1
    FORWARD_ONLY = 2
    SHORTCUT = 3


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 2
    heads_per_block: int = 2
    model_dim: int = 16
    ffn_hidden: int = 32
    seq_len: int = 8
    num_classes: int = 4
    input_dim: int = 8
    seed: int = 0

    def __post_init__(self):
        for name in ("num_blocks", "heads_per_block", "model_dim", "ffn_hidden",
                     "seq_len", "num_classes", "input_dim"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.model_dim % self.heads_per_block:
            raise ConfigError(
                f"model_dim={self.model_dim} not divisible by heads_per_block={self.heads_per_block}")
        if self.ffn_hidden % self.heads_per_block:
            raise ConfigError(
                f"ffn_hidden={self.ffn_hidden} not divisible by heads_per_block={self.heads_per_block}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads_per_block

    @property
    def ffn_slice(self) -> int:
        return self.ffn_hidden // self.heads_per_block

    @property
    def num_block_subnets(self) -> int:
        return self.num_blocks * self.heads_per_block

    @property
    def num_subnets(self) -> int:
        return self.num_block_subnets + 2


@dataclass(frozen=True, order=True)
class SubnetId:
    """``kind`` is ``"embed"``, ``"block"`` or ``"head"``; block/head indices are 1-based."""

    kind: str
    block: int = 0
    head: int = 0

    @property
    def label(self) -> str:
        if self.kind == "block":
            return f"block({self.block},{self.head})"
        return self.kind


@dataclass
class LoraAdapter:
    """Low-rank updates for the Q/K/V slices of one block subnet.

    Effective weight is ``base + scaling * down @ up``; ``down`` is ``d x R``
    and ``up`` is ``R x d/H``.
    """

    rank: int
    scaling: float
    down: dict[str, np.ndarray]
    up: dict[str, np.ndarray]

    def delta(self, target: str) -> np.ndarray:
        return self.scaling * (self.down[target] @ self.up[target])


@dataclass
class Subnet:
    id: SubnetId
    params: dict[str, np.ndarray]
    norms: dict[str, np.ndarray] = field(default_factory=dict)
    lora: LoraAdapter | None = None
    frozen: bool = False

    @property
    def param_count(self) -> int:
        """Number of partitioned (non-replicated, non-adapter) parameters."""
        return int(sum(p.size for p in self.params.values()))

    def trainable(self) -> dict[str, np.ndarray]:
        """Arrays that receive gradients under FULL, keyed by name.

        The returned arrays are the live ones, so in-place updates stick.
        """
        if self.lora is not None:
            out = {}
            for t in LORA_TARGETS:
                out[f"lora_{t}_down"] = self.lora.down[t]
                out[f"lora_{t}_up"] = self.lora.up[t]
            return out
        if self.frozen:
            return {}
        return dict(self.params)

    def effective(self, name: str) -> np.ndarray:
        w = self.params[name]
        if self.lora is not None and name in ("wq", "wk", "wv"):
            return w + self.lora.delta(name[1])
        return w

    def out_slice(self, head_dim: int) -> slice:
        start = (self.id.head - 1) * head_dim
        return slice(start, start + head_dim)


@dataclass
class SubnetModel:
    config: ModelConfig
    subnets: list[Subnet]

    @property
    def embed(self) -> Subnet:
        return self.subnets[0]

    @property
    def head(self) -> Subnet:
        return self.subnets[-1]

    def block_index(self, block: int, head: int) -> int:
        """Position in ``subnets`` of the 1-based (block, head) subnet."""
        return 1 + (block - 1) * self.config.heads_per_block + (head - 1)

    def block(self, block: int) -> list[Subnet]:
        start = self.block_index(block, 1)
        return self.subnets[start:start + self.config.heads_per_block]

    def block_subnets(self) -> list[Subnet]:
        return self.subnets[1:-1]

    def copy(self) -> "SubnetModel":
        return copy.deepcopy(self)


@dataclass
class ActivationCache:
    """Intermediates of one FULL forward, consumed by the matching backward."""

    x: np.ndarray
    u: np.ndarray
    ln1: tuple[np.ndarray, np.ndarray]
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    attn: np.ndarray
    z: np.ndarray
    ln2: tuple[np.ndarray, np.ndarray]
    pre: np.ndarray
    act: np.ndarray


# --------------------------------------------------------------------------
# primitives

def gelu(x: np.ndarray) -> np.ndarray:
    c = np.sqrt(2.0 / np.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x ** 3)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    c = np.sqrt(2.0 / np.pi)
    t = np.tanh(c * (x + 0.044715 * x ** 3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * c * (1.0 + 3 * 0.044715 * x ** 2)


def softmax(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + LN_EPS)
    xhat = (x - mu) * rstd
    return xhat * gamma + beta, (xhat, rstd)


def layer_norm_backward(dy, gamma, saved):
    # gamma/beta are frozen, only the input gradient is needed
    xhat, rstd = saved
    dxhat = dy * gamma
    return rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                   - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    p = softmax(logits)
    n = logits.shape[0]
    loss = float(-np.log(p[np.arange(n), labels]).mean())
    g = p.copy()
    g[np.arange(n), labels] -= 1.0
    return loss, g / n


def _flat_outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """sum over leading axes of a[..., i] * b[..., j]."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


# --------------------------------------------------------------------------
# construction

def init_parameters(config: ModelConfig) -> dict:
    """Monolithic (unpartitioned) parameters drawn from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    d, f, t = config.model_dim, config.ffn_hidden, config.input_dim

    def mat(n_in, n_out):
        return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))

    def vec(n, scale=0.02):
        return rng.normal(0.0, scale, size=n)

    blocks = []
    for _ in range(config.num_blocks):
        blocks.append(dict(
            wq=mat(d, d), bq=vec(d), wk=mat(d, d), bk=vec(d), wv=mat(d, d), bv=vec(d),
            wo=mat(d, d), bo=vec(d), w1=mat(d, f), b1=vec(f), w2=mat(f, d), b2=vec(d),
            ln1_g=1.0 + vec(d, 0.1), ln1_b=vec(d, 0.1),
            ln2_g=1.0 + vec(d, 0.1), ln2_b=vec(d, 0.1),
        ))
    return dict(
        embed_w=mat(t, d), embed_b=vec(d), pos=vec((config.seq_len, d), 0.1),
        blocks=blocks,
        lnf_g=1.0 + vec(d, 0.1), lnf_b=vec(d, 0.1),
        head_w=mat(d, config.num_classes), head_b=vec(config.num_classes),
    )


def partition_model(config: ModelConfig, params: dict | None = None) -> SubnetModel:
    """Split monolithic parameters into Embed, ``L*H`` block subnets and Head.

    Block subnets are ordered block-major: ``Block(1,1) ... Block(1,H),
    Block(2,1) ...``.  Each block parameter entry lands in exactly one subnet.
    """
    if params is None:
        params = init_parameters(config)
    dh, fs = config.head_dim, config.ffn_slice
    subnets = [Subnet(SubnetId("embed"), {
        "w": params["embed_w"].copy(), "b": params["embed_b"].copy(), "pos": params["pos"].copy()})]
    for l, bp in enumerate(params["blocks"], start=1):
        norms = {k: bp[k] for k in ("ln1_g", "ln1_b", "ln2_g", "ln2_b")}
        for h in range(1, config.heads_per_block + 1):
            cs = slice((h - 1) * dh, h * dh)
            fsl = slice((h - 1) * fs, h * fs)
            p = {
                "wq": bp["wq"][:, cs], "bq": bp["bq"][cs],
                "wk": bp["wk"][:, cs], "bk": bp["bk"][cs],
                "wv": bp["wv"][:, cs], "bv": bp["bv"][cs],
                "wo": bp["wo"][cs, :], "bo": bp["bo"][cs],
                "w1": bp["w1"][:, fsl], "b1": bp["b1"][fsl],
                "w2": bp["w2"][fsl, :], "b2": bp["b2"][cs],
            }
            subnets.append(Subnet(
                SubnetId("block", l, h),
                {k: np.array(v, dtype=np.float64) for k, v in p.items()},
                {k: np.array(v, dtype=np.float64) for k, v in norms.items()},
            ))
    subnets.append(Subnet(SubnetId("head"), {
        "w": params["head_w"].copy(), "b": params["head_b"].copy()},
        {"lnf_g": params["lnf_g"].copy(), "lnf_b": params["lnf_b"].copy()}))
    return SubnetModel(config, subnets)


def assemble_parameters(model: SubnetModel) -> dict:
    """Inverse of :func:`partition_model` (adapters are merged into Q/K/V)."""
    cfg = model.config
    blocks = []
    for l in range(1, cfg.num_blocks + 1):
        subs = model.block(l)
        bp = {}
        for name in BLOCK_PARAM_NAMES:
            parts = [s.effective(name) for s in subs]
            if name in ("wo", "w2"):
                bp[name] = np.vstack(parts)
            elif name.startswith("w"):
                bp[name] = np.hstack(parts)
            else:
                bp[name] = np.concatenate(parts)
        bp.update({k: v.copy() for k, v in subs[0].norms.items()})
        blocks.append(bp)
    e, hd = model.embed, model.head
    return dict(
        embed_w=e.params["w"].copy(), embed_b=e.params["b"].copy(), pos=e.params["pos"].copy(),
        blocks=blocks,
        lnf_g=hd.norms["lnf_g"].copy(), lnf_b=hd.norms["lnf_b"].copy(),
        head_w=hd.params["w"].copy(), head_b=hd.params["b"].copy(),
    )


def attach_lora(model: SubnetModel, rank: int, scaling: float = 1.0,
                seed: int | None = None) -> SubnetModel:
    """Return a copy of ``model`` with Q/K/V adapters on every block subnet.

    Down matrices start at zero so the adapted model initially computes
    exactly what the base model does.  All base parameters, including Embed
    and Head, are frozen.
    """
    cfg = model.config
    limit = min(cfg.model_dim, cfg.head_dim)
    if not isinstance(rank, (int, np.integer)) or rank < 1:
        raise ConfigError(f"LoRA rank must be a positive integer, got {rank!r}")
    if rank > limit:
        raise ConfigError(f"LoRA rank {rank} exceeds min(d, d/H) = {limit}")
    rng = np.random.default_rng(cfg.seed + 1 if seed is None else seed)
    out = model.copy()
    for s in out.subnets:
        s.frozen = True
    for s in out.block_subnets():
        s.lora = LoraAdapter(
            rank=int(rank), scaling=float(scaling),
            down={t: np.zeros((cfg.model_dim, rank)) for t in LORA_TARGETS},
            up={t: rng.normal(0.0, 1.0 / np.sqrt(rank), size=(rank, cfg.head_dim))
                for t in LORA_TARGETS},
        )
    return out


# --------------------------------------------------------------------------
# block subnets

def _check_activation(subnet: Subnet, x: np.ndarray) -> None:
    d = subnet.params["wq"].shape[0]
    if x.ndim < 2 or x.shape[-1] != d:
        raise DimensionError(f"expected activation (..., seq_len, {d}), got {x.shape}")


def subnet_contribution(subnet: Subnet, x: np.ndarray, op: OperationKind = OperationKind.FULL):
    """The subnet's additive contribution to its block output, plus a cache under FULL."""
    op = OperationKind(op)
    _check_activation(subnet, x)
    if op is OperationKind.SHORTCUT:
        return np.zeros_like(x), None
    p, n = subnet.params, subnet.norms
    dh = p["wq"].shape[1]
    sl = subnet.out_slice(dh)

    u, ln1 = layer_norm(x, n["ln1_g"], n["ln1_b"])
    q = u @ subnet.effective("wq") + p["bq"]
    k = u @ subnet.effective("wk") + p["bk"]
    v = u @ subnet.effective("wv") + p["bv"]
    probs = softmax(q @ np.swapaxes(k, -1, -2) / np.sqrt(dh))
    attn = probs @ v
    out = attn @ p["wo"]
    out[..., sl] += p["bo"]

    z, ln2 = layer_norm(x, n["ln2_g"], n["ln2_b"])
    pre = z @ p["w1"] + p["b1"]
    act = gelu(pre)
    out += act @ p["w2"]
    out[..., sl] += p["b2"]

    cache = None
    if op is OperationKind.FULL:
        cache = ActivationCache(x, u, ln1, q, k, v, probs, attn, z, ln2, pre, act)
    return out, cache


def subnet_contribution_backward(subnet: Subnet, cache: ActivationCache | None, dout: np.ndarray):
    """Gradient of the contribution w.r.t. the block input and the trainable parameters."""
    if cache is None:
        raise StateError(f"{subnet.id.label}: backward needs the cache of a FULL forward")
    if dout.shape != cache.x.shape:
        raise DimensionError(f"gradient shape {dout.shape} != activation shape {cache.x.shape}")
    p, n = subnet.params, subnet.norms
    dh = p["wq"].shape[1]
    sl = subnet.out_slice(dh)
    g = {}

    # feed-forward slice
    g["w2"] = _flat_outer(cache.act, dout)
    g["b2"] = dout[..., sl].reshape(-1, dh).sum(axis=0)
    dpre = (dout @ p["w2"].T) * gelu_grad(cache.pre)
    g["w1"] = _flat_outer(cache.z, dpre)
    g["b1"] = dpre.reshape(-1, dpre.shape[-1]).sum(axis=0)
    dx = layer_norm_backward(dpre @ p["w1"].T, n["ln2_g"], cache.ln2)

    # attention head
    g["wo"] = _flat_outer(cache.attn, dout)
    g["bo"] = g["b2"].copy()
    dattn = dout @ p["wo"].T
    dprobs = dattn @ np.swapaxes(cache.v, -1, -2)
    dv = np.swapaxes(cache.probs, -1, -2) @ dattn
    ds = cache.probs * (dprobs - (dprobs * cache.probs).sum(axis=-1, keepdims=True))
    ds /= np.sqrt(dh)
    dq = ds @ cache.k
    dk = np.swapaxes(ds, -1, -2) @ cache.q
    du = np.zeros_like(cache.u)
    for t, dt in (("q", dq), ("k", dk), ("v", dv)):
        g["w" + t] = _flat_outer(cache.u, dt)
        g["b" + t] = dt.reshape(-1, dh).sum(axis=0)
        du += dt @ subnet.effective("w" + t).T
    dx += layer_norm_backward(du, n["ln1_g"], cache.ln1)

    if subnet.lora is not None:
        lo = subnet.lora
        grads = {}
        for t in LORA_TARGETS:
            dw = g["w" + t]
            grads[f"lora_{t}_down"] = lo.scaling * dw @ lo.up[t].T
            grads[f"lora_{t}_up"] = lo.scaling * lo.down[t].T @ dw
        return dx, grads
    if subnet.frozen:
        return dx, {}
    return dx, {k: g[k] for k in BLOCK_PARAM_NAMES}


def subnet_forward(subnet: Subnet, x: np.ndarray, op: OperationKind = OperationKind.FULL):
    """Output of the subnet's residual route: ``x`` plus its contribution.

    Returns ``(y, cache)``; the cache is only produced for ``FULL``.
    """
    c, cache = subnet_contribution(subnet, x, op)
    return x + c, cache


def subnet_backward(subnet: Subnet, cache: ActivationCache | None, dy: np.ndarray):
    """Backward through :func:`subnet_forward`; ``dx`` includes the residual route."""
    dx, grads = subnet_contribution_backward(subnet, cache, dy)
    return dy + dx, grads


# --------------------------------------------------------------------------
# embed / head

def embed_forward(subnet: Subnet, tokens: np.ndarray) -> np.ndarray:
    p = subnet.params
    if tokens.ndim != 3 or tokens.shape[1:] != (p["pos"].shape[0], p["w"].shape[0]):
        raise DimensionError(
            f"expected tokens (batch, {p['pos'].shape[0]}, {p['w'].shape[0]}), got {tokens.shape}")
    return tokens @ p["w"] + p["b"] + p["pos"]


def embed_backward(subnet: Subnet, tokens: np.ndarray, dx: np.ndarray) -> dict:
    return {"w": _flat_outer(tokens, dx),
            "b": dx.reshape(-1, dx.shape[-1]).sum(axis=0),
            "pos": dx.sum(axis=0)}


def head_forward(subnet: Subnet, x: np.ndarray):
    n, p = subnet.norms, subnet.params
    h, ln = layer_norm(x, n["lnf_g"], n["lnf_b"])
    pooled = h.mean(axis=1)
    return pooled @ p["w"] + p["b"], (pooled, ln, x.shape[1])


def head_backward(subnet: Subnet, saved, dlogits: np.ndarray):
    pooled, ln, seq = saved
    p, n = subnet.params, subnet.norms
    grads = {"w": pooled.T @ dlogits, "b": dlogits.sum(axis=0)}
    dpooled = dlogits @ p["w"].T
    dh = np.repeat(dpooled[:, None, :] / seq, seq, axis=1)
    return layer_norm_backward(dh, n["lnf_g"], ln), grads


# --------------------------------------------------------------------------
# whole model

def _resolve_column(model: SubnetModel, column) -> list[OperationKind]:
    cfg = model.config
    if column is None:
        return [OperationKind.FULL] * cfg.num_block_subnets
    ops = [OperationKind(int(c)) for c in column]
    if len(ops) == cfg.num_subnets:
        if ops[0] is not OperationKind.FULL or ops[-1] is not OperationKind.FULL:
            raise InputError("Embed and Head subnets always run FULL")
        ops = ops[1:-1]
    if len(ops) != cfg.num_block_subnets:
        raise InputError(
            f"schedule column has {len(ops)} entries, expected {cfg.num_block_subnets}")
    return ops


def model_forward(model: SubnetModel, tokens: np.ndarray, column=None):
    """Logits with optional per-subnet operations (``None`` = every subnet active)."""
    ops = _resolve_column(model, column)
    x = embed_forward(model.embed, np.asarray(tokens, dtype=np.float64))
    H = model.config.heads_per_block
    for l in range(model.config.num_blocks):
        subs = model.block(l + 1)
        y = x
        for h, s in enumerate(subs):
            op = ops[l * H + h]
            if op is not OperationKind.SHORTCUT:
                y = y + subnet_contribution(s, x, OperationKind.FORWARD_ONLY)[0]
        x = y
    return head_forward(model.head, x)[0]


LossFn = Callable[[np.ndarray, np.ndarray], "tuple[float, np.ndarray]"]


def model_forward_backward(model: SubnetModel, micro_batch, column=None,
                           loss_fn: LossFn = cross_entropy):
    """Loss and gradients of one micro-batch under one schedule column.

    ``micro_batch`` is ``(tokens, labels)``.  ``column`` lists one operation
    per block subnet (length ``L*H``), optionally bracketed by the Embed and
    Head entries which must be FULL.  Gradients are returned as
    ``{subnet_index: {name: array}}`` and only for subnets that ran FULL and
    have trainable parameters.
    """
    tokens, labels = micro_batch
    tokens = np.asarray(tokens, dtype=np.float64)
    ops = _resolve_column(model, column)
    cfg, H = model.config, model.config.heads_per_block

    x = embed_forward(model.embed, tokens)
    caches: list[list] = []
    for l in range(cfg.num_blocks):
        y = x
        row = []
        for h, s in enumerate(model.block(l + 1)):
            c, cache = subnet_contribution(s, x, ops[l * H + h])
            if ops[l * H + h] is not OperationKind.SHORTCUT:
                y = y + c
            row.append(cache)
        caches.append(row)
        x = y
    logits, saved = head_forward(model.head, x)
    loss, dlogits = loss_fn(logits, labels)

    grads: dict[int, dict[str, np.ndarray]] = {}
    dx, hg = head_backward(model.head, saved, dlogits)
    if model.head.trainable():
        grads[len(model.subnets) - 1] = hg
    for l in reversed(range(cfg.num_blocks)):
        dnext = dx
        for h, s in enumerate(model.block(l + 1)):
            if ops[l * H + h] is OperationKind.FULL:
                d_in, sg = subnet_contribution_backward(s, caches[l][h], dnext)
                dx = dx + d_in
                if sg:
                    grads[model.block_index(l + 1, h + 1)] = sg
    if model.embed.trainable():
        grads[0] = embed_backward(model.embed, tokens, dx)
    return loss, grads
