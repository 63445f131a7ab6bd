"""Encoder assembly: layer plans, parameters, embeddings, and losses.

A model is a flat name -> Tensor parameter dict plus a config. Layers
follow a plan string such as "12A", "12P", or "B8A+T4P" (B = bottom
segment, T = top segment), each layer being either a self-attention
mixer (A) or a pooling mixer (P) inside a post-norm residual block.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .attention import (
    AttentionWeights,
    DropMaskConfig,
    dropmask_self_attention,
    multi_head_self_attention,
)
from .data import IGNORE_LABEL, NUM_RESERVED, TokenBatch
from .pooling import PoolingWeights, pooling_mixer
from .tensor import (
    Tensor,
    add,
    embedding,
    gather_rows,
    gelu,
    layer_norm,
    log_softmax_lastdim,
    matmul,
    mul,
    pick_lastdim,
    truncated_normal,
)

__all__ = [
    "parse_layer_plan",
    "format_layer_plan",
    "ModelConfig",
    "init_params",
    "param_count",
    "embed",
    "encoder_block",
    "encoder_forward",
    "mlm_loss",
    "sso_loss",
    "batch_losses",
]

_UNIFORM = re.compile(r"^(\d+)([AP])$")
_SPLIT = re.compile(r"^B(\d+)([AP])\+T(\d+)([AP])$")

NUM_SSO_CLASSES = 3
INIT_STD = 0.02


def parse_layer_plan(plan: str) -> tuple[str, ...]:
    """Expand a plan string into a bottom-to-top tuple of 'A'/'P' kinds."""
    m = _UNIFORM.match(plan.strip())
    if m:
        n, kind = int(m.group(1)), m.group(2)
        if n == 0:
            raise ValueError(f"layer plan {plan!r} has zero layers")
        return (kind,) * n
    m = _SPLIT.match(plan.strip())
    if m:
        nb, kb, nt, kt = int(m.group(1)), m.group(2), int(m.group(3)), m.group(4)
        if nb == 0 or nt == 0:
            raise ValueError(f"layer plan {plan!r} has a zero-length segment")
        return (kb,) * nb + (kt,) * nt
    raise ValueError(
        f"malformed layer plan {plan!r}; expected '<n>A', '<n>P', or 'B<n><K>+T<m><K>'"
    )


def format_layer_plan(kinds: tuple[str, ...]) -> str:
    """Render a kind tuple back to the shortest plan string."""
    if not kinds:
        raise ValueError("empty layer plan")
    if any(k not in ("A", "P") for k in kinds):
        raise ValueError(f"unknown layer kinds in {kinds!r}")
    if len(set(kinds)) == 1:
        return f"{len(kinds)}{kinds[0]}"
    flip = [i for i in range(1, len(kinds)) if kinds[i] != kinds[i - 1]]
    if len(flip) == 1:
        i = flip[0]
        return f"B{i}{kinds[0]}+T{len(kinds) - i}{kinds[-1]}"
    raise ValueError(f"plan {kinds!r} is not two homogeneous segments")


@dataclass
class ModelConfig:
    """Shape and behaviour switches for one encoder."""

    vocab_size: int
    d_model: int = 128
    num_heads: int = 4
    d_ffn: int = 512
    layer_plan: str = "12A"
    max_len: int = 128
    ln_eps: float = 1e-12
    dropmask_enabled: bool = False
    dropmask_renormalize: bool = True
    disable_ga: bool = False
    disable_lmp: bool = False
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size <= NUM_RESERVED:
            raise ValueError(f"vocab_size {self.vocab_size} leaves no content tokens")
        if self.d_model % self.num_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if self.d_ffn < 1:
            raise ValueError("d_ffn must be positive")
        if self.max_len < 5:
            raise ValueError("max_len must hold at least [CLS] a [SEP] b [SEP]")
        if self.ln_eps <= 0:
            raise ValueError("ln_eps must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")
        parse_layer_plan(self.layer_plan)

    @property
    def num_layers(self) -> int:
        return len(parse_layer_plan(self.layer_plan))

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)


def _param(params: dict, name: str, value: np.ndarray) -> None:
    params[name] = Tensor(value, requires_grad=True)


def init_params(cfg: ModelConfig, init_std: float = INIT_STD) -> dict[str, Tensor]:
    """Create all trainable tensors with stable, sorted-stable names.

    Weights and embeddings draw from a truncated normal (sigma 0.02,
    clipped at two sigma); biases start at zero, layer-norm scales at
    one. The MLM decoder reuses the word embedding matrix, so only its
    bias appears here. `init_std` exists for verification harnesses that
    need better-conditioned weights than the training default.
    """
    rng = np.random.default_rng(cfg.seed)
    dt = cfg.np_dtype
    d, f, v = cfg.d_model, cfg.d_ffn, cfg.vocab_size

    def tn(*shape):
        return truncated_normal(rng, shape, std=init_std, dtype=dt)

    params: dict[str, Tensor] = {}
    _param(params, "embed.word", tn(v, d))
    _param(params, "embed.pos", tn(cfg.max_len, d))
    _param(params, "embed.type", tn(2, d))
    _param(params, "embed.ln.gamma", np.ones(d, dtype=dt))
    _param(params, "embed.ln.beta", np.zeros(d, dtype=dt))

    for i, kind in enumerate(parse_layer_plan(cfg.layer_plan)):
        base = f"layer{i}"
        if kind == "A":
            names = ("q", "k", "v", "o")
        else:
            names = ("q", "k", "v", "o", "l")
        for p in names:
            _param(params, f"{base}.mix.{p}.w", tn(d, d))
            _param(params, f"{base}.mix.{p}.b", np.zeros(d, dtype=dt))
        _param(params, f"{base}.ln1.gamma", np.ones(d, dtype=dt))
        _param(params, f"{base}.ln1.beta", np.zeros(d, dtype=dt))
        _param(params, f"{base}.ffn.fc1.w", tn(d, f))
        _param(params, f"{base}.ffn.fc1.b", np.zeros(f, dtype=dt))
        _param(params, f"{base}.ffn.fc2.w", tn(f, d))
        _param(params, f"{base}.ffn.fc2.b", np.zeros(d, dtype=dt))
        _param(params, f"{base}.ln2.gamma", np.ones(d, dtype=dt))
        _param(params, f"{base}.ln2.beta", np.zeros(d, dtype=dt))

    _param(params, "mlm.dense.w", tn(d, d))
    _param(params, "mlm.dense.b", np.zeros(d, dtype=dt))
    _param(params, "mlm.ln.gamma", np.ones(d, dtype=dt))
    _param(params, "mlm.ln.beta", np.zeros(d, dtype=dt))
    _param(params, "mlm.decoder.b", np.zeros(v, dtype=dt))
    _param(params, "sso.head.w", tn(d, NUM_SSO_CLASSES))
    _param(params, "sso.head.b", np.zeros(NUM_SSO_CLASSES, dtype=dt))
    return params


def param_count(params: dict[str, Tensor]) -> int:
    return sum(int(np.prod(t.data.shape)) for t in params.values())


def _attn_weights(params: dict[str, Tensor], base: str, num_heads: int) -> AttentionWeights:
    g = lambda n: params[f"{base}.{n}"]
    return AttentionWeights(
        w_q=g("q.w"), b_q=g("q.b"), w_k=g("k.w"), b_k=g("k.b"),
        w_v=g("v.w"), b_v=g("v.b"), w_o=g("o.w"), b_o=g("o.b"),
        num_heads=num_heads,
    )


def _pool_weights(params: dict[str, Tensor], base: str, num_heads: int) -> PoolingWeights:
    g = lambda n: params[f"{base}.{n}"]
    return PoolingWeights(
        w_q=g("q.w"), b_q=g("q.b"), w_k=g("k.w"), b_k=g("k.b"),
        w_v=g("v.w"), b_v=g("v.b"), w_o=g("o.w"), b_o=g("o.b"),
        w_l=g("l.w"), b_l=g("l.b"), num_heads=num_heads,
    )


def embed(params: dict[str, Tensor], cfg: ModelConfig, input_ids: np.ndarray,
          segment_ids: np.ndarray) -> Tensor:
    """Word + position + segment embeddings followed by layer norm."""
    input_ids = np.asarray(input_ids)
    segment_ids = np.asarray(segment_ids)
    if input_ids.shape != segment_ids.shape:
        raise ValueError(f"ids {input_ids.shape} and segments {segment_ids.shape} differ")
    l = input_ids.shape[-1]
    if l > cfg.max_len:
        raise ValueError(f"sequence length {l} exceeds max_len {cfg.max_len}")
    if input_ids.min() < 0 or input_ids.max() >= cfg.vocab_size:
        raise ValueError("input ids outside the vocabulary range")
    if segment_ids.min() < 0 or segment_ids.max() > 1:
        raise ValueError("segment ids must be 0 or 1")
    h = embedding(params["embed.word"], input_ids)
    h = add(h, embedding(params["embed.pos"], np.arange(l)))
    h = add(h, embedding(params["embed.type"], segment_ids))
    return layer_norm(h, params["embed.ln.gamma"], params["embed.ln.beta"], eps=cfg.ln_eps)


def encoder_block(params: dict[str, Tensor], cfg: ModelConfig, h: Tensor, layer_index: int,
                  kind: str, padding_mask: np.ndarray | None,
                  mask_positions: np.ndarray | None = None) -> Tensor:
    """One post-norm block: LN(h + mixer(h)), then LN(. + FFN(.))."""
    base = f"layer{layer_index}"
    if kind == "A":
        w = _attn_weights(params, f"{base}.mix", cfg.num_heads)
        if cfg.dropmask_enabled and mask_positions is not None:
            dm = DropMaskConfig(enabled=True, renormalize=cfg.dropmask_renormalize)
            mixed = dropmask_self_attention(h, w, padding_mask, mask_positions, dm)
        else:
            mixed = multi_head_self_attention(h, w, padding_mask)
    elif kind == "P":
        w = _pool_weights(params, f"{base}.mix", cfg.num_heads)
        mixed = pooling_mixer(h, w, padding_mask,
                              disable_ga=cfg.disable_ga, disable_lmp=cfg.disable_lmp)
    else:
        raise ValueError(f"unknown layer kind {kind!r}")
    h = layer_norm(add(h, mixed), params[f"{base}.ln1.gamma"],
                   params[f"{base}.ln1.beta"], eps=cfg.ln_eps)
    ff = add(matmul(h, params[f"{base}.ffn.fc1.w"]), params[f"{base}.ffn.fc1.b"])
    ff = add(matmul(gelu(ff), params[f"{base}.ffn.fc2.w"]), params[f"{base}.ffn.fc2.b"])
    return layer_norm(add(h, ff), params[f"{base}.ln2.gamma"],
                      params[f"{base}.ln2.beta"], eps=cfg.ln_eps)


def encoder_forward(params: dict[str, Tensor], cfg: ModelConfig, input_ids: np.ndarray,
                    segment_ids: np.ndarray, padding_mask: np.ndarray,
                    mask_positions: np.ndarray | None = None) -> Tensor:
    """Run the embedding stack and every planned mixer block.

    When mask-dropping is enabled and mask positions are supplied,
    attention layers exclude those keys; pooling layers never see them.
    """
    h = embed(params, cfg, input_ids, segment_ids)
    for i, kind in enumerate(parse_layer_plan(cfg.layer_plan)):
        h = encoder_block(params, cfg, h, i, kind, padding_mask, mask_positions)
    return h


def mlm_loss(params: dict[str, Tensor], cfg: ModelConfig, hidden: Tensor,
             mlm_labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over labelled positions, decoder tied to embeddings."""
    labels = np.asarray(mlm_labels)
    flat = labels.reshape(-1)
    idx = np.flatnonzero(flat != IGNORE_LABEL)
    if idx.size == 0:
        raise ValueError("batch contains no MLM labels")
    targets = flat[idx]
    if targets.min() < 0 or targets.max() >= cfg.vocab_size:
        raise ValueError("MLM labels outside the vocabulary range")
    d = cfg.d_model
    rows = gather_rows(hidden.reshape(-1, d), idx)
    t = gelu(add(matmul(rows, params["mlm.dense.w"]), params["mlm.dense.b"]))
    t = layer_norm(t, params["mlm.ln.gamma"], params["mlm.ln.beta"], eps=cfg.ln_eps)
    logits = add(matmul(t, params["embed.word"].transpose((1, 0))), params["mlm.decoder.b"])
    logp = log_softmax_lastdim(logits)
    return mul(pick_lastdim(logp, targets).mean(), -1.0)


def sso_loss(params: dict[str, Tensor], cfg: ModelConfig, hidden: Tensor,
             sso_labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of the 3-way sentence-order head on [CLS]."""
    labels = np.asarray(sso_labels)
    if labels.min() < 0 or labels.max() >= NUM_SSO_CLASSES:
        raise ValueError("SSO labels must be 0, 1, or 2")
    cls = hidden[:, 0, :]
    logits = add(matmul(cls, params["sso.head.w"]), params["sso.head.b"])
    logp = log_softmax_lastdim(logits)
    return mul(pick_lastdim(logp, labels).mean(), -1.0)


def batch_losses(params: dict[str, Tensor], cfg: ModelConfig,
                 batch: TokenBatch) -> tuple[Tensor, Tensor, Tensor]:
    """Full forward pass; returns (total, mlm, sso) with total = mlm + sso."""
    hidden = encoder_forward(params, cfg, batch.input_ids, batch.segment_ids,
                             batch.padding_mask, batch.mask_positions)
    l_mlm = mlm_loss(params, cfg, hidden, batch.mlm_labels)
    l_sso = sso_loss(params, cfg, hidden, batch.sso_labels)
    return add(l_mlm, l_sso), l_mlm, l_sso
