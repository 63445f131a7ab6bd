"""Self-attention token mixers.

Three entry points: standard multi-head self-attention, the DropMask
variant (keys at masked-token positions are excluded from the weighted
summation so no representation ever depends on mask embeddings), and the
single-query cross-attention primitive used by global aggregation.

All functions accept a single sequence ``(l, d)`` or any batched layout
``(..., l, d)``; boolean masks use the same leading shape with True
marking positions to exclude (padding) or mask-token positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, matmul, mul, neg_inf, softmax_lastdim, truncated_normal

__all__ = [
    "AttentionWeights",
    "DropMaskConfig",
    "multi_head_self_attention",
    "dropmask_self_attention",
    "single_query_cross_attention",
]


@dataclass
class AttentionWeights:
    """Projection weights for one self-attention mixer."""

    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    num_heads: int

    def __post_init__(self):
        d = self.w_q.shape[0]
        if d % self.num_heads != 0:
            raise ValueError(f"hidden size {d} not divisible by {self.num_heads} heads")

    @property
    def hidden(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def init(cls, d: int, num_heads: int, rng: np.random.Generator, dtype=np.float32, std: float = 0.02) -> "AttentionWeights":
        def w():
            return Tensor(truncated_normal(rng, (d, d), std, dtype), requires_grad=True)

        def b():
            return Tensor(np.zeros(d, dtype=dtype), requires_grad=True)

        return cls(w(), b(), w(), b(), w(), b(), w(), b(), num_heads)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.q.w": self.w_q, f"{prefix}.q.b": self.b_q,
            f"{prefix}.k.w": self.w_k, f"{prefix}.k.b": self.b_k,
            f"{prefix}.v.w": self.w_v, f"{prefix}.v.b": self.b_v,
            f"{prefix}.o.w": self.w_o, f"{prefix}.o.b": self.b_o,
        }


@dataclass
class DropMaskConfig:
    """DropMask behaviour: off by default, renormalized exclusion when on.

    renormalize=True excludes masked keys before the softmax so surviving
    weights sum to 1. renormalize=False keeps the full softmax and drops
    the masked-key terms from the summation afterwards (weights then sum
    to less than 1); this is the literal weighted-sum-exclusion reading.
    """

    enabled: bool = False
    renormalize: bool = True


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., l, d) -> (..., heads, l, d/heads)"""
    *lead, l, d = x.shape
    x = x.reshape(*lead, l, heads, d // heads)
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return x.transpose(axes)


def _merge_heads(x: Tensor) -> Tensor:
    """(..., heads, l, dh) -> (..., l, heads*dh)"""
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    x = x.transpose(axes)
    *lead, l, heads, dh = x.shape
    return x.reshape(*lead, l, heads * dh)


def _key_additive_mask(exclude: np.ndarray, dtype) -> np.ndarray:
    """Boolean key-exclusion mask (..., l) -> additive (..., 1, 1, l)."""
    add = np.where(exclude, neg_inf(dtype), 0.0).astype(dtype)
    return add[..., None, None, :]


def _check_seq_input(h_in: Tensor, mask: np.ndarray | None, what: str) -> None:
    if h_in.ndim < 2:
        raise ValueError(f"expected (..., l, d) hidden states, got shape {h_in.shape}")
    if mask is not None and np.asarray(mask).shape != h_in.shape[:-1]:
        raise ValueError(
            f"{what} shape {np.asarray(mask).shape} does not match sequence shape {h_in.shape[:-1]}"
        )


def _attention_core(h_in: Tensor, w: AttentionWeights, key_exclude: np.ndarray | None,
                    drop_keys: np.ndarray | None = None) -> Tensor:
    """softmax(QK^T / sqrt(dh) + mask) V per head, heads concatenated, projected.

    `key_exclude` marks keys removed before the softmax; `drop_keys` marks
    keys whose already-normalized weights are zeroed afterwards.
    """
    heads = w.num_heads
    dh = w.hidden // heads
    q = _split_heads(matmul(h_in, w.w_q) + w.b_q, heads)
    k = _split_heads(matmul(h_in, w.w_k) + w.b_k, heads)
    v = _split_heads(matmul(h_in, w.w_v) + w.b_v, heads)

    axes = list(range(q.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    scores = matmul(q, k.transpose(axes)) * (1.0 / math.sqrt(dh))

    additive = None
    if key_exclude is not None and key_exclude.any():
        additive = _key_additive_mask(key_exclude, h_in.data.dtype)
    probs = softmax_lastdim(scores, additive_mask=additive)
    degenerate = probs.degenerate_rows

    if drop_keys is not None and drop_keys.any():
        keep = (~drop_keys).astype(h_in.data.dtype)[..., None, None, :]
        probs = mul(probs, keep)

    ctx = _merge_heads(matmul(probs, v))
    out = matmul(ctx, w.w_o) + w.b_o
    out.degenerate_rows = None if degenerate is None else degenerate.any(axis=-2)
    return out


def multi_head_self_attention(h_in: Tensor, w: AttentionWeights,
                              padding_mask: np.ndarray | None = None) -> Tensor:
    """Standard transformer self-attention; padded keys get zero weight.

    A query whose keys are all padded yields a degenerate (zeroed-weights)
    row, reported through ``out.degenerate_rows``.
    """
    _check_seq_input(h_in, padding_mask, "padding_mask")
    exclude = None if padding_mask is None else np.asarray(padding_mask, dtype=bool)
    return _attention_core(h_in, w, exclude)


def dropmask_self_attention(h_in: Tensor, w: AttentionWeights,
                            padding_mask: np.ndarray | None,
                            mask_positions: np.ndarray,
                            cfg: DropMaskConfig) -> Tensor:
    """Self-attention that excludes mask-token keys from the summation.

    Masked tokens still act as queries (they see unmasked tokens); no token
    can see a masked key. With renormalize=True the exclusion happens
    before the softmax, combined with the padding mask by union. With
    renormalize=False the softmax runs over all non-padded keys and the
    masked-key terms are dropped from the weighted sum afterwards.

    With zero masked positions both modes reduce exactly to
    :func:`multi_head_self_attention`.
    """
    _check_seq_input(h_in, mask_positions, "mask_positions")
    _check_seq_input(h_in, padding_mask, "padding_mask")
    masked = np.asarray(mask_positions, dtype=bool)
    pad = None if padding_mask is None else np.asarray(padding_mask, dtype=bool)
    if cfg.renormalize:
        exclude = masked if pad is None else (masked | pad)
        return _attention_core(h_in, w, exclude)
    return _attention_core(h_in, w, pad, drop_keys=masked)


def single_query_cross_attention(q: Tensor, h_k: Tensor, h_v: Tensor,
                                 padding_mask: np.ndarray | None = None,
                                 num_heads: int = 1) -> Tensor:
    """One query vector attending over l keys per head; O(l*d) total.

    `q` has shape (..., d) matching the leading shape of `h_k`/`h_v`
    (..., l, d). Raises if every key of some sequence is padded.
    """
    _check_seq_input(h_k, padding_mask, "padding_mask")
    *lead, l, d = h_k.shape
    if q.shape != (*lead, d):
        raise ValueError(f"query shape {q.shape} does not match keys {h_k.shape}")
    if d % num_heads != 0:
        raise ValueError(f"hidden size {d} not divisible by {num_heads} heads")
    dh = d // num_heads

    exclude = None
    if padding_mask is not None:
        exclude = np.asarray(padding_mask, dtype=bool)
        if np.any(exclude.all(axis=-1)):
            raise ValueError("single_query_cross_attention: some sequence has all keys padded")

    qh = q.reshape(*lead, num_heads, 1, dh)
    kh = _split_heads(h_k, num_heads)
    vh = _split_heads(h_v, num_heads)

    axes = list(range(kh.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    scores = matmul(qh, kh.transpose(axes)) * (1.0 / math.sqrt(dh))
    additive = None
    if exclude is not None and exclude.any():
        additive = _key_additive_mask(exclude, h_k.data.dtype)
    probs = softmax_lastdim(scores, additive_mask=additive)
    ctx = matmul(probs, vh)  # (..., heads, 1, dh)
    return ctx.reshape(*lead, d)
