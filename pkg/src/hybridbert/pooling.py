"""The pooling token mixer: global aggregation plus local max-pooling.

Five linear projections of the incoming hidden states feed two branches.
Global aggregation averages the query projection over real (non-padded)
positions, refines that single summary vector by cross-attending over the
keys, and fuses it per token through an elementwise product with the
output projection. Local max-pooling slides a window-3 per-channel max
over a sixth view of the sequence. The mixer output is the sum of the two
branches; both run in O(l * d^2), with no l-by-l intermediate anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import single_query_cross_attention
from .tensor import Tensor, masked_fill, matmul, max_pool1d, mul, neg_inf, truncated_normal

__all__ = [
    "PoolingWeights",
    "global_aggregation",
    "local_max_pooling",
    "pooling_mixer",
]


@dataclass
class PoolingWeights:
    """The five projections of one pooling mixer plus pooling geometry."""

    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    w_l: Tensor
    b_l: Tensor
    num_heads: int
    lmp_window: int = 3
    lmp_stride: int = 1

    def __post_init__(self):
        d = self.w_q.shape[0]
        if d % self.num_heads != 0:
            raise ValueError(f"hidden size {d} not divisible by {self.num_heads} heads")
        if self.lmp_window % 2 == 0 or self.lmp_stride != 1:
            raise ValueError("local max-pooling needs an odd window and stride 1")

    @property
    def hidden(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def init(cls, d: int, num_heads: int, rng: np.random.Generator, dtype=np.float32, std: float = 0.02) -> "PoolingWeights":
        def w():
            return Tensor(truncated_normal(rng, (d, d), std, dtype), requires_grad=True)

        def b():
            return Tensor(np.zeros(d, dtype=dtype), requires_grad=True)

        return cls(w(), b(), w(), b(), w(), b(), w(), b(), w(), b(), num_heads)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.q.w": self.w_q, f"{prefix}.q.b": self.b_q,
            f"{prefix}.k.w": self.w_k, f"{prefix}.k.b": self.b_k,
            f"{prefix}.v.w": self.w_v, f"{prefix}.v.b": self.b_v,
            f"{prefix}.o.w": self.w_o, f"{prefix}.o.b": self.b_o,
            f"{prefix}.l.w": self.w_l, f"{prefix}.l.b": self.b_l,
        }


def _valid_mask(h_in: Tensor, padding_mask: np.ndarray | None) -> np.ndarray | None:
    if padding_mask is None:
        return None
    pad = np.asarray(padding_mask, dtype=bool)
    if pad.shape != h_in.shape[:-1]:
        raise ValueError(f"padding_mask shape {pad.shape} does not match sequence shape {h_in.shape[:-1]}")
    return ~pad


def global_aggregation(h_in: Tensor, w: PoolingWeights,
                       padding_mask: np.ndarray | None = None) -> Tensor:
    """Sequence-summary attention fused per token by an elementwise product.

    The rough summary is the mean of the query projection over non-padded
    positions; cross-attending it once over the keys sharpens it; the
    Hadamard product with the per-token output projection keeps tokens
    from collapsing onto one shared global vector.
    """
    *lead, l, d = h_in.shape
    valid = _valid_mask(h_in, padding_mask)

    h_q = matmul(h_in, w.w_q) + w.b_q
    h_k = matmul(h_in, w.w_k) + w.b_k
    h_v = matmul(h_in, w.w_v) + w.b_v
    h_o = matmul(h_in, w.w_o) + w.b_o

    if valid is None:
        h_avg = h_q.mean(axis=-2)
    else:
        counts = valid.sum(axis=-1)
        if np.any(counts == 0):
            raise ValueError("global_aggregation: some sequence has every position padded")
        h_q_kept = mul(h_q, valid[..., None].astype(h_in.data.dtype))
        h_avg = mul(h_q_kept.sum(axis=-2), (1.0 / counts[..., None]).astype(h_in.data.dtype))

    h_att = single_query_cross_attention(h_avg, h_k, h_v, padding_mask, w.num_heads)
    return mul(h_o, h_att.reshape(*lead, 1, d))


def local_max_pooling(h_in: Tensor, w: PoolingWeights,
                      padding_mask: np.ndarray | None = None) -> Tensor:
    """Sliding-window per-channel max over the projected sequence.

    Padded positions are sunk to the masking sentinel before pooling, so
    they can never win a window; pooled rows at padded positions are then
    zeroed to keep sentinel values out of the residual stream.
    """
    h_l = matmul(h_in, w.w_l) + w.b_l
    valid = _valid_mask(h_in, padding_mask)
    if valid is not None and not valid.all():
        h_l = masked_fill(h_l, ~valid[..., None], neg_inf(h_in.data.dtype))
        pooled = max_pool1d(h_l, w.lmp_window, w.lmp_stride)
        return mul(pooled, valid[..., None].astype(h_in.data.dtype))
    return max_pool1d(h_l, w.lmp_window, w.lmp_stride)


def pooling_mixer(h_in: Tensor, w: PoolingWeights,
                  padding_mask: np.ndarray | None = None,
                  disable_ga: bool = False, disable_lmp: bool = False) -> Tensor:
    """Sum of the global-aggregation and local-max-pooling branches.

    The ablation flags drop one branch; the output is then exactly the
    surviving branch. Disabling both is an error.
    """
    if disable_ga and disable_lmp:
        raise ValueError("pooling_mixer: cannot disable both branches")
    if disable_ga:
        return local_max_pooling(h_in, w, padding_mask)
    if disable_lmp:
        return global_aggregation(h_in, w, padding_mask)
    return global_aggregation(h_in, w, padding_mask) + local_max_pooling(h_in, w, padding_mask)
