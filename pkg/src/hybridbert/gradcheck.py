"""Central finite-difference verification of tape gradients.

Everything here runs at float64: verification precision is the point, the
training dtype is checked elsewhere. The numeric side never touches the
tape, so the two gradient routes stay independent.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward

__all__ = [
    "analytic_gradients",
    "numeric_partial",
    "relative_error",
    "grad_check",
    "run_op_suite",
    "run_model_suite",
    "MODEL_CHECK_PLANS",
]


def analytic_gradients(f: Callable[..., Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Tape gradients of f(*inputs) w.r.t. each requires_grad input."""
    for t in inputs:
        t.zero_grad()
    with Tape():
        loss = f(*inputs)
    backward(loss)
    return [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]


def numeric_partial(f: Callable[..., Tensor], inputs: Sequence[Tensor], which: int, flat_index: int, h: float) -> float:
    """Central difference d f / d inputs[which].flat[flat_index], off the tape."""
    buf = inputs[which].data.reshape(-1)
    orig = buf[flat_index]
    buf[flat_index] = orig + h
    f_plus = f(*inputs).item()
    buf[flat_index] = orig - h
    f_minus = f(*inputs).item()
    buf[flat_index] = orig
    return (f_plus - f_minus) / (2.0 * h)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Worst-case relative error between tape and finite-difference gradients.

    Checks every coordinate of every requires_grad input, or, when
    `max_coords` is given, a seeded random subsample of at least 64
    coordinates. Inputs must be float64.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError(f"grad_check requires float64 inputs, got {t.dtype}")
    grads = analytic_gradients(f, inputs)

    coords = [(i, j) for i, t in enumerate(inputs) if t.requires_grad for j in range(t.size)]
    if max_coords is not None and len(coords) > max_coords:
        budget = max(64, max_coords)
        rng = np.random.default_rng(seed)
        picked = rng.choice(len(coords), size=min(budget, len(coords)), replace=False)
        coords = [coords[int(k)] for k in picked]

    worst = 0.0
    for i, j in coords:
        numeric = numeric_partial(f, inputs, i, j, h)
        worst = max(worst, relative_error(float(grads[i].reshape(-1)[j]), numeric))
    return worst


# --- Standard check suites -------------------------------------------------
#
# Full-model checks scalarize the encoder output against a small fixed
# random probe (a Jacobian-transpose-vector check). The probe scale and
# the weight scale keep every quantity well conditioned for central
# differences at h=1e-5: softmax shift-invariance gives key-projection
# biases an exactly-zero gradient, whose finite difference is pure
# rounding noise proportional to the objective's magnitude, so the
# objective is kept small. A deliberately corrupted gradient still
# reports errors around 1e-2 under these scales (see the sensitivity
# test); discrimination is not lost.

MODEL_CHECK_PLANS = ("2A", "2P", "B1A+T1P", "B1P+T1A")
_MODEL_CHECK_WEIGHT_STD = 0.2
_MODEL_CHECK_PROBE_STD = 0.02


def _scalarize(t: Tensor, probe: np.ndarray) -> Tensor:
    from .tensor import mul

    return mul(t, probe).mean()


def run_op_suite(h: float = 1e-5, seed: int = 0) -> dict[str, float]:
    """Worst relative error for every differentiable operation, float64."""
    from .attention import (AttentionWeights, DropMaskConfig, dropmask_self_attention,
                            multi_head_self_attention, single_query_cross_attention)
    from .model import ModelConfig, init_params, mlm_loss, sso_loss
    from .pooling import PoolingWeights, global_aggregation, local_max_pooling, pooling_mixer
    from .tensor import (add, dropout, embedding, gather_rows, gelu, layer_norm,
                         log_softmax_lastdim, masked_fill, matmul, max_pool1d, mul,
                         pick_lastdim, softmax_lastdim)

    rng = np.random.default_rng(seed)

    def t(*shape, scale=1.0):
        return Tensor(rng.normal(size=shape) * scale, requires_grad=True)

    def probe(*shape):
        return rng.normal(size=shape)

    results: dict[str, float] = {}

    def check(name, f, inputs, max_coords=None):
        results[name] = grad_check(f, inputs, h=h, max_coords=max_coords, seed=seed)

    a, b = t(3, 5), t(5)
    pr = probe(3, 5)
    check("add", lambda *ts: _scalarize(add(a, b), pr), [a, b])

    c, d = t(4, 6), t(4, 6)
    pr2 = probe(4, 6)
    check("mul", lambda *ts: _scalarize(mul(c, d), pr2), [c, d])

    m1, m2 = t(2, 5, 7), t(7, 3)
    pr3 = probe(2, 5, 3)
    check("matmul", lambda *ts: _scalarize(matmul(m1, m2), pr3), [m1, m2])

    x = t(4, 6)
    pr4 = probe(2, 2, 3)
    check("reshape_transpose_slice",
          lambda *ts: _scalarize(x.reshape(2, 2, 6).transpose((0, 1, 2))[:, :, 1:4], pr4), [x])

    x2 = t(5, 5)
    mask = rng.random((5, 5)) < 0.3
    pr5 = probe(5, 5)
    check("masked_fill", lambda *ts: _scalarize(masked_fill(x2, mask, -3.0), pr5), [x2])

    x3 = t(4, 9)
    pr6 = probe(4, 9)
    check("gelu", lambda *ts: _scalarize(gelu(x3), pr6), [x3])

    x4 = t(3, 8)
    addmask = np.where(rng.random((3, 8)) < 0.25, -1e18, 0.0)
    pr7 = probe(3, 8)
    check("softmax_masked", lambda *ts: _scalarize(softmax_lastdim(x4, addmask), pr7), [x4])

    x5 = t(4, 10)
    pr8 = probe(4, 10)
    check("log_softmax", lambda *ts: _scalarize(log_softmax_lastdim(x5), pr8), [x5])

    x6, g6, b6 = t(3, 7, 8), t(8, scale=0.5), t(8, scale=0.5)
    g6.data += 1.0
    pr9 = probe(3, 7, 8)
    check("layer_norm", lambda *ts: _scalarize(layer_norm(x6, g6, b6, eps=1e-12), pr9),
          [x6, g6, b6])

    x7 = t(2, 12, 5)
    pr10 = probe(2, 12, 5)
    check("max_pool1d", lambda *ts: _scalarize(max_pool1d(x7, 3), pr10), [x7])

    table = t(9, 6)
    ids = np.array([[1, 4, 4, 0], [7, 1, 8, 4]])
    pr11 = probe(2, 4, 6)
    check("embedding", lambda *ts: _scalarize(embedding(table, ids), pr11), [table])

    rows = t(10, 4)
    idx = np.array([0, 3, 3, 9, 1])
    pr12 = probe(5, 4)
    check("gather_rows", lambda *ts: _scalarize(gather_rows(rows, idx), pr12), [rows])

    logits = t(6, 8)
    picks = np.array([0, 7, 3, 3, 5, 1])
    pr13 = probe(6)
    check("pick_lastdim", lambda *ts: _scalarize(pick_lastdim(logits, picks), pr13), [logits])

    x8 = t(4, 6)
    pr14 = probe(4, 6)

    def f_dropout(*ts):
        # fixed generator per call so the mask is identical across evaluations
        return _scalarize(dropout(x8, 0.3, np.random.default_rng(123)), pr14)

    check("dropout_fixed_mask", f_dropout, [x8])

    d_model, heads, l = 16, 2, 7
    wrng = np.random.default_rng(seed + 1)
    aw = AttentionWeights.init(d_model, heads, wrng, dtype=np.float64, std=0.3)
    h_in = t(2, l, d_model)
    pad = np.zeros((2, l), dtype=bool)
    pad[1, -2:] = True
    pr15 = probe(2, l, d_model) * 0.02
    check("attention_standard",
          lambda *ts: _scalarize(multi_head_self_attention(h_in, aw, pad), pr15),
          [h_in] + list(aw.named("w").values()))

    mpos = np.zeros((2, l), dtype=bool)
    mpos[0, 2] = True
    mpos[1, 0] = True
    for label, renorm in (("dropmask_renormalized", True), ("dropmask_post_softmax", False)):
        cfg_dm = DropMaskConfig(enabled=True, renormalize=renorm)
        check(label,
              lambda *ts, c=cfg_dm: _scalarize(
                  dropmask_self_attention(h_in, aw, pad, mpos, c), pr15),
              [h_in] + list(aw.named("w").values()))

    q = t(2, d_model)
    hk, hv = t(2, l, d_model), t(2, l, d_model)
    pr16 = probe(2, d_model) * 0.02
    check("single_query_cross_attention",
          lambda *ts: _scalarize(single_query_cross_attention(q, hk, hv, pad, heads), pr16),
          [q, hk, hv])

    pw = PoolingWeights.init(d_model, heads, wrng, dtype=np.float64, std=0.3)
    h_in2 = t(2, l, d_model)
    pw_tensors = [h_in2] + list(pw.named("w").values())
    pr17 = probe(2, l, d_model) * 0.02
    check("global_aggregation",
          lambda *ts: _scalarize(global_aggregation(h_in2, pw, pad), pr17), pw_tensors)
    check("local_max_pooling",
          lambda *ts: _scalarize(local_max_pooling(h_in2, pw, pad), pr17), pw_tensors)
    check("pooling_mixer",
          lambda *ts: _scalarize(pooling_mixer(h_in2, pw, pad), pr17), pw_tensors)

    mcfg = ModelConfig(vocab_size=24, d_model=16, num_heads=2, d_ffn=32, layer_plan="1A",
                       max_len=16, dtype="float64", seed=seed)
    mparams = init_params(mcfg, init_std=_MODEL_CHECK_WEIGHT_STD)
    hidden = t(2, 10, 16)
    labels = np.full((2, 10), -100)
    labels[0, 2] = 7
    labels[1, 4] = 20
    labels[1, 7] = 5
    head_names = ["mlm.dense.w", "mlm.dense.b", "mlm.ln.gamma", "mlm.ln.beta",
                  "embed.word", "mlm.decoder.b"]
    check("mlm_loss", lambda *ts: mlm_loss(mparams, mcfg, hidden, labels),
          [hidden] + [mparams[n] for n in head_names], max_coords=256)
    sso = np.array([2, 0])
    check("sso_loss", lambda *ts: sso_loss(mparams, mcfg, hidden, sso),
          [hidden, mparams["sso.head.w"], mparams["sso.head.b"]])

    return results


def run_model_suite(h: float = 1e-5, seed: int = 0, max_coords: int = 256,
                    plans: Sequence[str] = MODEL_CHECK_PLANS) -> dict[str, float]:
    """Probe-scalarized full-forward check for each layer plan, float64."""
    from .model import ModelConfig, encoder_forward, init_params

    rng = np.random.default_rng(seed)
    vocab_size = 24
    batch, l, d = 2, 16, 16
    input_ids = rng.integers(0, vocab_size, size=(batch, l))
    input_ids[:, 0] = 1
    segment_ids = (rng.random((batch, l)) < 0.5).astype(np.int64)
    padding_mask = np.zeros((batch, l), dtype=bool)
    padding_mask[1, -3:] = True
    input_ids[padding_mask] = 0
    mask_positions = ~padding_mask & (rng.random((batch, l)) < 0.15)
    mask_positions[:, 0] = False
    input_ids[mask_positions] = 3
    probe = rng.normal(size=(batch, l, d)) * _MODEL_CHECK_PROBE_STD

    results: dict[str, float] = {}
    for plan in plans:
        cfg = ModelConfig(vocab_size=vocab_size, d_model=d, num_heads=2, d_ffn=32,
                          layer_plan=plan, max_len=l, dtype="float64", seed=seed,
                          dropmask_enabled=True)
        params = init_params(cfg, init_std=_MODEL_CHECK_WEIGHT_STD)

        def f(*ts):
            out = encoder_forward(params, cfg, input_ids, segment_ids,
                                  padding_mask, mask_positions)
            return _scalarize(out, probe)

        results[f"model_{plan}"] = grad_check(f, list(params.values()), h=h,
                                              max_coords=max_coords, seed=seed)
    return results
