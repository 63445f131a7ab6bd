"""Wall-time and activation-memory scaling of the two token mixers.

Timing covers forward plus backward of one mixer on a single thread,
median over repetitions with warmups discarded. Activation memory is an
exact analytic element count per encoder block, obtained by fitting a
quadratic in sequence length to tape-recorded counts of the real block
and verifying the fit on a held-out length. The memory estimate covers
activations only (not parameters or optimizer state).
"""

from __future__ import annotations

import json
import platform
import time
from dataclasses import asdict, dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .attention import AttentionWeights, multi_head_self_attention
from .model import ModelConfig, encoder_block, init_params
from .pooling import PoolingWeights, pooling_mixer
from .tensor import Tape, Tensor, backward

__all__ = [
    "MEMORY_SCOPE_NOTE",
    "ScalingSample",
    "ScalingReport",
    "fit_exponent",
    "time_mixer",
    "LayerCountModel",
    "fit_layer_count_model",
    "estimate_activation_memory",
    "run_scaling_benchmark",
    "write_csv",
    "write_json",
]

MIXER_KINDS = ("attention", "pooling")
_KIND_CODE = {"attention": "A", "pooling": "P"}

MEMORY_SCOPE_NOTE = (
    "activation element counts only; parameters, gradients, and optimizer "
    "state are excluded"
)

MIN_SAMPLE_SECONDS = 1e-3  # below this, inner repetitions are increased


@dataclass
class ScalingSample:
    l: int
    median_s: float
    iqr_s: float
    activation_elements: int


@dataclass
class ScalingReport:
    mixer: str
    samples: list[ScalingSample]
    exponent: float
    host: str


def fit_exponent(samples) -> float:
    """Least-squares slope of log(time) against log(length)."""
    pts = [(int(l), float(t)) for l, t in samples]
    if len(pts) < 3:
        raise ValueError("exponent fit needs at least 3 points")
    if any(t <= 0 for _, t in pts):
        raise ValueError("exponent fit needs positive times")
    xs = np.log([l for l, _ in pts])
    ys = np.log([t for _, t in pts])
    return float(np.polyfit(xs, ys, 1)[0])


def _mixer_closure(kind: str, d: int, num_heads: int, dtype=np.float32):
    rng = np.random.default_rng(0)
    if kind == "attention":
        w = AttentionWeights.init(d, num_heads, rng, dtype=dtype)
        return lambda h: multi_head_self_attention(h, w)
    if kind == "pooling":
        w = PoolingWeights.init(d, num_heads, rng, dtype=dtype)
        return lambda h: pooling_mixer(h, w)
    raise ValueError(f"unknown mixer kind {kind!r}; expected one of {MIXER_KINDS}")


def _forward_backward(mixer, h: Tensor) -> None:
    with Tape():
        out = mixer(h)
        backward(out.sum())
    h.zero_grad()


def time_mixer(kind: str, d: int, num_heads: int, lengths, reps: int = 9,
               warmup: int = 3, seed: int = 0) -> list[dict]:
    """Median forward+backward seconds per sequence length, single-threaded.

    Each repetition uses a fresh seeded random input. When one pass is
    faster than the timer can resolve cleanly, inner repetitions are
    increased automatically and the per-pass time reported.
    """
    if reps < 1 or warmup < 0:
        raise ValueError("reps must be >= 1 and warmup >= 0")
    mixer = _mixer_closure(kind, d, num_heads)
    rng = np.random.default_rng(seed)
    results = []
    with threadpool_limits(limits=1):
        for l in lengths:
            inputs = [Tensor(rng.normal(size=(1, l, d)).astype(np.float32))
                      for _ in range(warmup + reps)]
            for h in inputs[:warmup]:
                _forward_backward(mixer, h)

            probe_start = time.perf_counter()
            _forward_backward(mixer, inputs[warmup])
            probe = time.perf_counter() - probe_start
            inner = max(1, int(np.ceil(MIN_SAMPLE_SECONDS / max(probe, 1e-9))))

            times = []
            for h in inputs[warmup:]:
                t0 = time.perf_counter()
                for _ in range(inner):
                    _forward_backward(mixer, h)
                times.append((time.perf_counter() - t0) / inner)
            q25, q50, q75 = np.percentile(times, [25, 50, 75])
            results.append({"l": int(l), "median_s": float(q50),
                            "iqr_s": float(q75 - q25), "reps": reps, "inner": inner})
    return results


@dataclass
class LayerCountModel:
    """Exact activation elements of one encoder block: a2*l^2 + a1*l + a0."""

    kind: str
    a2: int
    a1: int
    a0: int

    def at(self, l: int, batch: int = 1) -> int:
        return batch * (self.a2 * l * l + self.a1 * l + self.a0)


def _block_recorded_elements(kind: str, d: int, num_heads: int, d_ffn: int, l: int) -> int:
    cfg = ModelConfig(vocab_size=8, d_model=d, num_heads=num_heads, d_ffn=d_ffn,
                      layer_plan=f"1{_KIND_CODE[kind]}", max_len=max(8, l))
    params = init_params(cfg)
    h = Tensor(np.zeros((1, l, d), dtype=np.float32))
    with Tape() as tape:
        encoder_block(params, cfg, h, 0, _KIND_CODE[kind], None)
        return tape.recorded_elements()


def fit_layer_count_model(kind: str, d: int, num_heads: int, d_ffn: int) -> LayerCountModel:
    """Derive the block's exact count polynomial from its own forward graph.

    Solves a2/a1/a0 from tape-recorded counts at three small lengths,
    then verifies the polynomial reproduces a held-out length exactly;
    any drift between formula and implementation raises.
    """
    if kind not in MIXER_KINDS:
        raise ValueError(f"unknown mixer kind {kind!r}; expected one of {MIXER_KINDS}")
    ls = (4, 8, 12)
    counts = [_block_recorded_elements(kind, d, num_heads, d_ffn, l) for l in ls]
    mat = np.array([[l * l, l, 1] for l in ls], dtype=np.float64)
    coeffs = np.linalg.solve(mat, np.array(counts, dtype=np.float64))
    model = LayerCountModel(kind, *(int(round(c)) for c in coeffs))
    for l in ls + (16,):
        expect = _block_recorded_elements(kind, d, num_heads, d_ffn, l)
        if model.at(l) != expect:
            raise RuntimeError(
                f"activation count model out of sync with the {kind} block at l={l}: "
                f"formula {model.at(l)} vs recorded {expect}"
            )
    return model


def estimate_activation_memory(plan, d: int, num_heads: int, d_ffn: int, l: int,
                               batch: int = 1) -> dict:
    """Per-layer and total activation element counts for a layer plan."""
    from .model import parse_layer_plan

    kinds = parse_layer_plan(plan) if isinstance(plan, str) else tuple(plan)
    models = {}
    for code in set(kinds):
        name = "attention" if code == "A" else "pooling"
        models[code] = fit_layer_count_model(name, d, num_heads, d_ffn)
    per_layer = [models[k].at(l, batch) for k in kinds]
    return {
        "plan": plan if isinstance(plan, str) else "".join(kinds),
        "l": l,
        "batch": batch,
        "per_layer": per_layer,
        "total": sum(per_layer),
        "scope": MEMORY_SCOPE_NOTE,
    }


def _host_descriptor() -> str:
    import os

    return f"{platform.platform()} / {os.cpu_count()} cpus / numpy {np.__version__}"


def run_scaling_benchmark(d: int = 128, num_heads: int = 4, d_ffn: int = 512,
                          lengths=(128, 256, 512, 1024, 2048), reps: int = 9,
                          seed: int = 0) -> list[ScalingReport]:
    """Time both mixers over the length grid and fit their exponents."""
    if len(lengths) < 5:
        raise ValueError("scaling grid needs at least 5 lengths")
    if reps < 9:
        raise ValueError("need at least 9 timing repetitions per length")
    host = _host_descriptor()
    reports = []
    for kind in MIXER_KINDS:
        counts = fit_layer_count_model(kind, d, num_heads, d_ffn)
        rows = time_mixer(kind, d, num_heads, lengths, reps=reps, seed=seed)
        samples = [
            ScalingSample(r["l"], r["median_s"], r["iqr_s"], counts.at(r["l"]))
            for r in rows
        ]
        exponent = fit_exponent([(s.l, s.median_s) for s in samples])
        reports.append(ScalingReport(kind, samples, exponent, host))
    return reports


def write_csv(path, reports: list[ScalingReport]) -> None:
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["mixer", "l", "median_s", "iqr_s", "activation_elements"])
        for rep in reports:
            for s in rep.samples:
                writer.writerow([rep.mixer, s.l, f"{s.median_s:.9f}",
                                 f"{s.iqr_s:.9f}", s.activation_elements])


def write_json(path, reports: list[ScalingReport], plan_totals: dict | None = None) -> None:
    payload = {
        "memory_scope": MEMORY_SCOPE_NOTE,
        "host": reports[0].host if reports else _host_descriptor(),
        "mixers": {
            rep.mixer: {
                "exponent": rep.exponent,
                "samples": [asdict(s) for s in rep.samples],
            }
            for rep in reports
        },
    }
    if plan_totals is not None:
        payload["plan_totals"] = plan_totals
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")
