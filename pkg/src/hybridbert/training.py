"""AdamW optimizer, LR schedule, deterministic training loop, evaluation.

Batches are a pure function of (seed, step), so a resumed run replays
the exact batch stream of an unbroken one. Evaluation uses batches
frozen at loop start with a fixed corruption seed, making eval losses
comparable across runs and models.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import CorruptionConfig, DocStore, TokenBatch, make_batch, rng_for_batch
from .model import ModelConfig, batch_losses, init_params
from .tensor import Tape, Tensor, backward, zero_grads

__all__ = [
    "TrainConfig",
    "MetricsRecord",
    "TrainingError",
    "AdamState",
    "decay_exempt",
    "global_grad_norm",
    "adam_step",
    "lr_schedule",
    "build_eval_batches",
    "evaluate",
    "train_loop",
]

EVAL_CORRUPTION_SEED = 59231  # fixed so eval losses are comparable across runs
EVAL_BATCHES = 8


class TrainingError(RuntimeError):
    """Raised when training cannot continue (non-finite loss or gradient)."""


@dataclass
class TrainConfig:
    """Optimizer and loop settings."""

    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 100
    total_steps: int = 500
    batch_size: int = 8
    grad_clip_norm: float = 1.0
    seed: int = 0
    eval_every: int = 10
    dtype: str = "float32"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("warmup_steps must lie in [0, total_steps]")
        if self.total_steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("total_steps, batch_size, and eval_every must be >= 1")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")


@dataclass
class MetricsRecord:
    """One logged training step; loss_total = loss_mlm + loss_sso."""

    step: int
    loss_total: float
    loss_mlm: float
    loss_sso: float
    lr: float
    tokens_per_sec: float
    peak_resident_estimate: int

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def decay_exempt(name: str) -> bool:
    """Weight decay never touches biases or layer-norm parameters."""
    return name.endswith((".b", ".gamma", ".beta"))


@dataclass
class AdamState:
    """First/second moment estimates, one array per parameter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            m={n: np.zeros_like(t.data) for n, t in params.items()},
            v={n: np.zeros_like(t.data) for n, t in params.items()},
        )


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float(np.sum(np.asarray(t.grad, dtype=np.float64) ** 2))
    return math.sqrt(total)


def adam_step(params: dict[str, Tensor], state: AdamState, step: int,
              cfg: TrainConfig, lr: float | None = None) -> None:
    """One AdamW update in place: clip, moments, bias-correct, decayed step.

    `step` is 1-based and drives bias correction. Gradients default to
    zero for parameters never touched by the step's graph.
    """
    if step < 1:
        raise ValueError("adam_step expects a 1-based step")
    if lr is None:
        lr = lr_schedule(step, cfg)
    for name, t in params.items():
        if t.grad is not None and not np.isfinite(t.grad).all():
            raise TrainingError(f"non-finite gradient in parameter {name!r}")

    norm = global_grad_norm(params)
    scale = cfg.grad_clip_norm / norm if norm > cfg.grad_clip_norm else 1.0

    b1, b2 = cfg.betas
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name, t in params.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if scale != 1.0:
            g = g * scale
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.weight_decay != 0.0 and not decay_exempt(name):
            update = update + cfg.weight_decay * t.data
        t.data -= (lr * update).astype(t.data.dtype, copy=False)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to lr, then linear decay to 0 at total_steps."""
    if step < 1:
        raise ValueError("schedule is defined for steps >= 1")
    if step <= cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span <= 0:
        return 0.0
    return cfg.lr * max(0.0, (cfg.total_steps - step) / span)


def build_eval_batches(eval_store: DocStore, model_cfg: ModelConfig, corr_cfg: CorruptionConfig,
                       batch_size: int, n_batches: int = EVAL_BATCHES) -> list[TokenBatch]:
    """Frozen eval batches: fixed corruption seed, independent of run seed."""
    return [
        make_batch(eval_store, batch_size, model_cfg.max_len, corr_cfg,
                   rng_for_batch(EVAL_CORRUPTION_SEED, k), model_cfg.vocab_size)
        for k in range(n_batches)
    ]


def evaluate(params: dict[str, Tensor], model_cfg: ModelConfig,
             batches: list[TokenBatch]) -> dict[str, float]:
    """Tape-free mean losses over fixed batches."""
    totals = np.zeros(3, dtype=np.float64)
    for b in batches:
        total, mlm, sso = batch_losses(params, model_cfg, b)
        totals += (total.item(), mlm.item(), sso.item())
    totals /= len(batches)
    return {
        "eval_loss_total": totals[0],
        "eval_loss_mlm": totals[1],
        "eval_loss_sso": totals[2],
    }


def _peak_resident_estimate(params: dict[str, Tensor], tape_elements: int,
                            batch: TokenBatch) -> int:
    """Rough resident bytes: params + grads + both moments + live activations."""
    itemsize = next(iter(params.values())).data.itemsize
    param_elems = sum(t.data.size for t in params.values())
    batch_bytes = sum(
        a.nbytes for a in (batch.input_ids, batch.segment_ids, batch.padding_mask,
                           batch.mlm_labels, batch.mask_positions, batch.sso_labels)
    )
    return int(4 * param_elems * itemsize + tape_elements * itemsize + batch_bytes)


def train_loop(model_cfg: ModelConfig, train_cfg: TrainConfig, corr_cfg: CorruptionConfig,
               train_store: DocStore, eval_store: DocStore, out_dir,
               resume_from=None) -> dict:
    """Run (or resume) pre-training; writes metrics.jsonl, eval.jsonl, checkpoints.

    Aborts with TrainingError on a non-finite loss, leaving the last
    written checkpoint in place.
    """
    if model_cfg.dtype != train_cfg.dtype:
        raise ValueError("model and training dtype must agree")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    eval_path = out_dir / "eval.jsonl"
    final_ckpt = out_dir / "checkpoint_final.hbck"

    params = init_params(model_cfg)
    state = AdamState.zeros_like(params)
    start_step = 1
    if resume_from is not None:
        loaded, m, v, step0 = load_checkpoint(resume_from)
        if set(loaded) != set(params):
            raise TrainingError("checkpoint parameters do not match the model config")
        for name, arr in loaded.items():
            if arr.shape != params[name].data.shape or arr.dtype != params[name].data.dtype:
                raise TrainingError(f"checkpoint array {name!r} has wrong shape or dtype")
            params[name].data = arr
        state = AdamState(m=m, v=v)
        start_step = step0 + 1

    mode = "a" if resume_from is not None else "w"
    eval_batches = build_eval_batches(eval_store, model_cfg, corr_cfg, train_cfg.batch_size)
    last_eval: dict[str, float] = {}

    with open(metrics_path, mode) as mf, open(eval_path, mode) as ef:
        for step in range(start_step, train_cfg.total_steps + 1):
            rng = rng_for_batch(train_cfg.seed, step)
            batch = make_batch(train_store, train_cfg.batch_size, model_cfg.max_len,
                               corr_cfg, rng, model_cfg.vocab_size)
            t0 = time.perf_counter()
            with Tape() as tape:
                total, mlm, sso = batch_losses(params, model_cfg, batch)
                tape_elements = tape.recorded_elements()
                loss_values = (total.item(), mlm.item(), sso.item())
                if not all(math.isfinite(x) for x in loss_values):
                    raise TrainingError(
                        f"non-finite loss at step {step}; last checkpoint retained"
                    )
                backward(total)
            lr = lr_schedule(step, train_cfg)
            adam_step(params, state, step, train_cfg, lr)
            zero_grads(params.values())
            dt = time.perf_counter() - t0

            record = MetricsRecord(
                step=step,
                loss_total=loss_values[0],
                loss_mlm=loss_values[1],
                loss_sso=loss_values[2],
                lr=lr,
                tokens_per_sec=train_cfg.batch_size * model_cfg.max_len / max(dt, 1e-9),
                peak_resident_estimate=_peak_resident_estimate(params, tape_elements, batch),
            )
            mf.write(record.to_json() + "\n")

            if step % train_cfg.eval_every == 0 or step == train_cfg.total_steps:
                last_eval = evaluate(params, model_cfg, eval_batches)
                ef.write(json.dumps({"step": step, **last_eval}) + "\n")
                ef.flush()
                save_checkpoint(out_dir / f"checkpoint_step{step}.hbck",
                                params, state.m, state.v, step)

    save_checkpoint(final_ckpt, params, state.m, state.v, train_cfg.total_steps)
    return {
        "final_step": train_cfg.total_steps,
        "checkpoint_path": str(final_ckpt),
        "metrics_path": str(metrics_path),
        "eval_path": str(eval_path),
        "last_eval": last_eval,
    }
