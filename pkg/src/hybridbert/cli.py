"""Command-line front end: pretrain, eval, bench, gradcheck, inspect.

Configuration is a flat ``key = value`` text file; every key has a
matching ``--kebab-case`` flag that overrides it. Unknown keys are
rejected. The merged effective configuration is echoed verbatim into
the output directory so a run is reproducible from its artifacts alone.
Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bench import estimate_activation_memory, run_scaling_benchmark, write_csv, write_json
from .checkpoint import CheckpointError, load_arrays, load_checkpoint
from .data import CorruptionConfig, DocStore, Vocab, build_vocab, read_documents
from .gradcheck import run_model_suite, run_op_suite
from .model import ModelConfig, init_params
from .training import TrainConfig, TrainingError, build_eval_batches, evaluate, train_loop

__all__ = ["main", "ConfigError", "load_config_file", "merge_config", "DEFAULTS"]

SUBCOMMANDS = ("pretrain", "eval", "bench", "gradcheck", "inspect")


class ConfigError(ValueError):
    """Invalid key, value, or missing required setting."""


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_dtype(s: str) -> str:
    alias = {"f32": "float32", "f64": "float64", "float32": "float32", "float64": "float64"}
    v = s.strip().lower()
    if v not in alias:
        raise ValueError(f"expected f32/f64/float32/float64, got {s!r}")
    return alias[v]


def _parse_lengths(s: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in str(s).replace(" ", "").split(",") if x)
    except ValueError:
        raise ValueError(f"expected comma-separated integers, got {s!r}")


# key -> (parser, default); corpus is the only key without a usable default
DEFAULTS: dict[str, tuple] = {
    "corpus": (str, ""),
    "vocab": (str, ""),
    "out_dir": (str, "runs/out"),
    "checkpoint": (str, ""),
    "max_vocab": (int, 512),
    "eval_fraction": (float, 0.05),
    "seed": (int, 0),
    "dtype": (_parse_dtype, "float32"),
    "layer_plan": (str, "12A"),
    "d_model": (int, 128),
    "num_heads": (int, 4),
    "d_ffn": (int, 512),
    "max_len": (int, 128),
    "ln_eps": (float, 1e-12),
    "dropmask_enabled": (_parse_bool, False),
    "dropmask_renormalize": (_parse_bool, True),
    "disable_ga": (_parse_bool, False),
    "disable_lmp": (_parse_bool, False),
    "lr": (float, 1e-4),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "adam_eps": (float, 1e-8),
    "weight_decay": (float, 0.01),
    "warmup_steps": (int, 100),
    "total_steps": (int, 500),
    "batch_size": (int, 8),
    "grad_clip_norm": (float, 1.0),
    "eval_every": (int, 10),
    "mask_rate": (float, 0.15),
    "frac_mask": (float, 0.8),
    "frac_random": (float, 0.1),
    "frac_keep": (float, 0.1),
    "bench_lengths": (_parse_lengths, (128, 256, 512, 1024, 2048)),
    "bench_reps": (int, 9),
    "gradcheck_h": (float, 1e-5),
    "gradcheck_tol": (float, 1e-5),
    "gradcheck_max_coords": (int, 256),
}


def load_config_file(path) -> dict:
    """Parse ``key = value`` lines; comments (#) and blanks are skipped."""
    values = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown config key: {key}")
            parser = DEFAULTS[key][0]
            try:
                values[key] = parser(value.strip())
            except ValueError as e:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {e}")
    return values


def merge_config(file_values: dict, flag_values: dict) -> dict:
    """defaults < config file < explicit flags."""
    cfg = {k: default for k, (_, default) in DEFAULTS.items()}
    cfg.update(file_values)
    cfg.update(flag_values)
    return cfg


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def echo_effective_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {_format_value(cfg[k])}" for k in sorted(cfg)]
    (out_dir / "effective.cfg").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridbert",
                                     description="hybrid attention/pooling encoder toolkit")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat key = value config file")
        for key in DEFAULTS:
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, metavar="V")
    return parser


def _collect(args: argparse.Namespace) -> dict:
    file_values = load_config_file(args.config) if args.config else {}
    flag_values = {}
    for key, (parser, _) in DEFAULTS.items():
        raw = getattr(args, key, None)
        if raw is not None:
            try:
                flag_values[key] = parser(raw) if isinstance(raw, str) else raw
            except ValueError as e:
                raise ConfigError(f"bad value for --{key.replace('_', '-')}: {e}")
    return merge_config(file_values, flag_values)


def _as_config_error(ctor):
    """Invalid field values are configuration mistakes, not runtime faults."""
    def wrapped(*args, **kwargs):
        try:
            return ctor(*args, **kwargs)
        except ValueError as e:
            raise ConfigError(str(e))
    return wrapped


def _model_config(cfg: dict, vocab_size: int) -> ModelConfig:
    return _as_config_error(ModelConfig)(
        vocab_size=vocab_size, d_model=cfg["d_model"], num_heads=cfg["num_heads"],
        d_ffn=cfg["d_ffn"], layer_plan=cfg["layer_plan"], max_len=cfg["max_len"],
        ln_eps=cfg["ln_eps"], dropmask_enabled=cfg["dropmask_enabled"],
        dropmask_renormalize=cfg["dropmask_renormalize"], disable_ga=cfg["disable_ga"],
        disable_lmp=cfg["disable_lmp"], dtype=cfg["dtype"], seed=cfg["seed"],
    )


def _train_config(cfg: dict) -> TrainConfig:
    return _as_config_error(TrainConfig)(
        lr=cfg["lr"], betas=(cfg["beta1"], cfg["beta2"]), eps=cfg["adam_eps"],
        weight_decay=cfg["weight_decay"], warmup_steps=cfg["warmup_steps"],
        total_steps=cfg["total_steps"], batch_size=cfg["batch_size"],
        grad_clip_norm=cfg["grad_clip_norm"], seed=cfg["seed"],
        eval_every=cfg["eval_every"], dtype=cfg["dtype"],
    )


def _corruption_config(cfg: dict) -> CorruptionConfig:
    return _as_config_error(CorruptionConfig)(
        mask_rate=cfg["mask_rate"], frac_mask=cfg["frac_mask"],
        frac_random=cfg["frac_random"], frac_keep=cfg["frac_keep"], seed=cfg["seed"])


def _load_corpus(cfg: dict, out_dir: Path) -> tuple[Vocab, DocStore, DocStore]:
    if not cfg["corpus"]:
        raise ConfigError("missing required key: corpus")
    docs = read_documents(cfg["corpus"])
    if cfg["vocab"]:
        vocab = Vocab.load(cfg["vocab"])
    else:
        vocab = build_vocab((s for d in docs for s in d), cfg["max_vocab"])
        out_dir.mkdir(parents=True, exist_ok=True)
        vocab.save(out_dir / "vocab.txt")
    store = DocStore([[vocab.encode(s) for s in d] for d in docs])
    train_store, eval_store = store.split(cfg["eval_fraction"])
    return vocab, train_store, eval_store


def _cmd_pretrain(cfg: dict) -> int:
    out_dir = Path(cfg["out_dir"])
    vocab, train_store, eval_store = _load_corpus(cfg, out_dir)
    echo_effective_config(cfg, out_dir)
    summary = train_loop(_model_config(cfg, vocab.size), _train_config(cfg),
                         _corruption_config(cfg), train_store, eval_store, out_dir)
    print(json.dumps(summary))
    return 0


def _cmd_eval(cfg: dict) -> int:
    if not cfg["checkpoint"]:
        raise ConfigError("missing required key: checkpoint")
    out_dir = Path(cfg["out_dir"])
    vocab, _, eval_store = _load_corpus(cfg, out_dir)
    echo_effective_config(cfg, out_dir)
    model_cfg = _model_config(cfg, vocab.size)
    params = init_params(model_cfg)
    loaded, _, _, step = load_checkpoint(cfg["checkpoint"])
    if set(loaded) != set(params):
        raise CheckpointError("checkpoint parameters do not match this configuration")
    for name, arr in loaded.items():
        if arr.shape != params[name].data.shape or arr.dtype != params[name].data.dtype:
            raise CheckpointError(f"checkpoint array {name!r} has wrong shape or dtype")
        params[name].data = arr
    batches = build_eval_batches(eval_store, model_cfg, _corruption_config(cfg),
                                 cfg["batch_size"])
    result = {"checkpoint": cfg["checkpoint"], "step": step,
              **evaluate(params, model_cfg, batches)}
    (out_dir / "eval_result.json").write_text(json.dumps(result, indent=2) + "\n")
    print(json.dumps(result))
    return 0


def _cmd_bench(cfg: dict) -> int:
    if len(cfg["bench_lengths"]) < 5:
        raise ConfigError("bench_lengths needs at least 5 lengths")
    if cfg["bench_reps"] < 9:
        raise ConfigError("bench_reps must be at least 9")
    out_dir = Path(cfg["out_dir"])
    echo_effective_config(cfg, out_dir)
    reports = run_scaling_benchmark(d=cfg["d_model"], num_heads=cfg["num_heads"],
                                    d_ffn=cfg["d_ffn"], lengths=cfg["bench_lengths"],
                                    reps=cfg["bench_reps"], seed=cfg["seed"])
    plan_totals = {
        plan: {str(l): estimate_activation_memory(plan, cfg["d_model"], cfg["num_heads"],
                                                  cfg["d_ffn"], l)["total"]
               for l in cfg["bench_lengths"]}
        for plan in ("12P", "B8A+T4P", "12A")
    }
    write_csv(out_dir / "scaling.csv", reports)
    write_json(out_dir / "scaling.json", reports, plan_totals)
    for r in reports:
        print(f"{r.mixer}: exponent {r.exponent:.3f}")
    return 0


def _cmd_gradcheck(cfg: dict) -> int:
    if cfg["dtype"] != "float64":
        raise ConfigError("gradcheck requires dtype f64")
    results = run_op_suite(h=cfg["gradcheck_h"], seed=cfg["seed"])
    results.update(run_model_suite(h=cfg["gradcheck_h"], seed=cfg["seed"],
                                   max_coords=cfg["gradcheck_max_coords"]))
    tol = cfg["gradcheck_tol"]
    failures = 0
    for name, err in results.items():
        status = "ok" if err < tol else "FAIL"
        failures += status == "FAIL"
        print(f"{name:32s} {err:.3e}  {status}")
    print(f"{len(results)} checks, {failures} over tolerance {tol:g}")
    return 1 if failures else 0


def _cmd_inspect(cfg: dict) -> int:
    if not cfg["checkpoint"]:
        raise ConfigError("missing required key: checkpoint")
    arrays = load_arrays(cfg["checkpoint"])
    step = arrays.get("meta.step")
    if step is not None:
        print(f"step: {int(step[0])}")
    groups: dict[str, tuple[int, int]] = {}
    for name, arr in arrays.items():
        prefix = name.split(".", 1)[0]
        count, bytes_ = groups.get(prefix, (0, 0))
        groups[prefix] = (count + 1, bytes_ + arr.nbytes)
    total_elems = sum(a.size for a in arrays.values())
    print(f"arrays: {len(arrays)}  elements: {total_elems}  "
          f"bytes: {sum(a.nbytes for a in arrays.values())}")
    for prefix in sorted(groups):
        count, bytes_ = groups[prefix]
        print(f"  {prefix:8s} {count:4d} arrays  {bytes_:12d} bytes")
    for name, arr in arrays.items():
        print(f"  {name:40s} {str(arr.dtype):8s} {arr.shape}")
    return 0


_COMMANDS = {
    "pretrain": _cmd_pretrain,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "gradcheck": _cmd_gradcheck,
    "inspect": _cmd_inspect,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _collect(args)
        return _COMMANDS[args.subcommand](cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (ValueError, TrainingError, CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
