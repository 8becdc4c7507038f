"""Command-line experiment runner.

Subcommands: ``train``, ``compare``, ``gradcheck``, ``gradsim``, ``analyze``
and ``bench``. Every run writes ``manifest.json`` (config, seeds and a
content hash of each artifact) into its output directory.

Exit codes: 0 success, 2 usage error, 3 validation failure (bad config,
missing file, failed check), 4 numeric failure (divergence, gradient
tolerance breach).
"""

from __future__ import annotations

import argparse
import copy
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import NumericError
from .checkpoint import CheckpointError, read_checkpoint
from .config import ROUTING_MODES, ConfigError, ExperimentConfig
from .data import CorpusError, eval_windows, load_corpus, sample_batch
from .reporting import git_blob_hash, write_json, write_manifest

logger = logging.getLogger("default_moe")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    """A validation check ran to completion and failed."""


def _int_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _mode_list(text: str) -> list[str]:
    modes = [s.strip() for s in text.split(",") if s.strip()]
    bad = [m for m in modes if m not in ROUTING_MODES]
    if bad or not modes:
        raise argparse.ArgumentTypeError(f"modes must be drawn from {ROUTING_MODES}, got {text!r}")
    return modes


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (sections: model, train)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. train.steps=200 (repeatable)")
    common.add_argument("--out", help="output directory (default: runs/<command>)")
    common.add_argument("--seeds", type=_int_list, help="comma-separated seeds")
    common.add_argument("--modes", type=_mode_list, help="comma-separated routing modes")
    common.add_argument("--precision", type=int, choices=(32, 64), help="floating-point width")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="default-moe", description="Default-vector MoE experiments")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("train", parents=[common], help="train one routing mode")
    p.add_argument("--resume", help="checkpoint to resume from")

    sub.add_parser("compare", parents=[common], help="train several modes on identical data and compare")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every parameter gradient")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error (default 1e-4)")
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--seq", type=int, default=16)
    p.add_argument("--probes", type=int, default=32, help="random directions per large parameter")

    p = sub.add_parser("gradsim", parents=[common], help="router-gradient similarity to dense across K")
    p.add_argument("--ks", type=_int_list, default=None, help="top-K values (default 1..N in powers of 2)")
    p.add_argument("--warmup", type=int, default=500, help="training steps before the trained snapshot")
    p.add_argument("--batches", type=int, default=20, help="batches averaged per point")

    p = sub.add_parser("analyze", parents=[common], help="routing analyses of a checkpoint")
    p.add_argument("checkpoint", help="checkpoint file written by train")
    p.add_argument("--windows", type=int, default=64, help="validation windows analysed")

    p = sub.add_parser("bench", parents=[common], help="training throughput per routing mode")
    p.add_argument("--windows", type=int, default=10)
    p.add_argument("--steps-per-window", type=int, default=2)
    return parser


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.precision:
        cfg = cfg.with_overrides([f"model.dtype=float{args.precision}"])
    return cfg.with_overrides(args.overrides)


def _workers(n_jobs: int) -> int:
    raw = os.environ.get("DEFAULT_MOE_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"DEFAULT_MOE_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(cap, n_jobs))


def _with_seed(cfg: ExperimentConfig, seed: int, mode: Optional[str] = None) -> ExperimentConfig:
    cfg = copy.deepcopy(cfg)
    cfg.train.seed = seed
    cfg.model.seed = seed
    if mode is not None:
        cfg.train.routing = mode
    return cfg


# subcommands ------------------------------------------------------------------

def cmd_train(args, cfg: ExperimentConfig, out: Path) -> dict:
    from .training import Trainer

    if args.modes and len(args.modes) != 1:
        raise UsageError("train runs a single mode; use compare for several")
    mode = args.modes[0] if args.modes else cfg.train.routing
    seeds = args.seeds or [cfg.train.seed]
    corpus = load_corpus(cfg.train.corpus, cfg.train.train_fraction)
    result = {}
    for seed in seeds:
        run_cfg = _with_seed(cfg, seed, mode)
        trainer = Trainer(run_cfg, corpus, out, run_name=f"{mode}_seed{seed}")
        if args.resume:
            trainer.load(args.resume)
        trainer.run()
        ckpt = out / f"checkpoint_{mode}_seed{seed}.ckpt"
        trainer.save(ckpt)
        val, ppl = trainer.evaluate()
        result[f"{mode}_seed{seed}"] = {"final_val_loss": val, "ppl": ppl, "steps": trainer.step,
                                        "routing_frequency_ratio": trainer.routing_frequency_ratio()
                                        if trainer.model.moe_layers and trainer.history else []}
        logger.info("%s seed %d: val %.4f", mode, seed, val)
    write_json(out / "summary.json", result)
    return {"seeds": seeds}


def cmd_compare(args, cfg: ExperimentConfig, out: Path) -> dict:
    from .training import compare_runs

    modes = args.modes or ["topk", "default"]
    seeds = args.seeds or [cfg.train.seed]
    summary = compare_runs(cfg, modes, seeds, out_dir=out, workers=_workers(len(modes) * len(seeds)))
    for mode, s in summary["modes_summary"].items():
        logger.info("%s: mean final val %.4f", mode, s["final_val_loss_mean"])
    return {"seeds": seeds}


def cmd_gradcheck(args, cfg: ExperimentConfig, out: Path) -> dict:
    from .gradients import gradcheck_model
    from .training import build_model

    if cfg.model.dtype != "float64":
        raise UsageError("gradcheck needs --precision 64")
    modes = args.modes or list(ROUTING_MODES)
    seed = (args.seeds or [cfg.train.seed])[0]
    rng = np.random.default_rng(seed)
    vocab = cfg.model.vocab_size
    inputs = rng.integers(0, vocab, size=(args.batch, args.seq))
    targets = rng.integers(0, vocab, size=(args.batch, args.seq))
    results, failed = {}, []
    for mode in modes:
        model = build_model(_with_seed(cfg, seed, mode), vocab)
        if mode == "default":
            for layer in model.moe_layers:
                layer.bank.vectors[:] = rng.standard_normal(layer.bank.vectors.shape) * 0.1
        report = gradcheck_model(model, inputs, targets, mode, n_probes=args.probes, seed=seed)
        name, worst = report.worst()
        results[mode] = {"max_rel_error": report.max_rel_error, "worst_param": name,
                         "per_param": report.per_param, "passed": report.max_rel_error < args.tol}
        logger.info("gradcheck %s: max rel error %.3e (%s)", mode, report.max_rel_error, name)
        if report.max_rel_error >= args.tol:
            failed.append(mode)
    write_json(out / "gradcheck.json", {"tolerance": args.tol, "modes": results})
    if failed:
        raise NumericError(f"gradient check exceeded tolerance {args.tol} in modes {failed}")
    return {"seeds": [seed]}


def cmd_gradsim(args, cfg: ExperimentConfig, out: Path) -> dict:
    from .gradients import grad_report, write_grad_reports
    from .training import Trainer

    seeds = args.seeds or [cfg.train.seed]
    modes = args.modes or ["topk", "default"]
    n = cfg.model.n_experts
    ks = args.ks or sorted({2 ** i for i in range(int(np.log2(n)) + 1)} | {n})
    if any(not 1 <= k <= n for k in ks):
        raise ConfigError(f"--ks values must lie in [1, {n}]")
    corpus = load_corpus(cfg.train.corpus, cfg.train.train_fraction)
    t = cfg.train
    stages = {"init": [], "trained": []}
    for seed in seeds:
        trainer = Trainer(_with_seed(cfg, seed), corpus)
        batches = [sample_batch(corpus.val, t.batch_size, t.seq_len, seed + 10_000, b) for b in range(args.batches)]
        for stage in ("init", "trained"):
            if stage == "trained":
                trainer.run(args.warmup)
            for k in ks:
                for mode in modes:
                    stages[stage].append(grad_report(trainer.model, batches, mode, top_k=k, seed=seed))
    for stage, reports in stages.items():
        write_grad_reports(reports, out / f"gradsim_{stage}.csv", out / f"gradsim_{stage}.jsonl")
    return {"seeds": seeds}


def cmd_analyze(args, cfg: ExperimentConfig, out: Path) -> dict:
    from .analysis import analyze_model
    from .checkpoint import load_checkpoint
    from .training import build_model

    path = Path(args.checkpoint)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    header, _ = read_checkpoint(path)
    ckpt_cfg = ExperimentConfig.from_dict(header["config"]).with_overrides(args.overrides)
    corpus = load_corpus(ckpt_cfg.train.corpus, ckpt_cfg.train.train_fraction)
    model = build_model(ckpt_cfg, corpus.vocab_size)
    load_checkpoint(path, model)
    seq = ckpt_cfg.train.seq_len
    inputs, _ = eval_windows(corpus.val, seq, args.windows)
    tags, _ = eval_windows(corpus.val_tags, seq, args.windows)
    bs = ckpt_cfg.train.batch_size
    batches = [inputs[i:i + bs] for i in range(0, len(inputs), bs)]
    analyze_model(model, batches, out, tags=tags.reshape(-1), tag_names=corpus.tag_names)
    return {"seeds": [ckpt_cfg.train.seed], "checkpoint": str(path), "config_override": ckpt_cfg.to_dict()}


def cmd_bench(args, cfg: ExperimentConfig, out: Path) -> dict:
    from .training import bank_memory_scalars, throughput_bench

    modes = args.modes or ["topk", "default"]
    rates = throughput_bench(cfg, modes, windows=args.windows, steps_per_window=args.steps_per_window)
    base = rates[modes[0]]
    write_json(out / "bench.json", {
        "tokens_per_sec": rates,
        "relative_to_" + modes[0]: {m: r / base for m, r in rates.items()},
        "bank_memory_scalars": bank_memory_scalars(cfg.model),
    })
    for m, r in rates.items():
        logger.info("%s: %.0f tokens/s", m, r)
    return {"seeds": [cfg.train.seed]}


COMMANDS = {"train": cmd_train, "compare": cmd_compare, "gradcheck": cmd_gradcheck,
            "gradsim": cmd_gradsim, "analyze": cmd_analyze, "bench": cmd_bench}


def _artifact_hashes(out: Path) -> dict[str, str]:
    return {str(p.relative_to(out)): git_blob_hash(p.read_bytes())
            for p in sorted(out.rglob("*")) if p.is_file() and p.name != "manifest.json"}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv``, run the subcommand and return an exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out or Path("runs") / args.command)
    try:
        cfg = _load_config(args)
        out.mkdir(parents=True, exist_ok=True)
        extra = COMMANDS[args.command](args, cfg, out) or {}
        seeds = extra.pop("seeds", [cfg.train.seed])
        write_manifest(out, args.command, cfg.to_dict(), seeds,
                       {"argv": list(argv) if argv is not None else sys.argv[1:],
                        "config_hash": cfg.content_hash(), "artifacts": _artifact_hashes(out), **extra})
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CorpusError, CheckpointError, CheckFailed, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
