"""Command-line entry point: ``c2falign {generate,train,eval,verify}``.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every command prints
its fully resolved configuration (defaults expanded) as JSON before running.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .datasynth import SynthConfig, config_dict, generate_dataset, read_features, train_test_split, write_features
from .errors import C2FError
from .retrieval import evaluate
from .trainer import TrainConfig, Trainer, config_hash, load_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports bad usage by raising instead of exiting with code 2."""

    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="c2falign", description="Coarse-to-fine speech-image alignment on synthetic features.")
    sub = parser.add_subparsers(dest="command", metavar="{generate,train,eval,verify}", parser_class=_Parser)
    d = SynthConfig()

    gen = sub.add_parser("generate", help="write a synthetic train/test feature corpus")
    gen.add_argument("--out", required=True, type=Path, help="output directory")
    gen.add_argument("--classes", type=int, default=d.num_classes)
    gen.add_argument("--images-per-class", type=int, default=d.images_per_class)
    gen.add_argument("--captions", type=int, default=d.captions_per_image, help="captions per image")
    gen.add_argument("--sigma", type=float, default=d.noise_sigma, help="observation noise")
    gen.add_argument("--weak-rate", type=float, default=d.weak_pair_rate, help="fraction of weakly paired captions")
    gen.add_argument("--seed", type=int, default=d.seed)

    tr = sub.add_parser("train", help="train a model and write a checkpoint")
    tr.add_argument("--config", required=True, type=Path, help="training config JSON (missing keys take defaults)")
    tr.add_argument("--data", required=True, type=Path, help="directory written by generate")
    tr.add_argument("--out", required=True, type=Path, help="checkpoint path")
    tr.add_argument("--no-queue", action="store_true", help="contrast against the current batch only")
    tr.add_argument("--no-mod", action="store_true", help="disable momentum distillation")
    tr.add_argument("--no-sim-hard", action="store_true", help="disable the hard-negative matching objective")
    tr.add_argument("--log-every", type=int, default=0, help="log losses every N steps (0: off)")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    ev.add_argument("--ckpt", required=True, type=Path)
    ev.add_argument("--data", required=True, type=Path)
    ev.add_argument("--k", type=int, default=8, help="candidates reranked by the matching head")
    ev.add_argument("--report", required=True, type=Path, help="JSON report path")

    sub.add_parser("verify", help="run gradient, sampler and queue self-checks")
    return parser


def _print_config(doc: dict) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True), flush=True)


def cmd_generate(args) -> int:
    cfg = SynthConfig(num_classes=args.classes, images_per_class=args.images_per_class,
                      captions_per_image=args.captions, noise_sigma=args.sigma,
                      weak_pair_rate=args.weak_rate, seed=args.seed)
    _print_config({"command": "generate", "out": str(args.out), "synth": config_dict(cfg)})
    train, test = train_test_split(generate_dataset(cfg), cfg)
    for split in (train, test):
        write_features(split, args.out)
        print(f"wrote {split.split}: {split.num_images} images, {split.num_speech} captions")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = TrainConfig.from_json(args.config)
    cfg = cfg.replace(use_queue=cfg.use_queue and not args.no_queue, use_mod=cfg.use_mod and not args.no_mod,
                      use_sim_hard=cfg.use_sim_hard and not args.no_sim_hard)
    data = read_features(args.data, "train")
    trainer = Trainer(cfg, data)
    _print_config({"command": "train", "data": str(args.data), "out": str(args.out), "train": cfg.to_dict(),
                   "model": trainer.model_cfg.__dict__, "config_hash": config_hash(cfg, trainer.model_cfg)})
    history = trainer.run(log_every=args.log_every)
    trainer.save(args.out)
    print(f"trained {trainer.step} steps, final loss {history[-1]:.4f}; checkpoint {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.k < 1:
        raise UsageError(f"--k must be >= 1, got {args.k}")
    ck = load_checkpoint(args.ckpt)
    chash = config_hash(ck.train_cfg, ck.state.cfg)
    rerank = ck.train_cfg.use_sim_hard
    _print_config({"command": "eval", "ckpt": str(args.ckpt), "data": str(args.data), "k": args.k,
                   "rerank": rerank, "report": str(args.report), "train": ck.train_cfg.to_dict(),
                   "config_hash": chash})
    test = read_features(args.data, "test")
    report = evaluate(ck.state, test, k=args.k, rerank=rerank, seed=ck.train_cfg.seed, config_hash=chash)
    Path(args.report).write_text(report.to_json() + "\n")
    print(report.table())
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_all

    _print_config({"command": "verify"})
    results = run_all()
    for r in results:
        print(r.line(), flush=True)
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "verify": cmd_verify}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except (C2FError, OSError) as exc:
        print(f"c2falign: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
