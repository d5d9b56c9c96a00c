"""Command line entry point: train, eval, compare, mi-check, grad-check, init-config."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .dnc import DncConfig
from .harness import checks
from .harness.compare import compare
from .harness.config import ExperimentConfig, load_config, repeat_copy_desk, save_config
from .harness.trainer import evaluate_checkpoint, load_babi, train
from .mine import mi_check
from .tasks import TaskConfig

U64_MAX = 2 ** 64 - 1


class CliError(RuntimeError):
    pass


def u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v <= U64_MAX:
        raise argparse.ArgumentTypeError(f"{text} is not an unsigned 64-bit integer")
    return v


def positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive count, got {text}")
    return v


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True), flush=True)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    cfg.seed = args.seed
    if args.steps is not None:
        cfg.steps = args.steps
    cfg.validate()
    _emit(train(cfg, args.out, resume=args.resume))
    return 0


def cmd_eval(args) -> int:
    _emit(evaluate_checkpoint(args.checkpoint, args.task, args.n, args.seed, args.config))
    return 0


def cmd_compare(args) -> int:
    text = compare(args.dirs).to_text()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def _table(rows, cols) -> None:
    for r in rows:
        print("\t".join(str(r[c]) if not isinstance(r[c], float) else f"{r[c]:.6g}" for c in cols))


def cmd_mi_check(args) -> int:
    rows = mi_check(seed=args.seed, updates=args.updates)
    print("name\testimate\toracle\ttol\tpassed")
    _table(rows, ("name", "estimate", "oracle", "tol", "passed"))
    if not all(r["passed"] for r in rows):
        raise CliError("MINE validation failed")
    return 0


def cmd_grad_check(args) -> int:
    rows = checks.grad_check_suite(seeds=tuple(range(args.seeds)))
    print("name\tseed\trelerr\ttol\tpassed")
    _table(rows, ("name", "seed", "relerr", "tol", "passed"))
    if not all(r["passed"] for r in rows):
        raise CliError("gradient check failed")
    return 0


def cmd_init_config(args) -> int:
    if args.preset == "repeat-copy":
        cfg = repeat_copy_desk(demon=args.demon)
    elif args.preset == "babi":
        if not args.babi_dir:
            raise CliError("--babi-dir is required for the babi preset")
        task = TaskConfig(kind="babi", babi_dir=args.babi_dir, babi_tasks=[1], babi_max_stories=100)
        V = len(load_babi(task).vocab)
        cfg = ExperimentConfig(
            dnc=DncConfig(input_dim=V, output_dim=V, N=16, W=16, R=1, hidden=128, mask=True),
            task=task, demon_enabled=args.demon, steps=5000, batch_size=16, target_error=0.05,
            eval_samples=100,
        ).validate()
    else:
        task = TaskConfig(kind=args.preset.replace("-", "_"))
        ind, outd = task.dims()
        cfg = ExperimentConfig(dnc=DncConfig(input_dim=ind, output_dim=outd, hidden=64, mask=True),
                               task=task, demon_enabled=args.demon).validate()
    save_config(cfg, args.out)
    _emit({"written": str(args.out), "variant": cfg.variant})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="demon-dnc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one run")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=u64, required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=positive, help="override the configured step budget")
    t.add_argument("--resume", action="store_true", help="continue from out/checkpoint.bin")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--task", required=True, choices=["copy", "repeat_copy", "associative_recall", "babi"])
    e.add_argument("--n", type=int, required=True)
    e.add_argument("--seed", type=u64, required=True)
    e.add_argument("--config", help="run config (default: config.json next to the checkpoint)")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("compare", help="compare completed runs")
    c.add_argument("dirs", nargs="+")
    c.add_argument("--out", help="also write the table to this file")
    c.set_defaults(fn=cmd_compare)

    m = sub.add_parser("mi-check", help="MINE validation suite")
    m.add_argument("--seed", type=u64, default=0)
    m.add_argument("--updates", type=positive, default=4000)
    m.set_defaults(fn=cmd_mi_check)

    g = sub.add_parser("grad-check", help="finite-difference gradient suite")
    g.add_argument("--seeds", type=positive, default=3)
    g.set_defaults(fn=cmd_grad_check)

    i = sub.add_parser("init-config", help="write a preset config")
    i.add_argument("--preset", choices=["repeat-copy", "copy", "associative-recall", "babi"], default="repeat-copy")
    i.add_argument("--demon", action="store_true")
    i.add_argument("--babi-dir")
    i.add_argument("--out", required=True)
    i.set_defaults(fn=cmd_init_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except Exception as exc:  # surfaced as one machine-readable line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr, flush=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
