"""Command-line entry point: ``tokenstyle <command> [options]``.

Exit codes: 0 success, 1 unexpected failure, 2 usage, 3 config, 4 missing
prerequisite, 5 numeric, 6 file I/O.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time

import numpy as np

from . import __version__
from .artifacts import Workspace, load_tokenizer, load_translator, require
from .config import load_config
from .errors import ToolError, UsageError
from .imageio import read_ppm, write_ppm
from .pipeline import (ABLATE_HEADER, BENCH_HEADER, EVAL_HEADER, run_ablate, run_bench,
                       run_eval, run_gen_data, run_train_scorer, run_train_tokenizer,
                       stylize_images)
from .toyworld import STYLES
from .trainer import run_finetune, run_pretrain

log = logging.getLogger("tokenstyle")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default="work", help="artifact directory (default: work)")
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="tokenstyle", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"tokenstyle {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    sub.add_parser("gen-data", parents=[common], help="render train and held-out scenes")
    sub.add_parser("train-tokenizer", parents=[common], help="train the image tokenizer")
    p = sub.add_parser("pretrain", parents=[common], help="upscaling pretraining")
    p.add_argument("--no-scaling", action="store_true",
                   help="encoder reads the full-resolution grid")
    sub.add_parser("train-scorer", parents=[common], help="train the image-text scorer")
    p = sub.add_parser("finetune", parents=[common], help="style fine-tuning")
    p.add_argument("--style", required=True, choices=STYLES)
    p.add_argument("--no-captions", action="store_true", help="reward uses the style text alone")
    p.add_argument("--no-scaling", action="store_true",
                   help="start from the no-scaling pretrained translator")
    p = sub.add_parser("stylize", parents=[common], help="stylize one PPM image")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--style-ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sample", action="store_true", help="sample tokens instead of argmax")
    p = sub.add_parser("eval", parents=[common], help="pre vs post fine-tune report")
    p.add_argument("--style", action="append", choices=STYLES,
                   help="style to evaluate (repeatable; default all)")
    p = sub.add_parser("bench", parents=[common], help="parallel vs token-by-token timing")
    p.add_argument("--ckpt", help="translator checkpoint (default: pretrained)")
    p.add_argument("--images", type=int, default=8)
    p.add_argument("--no-ar", action="store_true", help="skip the token-by-token baseline")
    p.add_argument("--batched", action="store_true",
                   help="translate all images in one batch (reported separately)")
    p = sub.add_parser("ablate", parents=[common], help="full / no-captions / no-scaling")
    p.add_argument("--style", default="pixelate", choices=STYLES)
    return parser


def _print_table(header, rows) -> None:
    print("\t".join(header))
    for row in rows:
        print("\t".join(f"{v:.6f}" if isinstance(v, float) else str(v) for v in row))


def _summary(name: str, out: dict) -> None:
    parts = [f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}" for k, v in out.items()
             if not isinstance(v, list)]
    print(f"{name}: " + " ".join(parts))


def dispatch(args) -> None:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    cfg = load_config(args.config, overrides)
    ws = Workspace(args.workdir)
    started = time.perf_counter()
    cmd = args.command
    if cmd == "gen-data":
        _summary(cmd, run_gen_data(cfg, ws))
    elif cmd == "train-tokenizer":
        _summary(cmd, run_train_tokenizer(cfg, ws))
    elif cmd == "pretrain":
        _summary(cmd, run_pretrain(cfg, ws, scaling=False if args.no_scaling else None))
    elif cmd == "train-scorer":
        _summary(cmd, run_train_scorer(cfg, ws))
    elif cmd == "finetune":
        _summary(cmd, run_finetune(cfg, ws, args.style,
                                   use_captions=False if args.no_captions else None,
                                   scaling=not args.no_scaling))
    elif cmd == "stylize":
        tokenizer = load_tokenizer(require(ws.tokenizer, "train-tokenizer"))
        nat, _ = load_translator(args.style_ckpt, "finetune")
        image = read_ppm(args.input).astype(np.float32)
        rng = np.random.default_rng(cfg.seed) if args.sample else None
        write_ppm(args.out, stylize_images(nat, tokenizer, image[None], rng)[0])
    elif cmd == "eval":
        _print_table(EVAL_HEADER, run_eval(cfg, ws, args.style))
    elif cmd == "bench":
        _print_table(BENCH_HEADER, run_bench(cfg, ws, args.ckpt, args.images,
                                             autoregressive=not args.no_ar, batched=args.batched))
    elif cmd == "ablate":
        _print_table(ABLATE_HEADER, run_ablate(cfg, ws, args.style))
    log.info("%s finished in %.1f s", cmd, time.perf_counter() - started)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required (see --help)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        dispatch(args)
    except ToolError as exc:
        print(f"tokenstyle: {exc.category} error: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        return 130
    return 0


if __name__ == "__main__":
    sys.exit(main())
