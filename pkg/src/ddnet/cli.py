"""Command-line entry point: train, infer, eval, gradcheck, synth, params.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (including failed gradient checks).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import checkpoint, data, metrics, suite
from .config import TrainConfig, apply_overrides, config_from_text, config_to_text
from .model import ConfigError, build, param_count
from .tensor import NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

REFERENCE_PARAMS = 3_334_829


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load_config(args) -> TrainConfig:
    base = TrainConfig.preset(args.preset)
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        base = config_from_text(text, base)
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["train.seed"] = str(args.seed)
    cfg = apply_overrides(base, overrides)
    cfg.validate()
    return cfg


def _shared(p: argparse.ArgumentParser, config: bool = True) -> None:
    p.add_argument("--seed", type=int, default=None, help="random seed")
    p.add_argument("--out", default=None, help="output directory")
    if config:
        p.add_argument("--config", default=None, help="key = value config file with [model]/[train]")
        p.add_argument("--preset", default="desk", choices=("full", "desk", "tiny"))
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field, e.g. --set train.epochs=5")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ddnet", description="Dense deformable saliency network toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train on a manifest directory")
    _shared(p)
    p.add_argument("--data", required=True, help="directory holding train.txt and test.txt")

    p = sub.add_parser("infer", help="write saliency maps for a directory of images")
    _shared(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)

    p = sub.add_parser("eval", help="score predicted maps against masks")
    _shared(p, config=False)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _shared(p, config=False)
    p.add_argument("--scope", choices=("ops", "model"), default="ops")
    p.add_argument("--seeds", type=int, default=1, help="number of seeds per operator")
    p.add_argument("--preset", default="desk", choices=("full", "desk", "tiny"),
                   help="model size for --scope model (desk takes a few minutes)")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _shared(p, config=False)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--size", type=int, default=64)

    p = sub.add_parser("params", help="print the trainable parameter count")
    _shared(p)
    p.add_argument("--breakdown", action="store_true", help="list every parameter tensor")
    return parser


def _cmd_train(args, out) -> int:
    cfg = _load_config(args)
    root = Path(args.data)
    train_m = data.read_manifest(root / "train.txt", "train")
    test_path = root / "test.txt"
    test_m = data.read_manifest(test_path, "test") if test_path.is_file() else None
    if test_m is not None and len(test_m) == 0:
        test_m = None
    out_dir = Path(args.out or "run")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.ini").write_text(config_to_text(cfg), encoding="utf-8")
    from .train import train
    with open(out_dir / "train.log", "w", encoding="utf-8", newline="\n") as logf:
        def log(line):
            print(line, file=out, flush=True)
            logf.write(line + "\n")
        train(cfg, train_m, test_m, out_dir, log=log)
    return EXIT_OK


def _cmd_infer(args, out) -> int:
    from .train import infer
    model, _ = checkpoint.load(args.checkpoint)
    infer(model, args.images, args.out or "pred", log=lambda s: print(s, file=out))
    return EXIT_OK


def _cmd_eval(args, out) -> int:
    preds, gts = data.list_images(args.pred), data.list_images(args.gt)
    unmatched = sorted(set(preds) ^ set(gts))
    if unmatched:
        print(f"error: unmatched names: {', '.join(unmatched)}", file=sys.stderr)
        return EXIT_DATA
    pred_maps = {k: data.load_saliency(v) for k, v in preds.items()}
    masks = {k: data.load_mask(v) for k, v in gts.items()}
    mean, rows = metrics.evaluate_pairs(pred_maps, masks, workers=args.workers)
    print(metrics.to_table(rows, mean), end="", file=out)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        Path(args.out, "metrics.csv").write_text(metrics.to_csv(rows, mean), encoding="utf-8")
    return EXIT_OK


def _cmd_gradcheck(args, out) -> int:
    seed = args.seed or 0
    if args.scope == "ops":
        results = suite.run_ops(seeds=range(seed, seed + args.seeds))
    else:
        results = [suite.run_model(seed, args.preset)]
    print(suite.format_results(results), file=out)
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def _cmd_synth(args, out) -> int:
    target = Path(args.out or "synth")
    try:
        train_m, test_m = data.synth_generate(args.n, args.size, args.seed or 0, target)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(f"wrote {len(train_m) + len(test_m)} pairs to {target} "
          f"(train {len(train_m)}, test {len(test_m)})", file=out)
    return EXIT_OK


def _cmd_params(args, out) -> int:
    cfg = _load_config(args)
    model = build(cfg.model, seed=cfg.seed)
    if args.breakdown:
        for name, p in model.named_parameters():
            print(f"{name} {'x'.join(map(str, p.dims))} {p.data.size}", file=out)
    print(f"params {param_count(model)}", file=out)
    if args.preset == "full" and not args.config:
        print(f"reference {REFERENCE_PARAMS} (not expected to match; widths are defaults)", file=out)
    return EXIT_OK


COMMANDS = {
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "synth": _cmd_synth,
    "params": _cmd_params,
}


def main(argv: Optional[List[str]] = None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args, out)
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    # NumericError is also a ValueError, so it must be matched first
    except (NumericError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (data.DataError, checkpoint.CheckpointError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
