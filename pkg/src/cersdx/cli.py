"""``cersdx`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .config import SCHEMAS, load_config_file, resolve
from .errors import CersError, ConfigError

log = logging.getLogger("cersdx")


def _flag(sub, name, type_=str, help_=None, action=None):
    dest = name.replace("-", "_")
    if action:
        sub.add_argument(f"--{name}", dest=dest, action=action, default=None, help=help_)
    else:
        sub.add_argument(f"--{name}", dest=dest, type=type_, default=None, help=help_)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cersdx", description="Slide tiling, MIL, open-set and evaluation tools.")
    parser.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command", required=True)

    def sub(name, help_):
        p = subs.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config file; flags override its values")
        return p

    p = sub("tile", "segment a thumbnail and write the patch grid CSV")
    _flag(p, "thumb", help_="PNG or PPM (P6) thumbnail")
    _flag(p, "thumb-mag", float)
    _flag(p, "target-mag", float)
    _flag(p, "patch", int)
    _flag(p, "min-frac", float)
    _flag(p, "out")
    for name in ("median-window", "closing-radius", "min-area", "min-hole-area"):
        _flag(p, name, int)
    _flag(p, "on-uniform")
    _flag(p, "sample-fraction", float)
    _flag(p, "sample-count", int)
    _flag(p, "seed", int)

    p = sub("synth", "write a synthetic CEB1 cohort plus manifest.csv")
    _flag(p, "out")
    for name in ("n-bags", "instances", "dim", "k-signal", "n-ood", "seed"):
        _flag(p, name, int)
    _flag(p, "mu", float)
    _flag(p, "nu", float)

    p = sub("train-mil", "cross-validated gated-attention MIL training")
    for name in ("manifest", "out", "preds", "labels-out"):
        _flag(p, name)
    for name in ("folds", "seed", "epochs", "patience", "latent", "hidden"):
        _flag(p, name, int)
    for name in ("lr", "weight-decay", "dropout"):
        _flag(p, name, float)
    _flag(p, "multi-branch", action="store_true")

    p = sub("topk", "top-K attention patches of one bag")
    _flag(p, "bag")
    _flag(p, "model")
    _flag(p, "k", int)
    _flag(p, "out")

    p = sub("train-arpl", "fit a reciprocal-point open-set head")
    for name in ("manifest", "ood-manifest", "body", "out", "scores-out"):
        _flag(p, name)
    for name in ("seed", "epochs", "patience", "mil-epochs", "mil-patience", "latent", "hidden"):
        _flag(p, name, int)
    for name in ("gamma", "lambda-o", "lr", "mil-lr"):
        _flag(p, name, float)
    _flag(p, "joint", action="store_true")

    p = sub("detect", "Otsu-threshold OOD detection over confidences")
    for name in ("scores", "head", "manifest", "ood-manifest", "out", "summary"):
        _flag(p, name)
    _flag(p, "threshold", float)
    _flag(p, "bootstrap", int)
    _flag(p, "seed", int)

    p = sub("probe", "linear probe on frozen features")
    for name in ("features", "labels", "out"):
        _flag(p, name)
    for name in ("classes", "epochs", "batch-size", "seed"):
        _flag(p, name, int)
    _flag(p, "lr", float)

    p = sub("zeroshot", "prompt-similarity zero-shot classification")
    for name in ("embeddings", "prompts", "out"):
        _flag(p, name)
    _flag(p, "temperature", float)

    p = sub("textmetrics", "ROUGE-L / BLEU-n over aligned caption files")
    for name in ("cand", "ref", "metrics", "out"):
        _flag(p, name)

    p = sub("calibrate", "threshold at a target sensitivity")
    for name in ("preds", "labels", "out"):
        _flag(p, name)
    _flag(p, "target", float)

    p = sub("eval", "metrics with bootstrap confidence intervals")
    for name in ("preds", "labels", "metrics", "out", "format"):
        _flag(p, name)
    _flag(p, "bootstrap", int)
    _flag(p, "seed", int)
    _flag(p, "threshold", float)

    p = sub("report", "convert a JSON report (e.g. to CSV)")
    _flag(p, "in", help_="report JSON")
    _flag(p, "out")
    _flag(p, "format")

    p = subs.add_parser("run", help="chained synth -> train-mil -> eval -> calibrate pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--seed", type=int, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if args.command == "run":
            cfg = load_config_file(args.config)
            if args.seed is not None:
                cfg["seed"] = args.seed
            report = pipeline.run_pipeline(cfg, args.out_dir)
            print(json.dumps({k: v for k, v in report.to_dict().items() if k != "timestamp"}, sort_keys=True))
            return 0
        flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
        if args.command == "report":
            flags["input"] = flags.pop("in")
        file_cfg = load_config_file(args.config) if args.config else None
        params = resolve(args.command, flags, file_cfg)
        result = pipeline.COMMANDS[args.command](params)
        log.info("%s: %s", args.command, result)
        return 0
    except CersError as exc:
        print(f"cersdx {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"cersdx {args.command}: I/O error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
