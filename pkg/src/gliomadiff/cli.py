"""Command-line entry point: ``gliomadiff <command> --config smoke.json ...``.

Precedence: command-line flags override values in the JSON config, which
override the built-in defaults. Failures print one JSON object on stderr
(``{"error": ..., "message": ..., "keys": [...]}``) and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import List, Optional

from . import experiment as ex

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_OTHER = 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="smoke.json",
                        help="JSON experiment config (bundled names smoke.json / full.json also work)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--device", help="torch device, e.g. cpu or cuda")
    common.add_argument("-v", "--verbose", action="store_true")

    ckpt = argparse.ArgumentParser(add_help=False)
    ckpt.add_argument("--checkpoint", help="multitask checkpoint (default <out>/gliomadiff.pt)")
    ckpt.add_argument("--warpnet-checkpoint", help="warpnet checkpoint (default <out>/warpnet.pt)")

    p = argparse.ArgumentParser(prog="gliomadiff", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("make-phantoms", parents=[common], help="write synthetic train/test series")
    sub.add_parser("train-deform", parents=[common], help="train the deformation network")
    t = sub.add_parser("train", parents=[common], help="train the multitask diffusion model")
    t.add_argument("--checkpoint", help="warpnet checkpoint (default <out>/warpnet.pt)")
    pr = sub.add_parser("predict", parents=[common, ckpt], help="predict one patient at a target day")
    pr.add_argument("--patient", required=True)
    pr.add_argument("--target-day", type=int, required=True)
    sub.add_parser("evaluate", parents=[common, ckpt], help="score the held-out test series")
    sub.add_parser("plot", parents=[common], help="draw figures from evaluation outputs")
    sub.add_parser("run", parents=[common], help="all stages from phantoms to plots")
    return p


def _config(args) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.load(args.config)
    d = cfg.to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    if args.out is not None:
        d["out_dir"] = args.out
    if args.device is not None:
        d["device"] = args.device
    return ex.ExperimentConfig.from_dict(d)


def run(args) -> List[str]:
    cfg = _config(args)
    c = args.command
    if c == "make-phantoms":
        out = [cfg.manifest("train"), cfg.manifest("test")]
        ex.make_phantoms(cfg)
    elif c == "train-deform":
        out = [ex.train_deform(cfg)]
    elif c == "train":
        out = [ex.train_model(cfg, args.checkpoint)]
    elif c == "predict":
        out = [ex.predict_one(cfg, args.patient, args.target_day, args.checkpoint,
                              args.warpnet_checkpoint)]
    elif c == "evaluate":
        out = [ex.evaluate(cfg, args.checkpoint, args.warpnet_checkpoint)]
    elif c == "plot":
        out = ex.plot(cfg)
    elif c == "run":
        out = [ex.run_all(cfg)]
    else:  # pragma: no cover - argparse restricts choices
        raise AssertionError(c)
    return [str(o) for o in out]


def _fail(kind: str, exc: BaseException, code: int, keys=()) -> int:
    print(json.dumps({"error": kind, "message": str(exc), "keys": list(keys)}), file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        for path in run(args):
            print(path)
    except ex.ConfigError as e:
        return _fail("config", e, EXIT_CONFIG, e.keys)
    except json.JSONDecodeError as e:
        return _fail("config", e, EXIT_CONFIG)
    except (FileNotFoundError, OSError) as e:
        return _fail("io", e, EXIT_IO)
    except (ValueError, KeyError) as e:
        return _fail("input", e, EXIT_OTHER)
    return 0


if __name__ == "__main__":
    sys.exit(main())
