"""Command-line interface.

Configuration precedence, highest first: explicit flags, the STAINKIT_SEED
environment variable (seed only), the --config JSON file, built-in defaults.
Exit codes: 0 success, 1 hard error, 2 completed with skipped files.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import ConfigError, RunConfig, load_run_config
from .pipeline import (EXIT_ERROR, PipelineError, cmd_evaluate, cmd_normalize,
                       cmd_select_template, cmd_tile, cmd_train)

SEED_ENV_VAR = "STAINKIT_SEED"

_COMMANDS = {
    "select-template": cmd_select_template,
    "tile": cmd_tile,
    "normalize": cmd_normalize,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
}


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--input-dir", dest="input_dir")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stainkit",
                                     description="Stain normalization toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("select-template", help="pick the tile closest to the dataset's "
                                               "mean color histogram")
    _add_common(p)
    p.add_argument("--histogram-bins", dest="histogram_bins", type=int)

    p = sub.add_parser("tile", help="cut images into fixed-size tiles")
    _add_common(p)
    p.add_argument("--tile-size", dest="tile_size", type=int)
    p.add_argument("--edge-policy", dest="edge_policy", choices=("retain", "discard"))

    p = sub.add_parser("normalize", help="re-render tiles in a template's palette")
    _add_common(p)
    p.add_argument("--template", help="template image path, or 'auto'")
    p.add_argument("--method", choices=("reinhard", "macenko", "vahadane", "model"))
    p.add_argument("--checkpoint", help="trained model checkpoint (method 'model')")
    p.add_argument("--histogram-bins", dest="histogram_bins", type=int)

    p = sub.add_parser("train", help="train the restaining model on two domains")
    _add_common(p)
    p.add_argument("--domain-a-dir", dest="domain_a_dir")
    p.add_argument("--domain-b-dir", dest="domain_b_dir")
    p.add_argument("--steps", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)

    p = sub.add_parser("evaluate", help="score normalized tiles against references")
    _add_common(p)
    p.add_argument("--reference-dir", dest="reference_dir")

    return parser


_TRAIN_KEYS = {"steps", "learning_rate"}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    if args.config:
        cfg = load_run_config(args.config)
    else:
        cfg = RunConfig()
    data = cfg.to_dict()
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            data["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}")
    for key, value in vars(args).items():
        if key in ("config", "command", "verbose") or value is None:
            continue
        if key in _TRAIN_KEYS:
            data["train"][key] = value
        else:
            data[key] = value
    return RunConfig.from_dict(data)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        code, doc = _COMMANDS[args.command](cfg)
    except (ConfigError, PipelineError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if args.command == "select-template":
        print(doc["selected_template"])
    return code


if __name__ == "__main__":
    sys.exit(main())
