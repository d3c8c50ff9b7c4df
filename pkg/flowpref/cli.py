"""CLI argument parsing and main logic for flowpref."""

import argparse
import json
import logging
import os
import sys
from argparse import Namespace
from typing import Any, Dict, List, Optional, Union, get_args, get_origin

from . import __version__
from .cfm import Stage
from .config import config_from_dict, config_keys, parse_config
from .errors import (
    ConfigurationError,
    FlowprefError,
    NumericalError,
    PersistenceError,
    ScoringError,
)
from .pipeline import ABLATION_AXES, Pipeline

logger = logging.getLogger(__name__)

LOG_LEVELS = {
    "quiet": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging() -> str:
    """Set the root log level from DRP_LOG and return the mode in effect."""
    mode = os.environ.get("DRP_LOG", "info").strip().lower()
    unknown = mode not in LOG_LEVELS
    if unknown:
        mode = "info"
    logging.basicConfig(level=LOG_LEVELS[mode], format=LOG_FORMAT, force=True)
    if unknown:
        logger.warning(
            "DRP_LOG=%r is not one of %s; using info",
            os.environ.get("DRP_LOG"),
            ", ".join(LOG_LEVELS),
        )
    return mode


def parse_override(key: str, text: str, kind: Any) -> Any:
    """Turn a command-line string into the JSON value a config key expects."""
    origin = get_origin(kind)
    try:
        if origin is Union:
            if text.strip().lower() in ("null", "none"):
                return None
            inner = [arg for arg in get_args(kind) if arg is not type(None)][0]
            return parse_override(key, text, inner)
        if origin is tuple:
            return json.loads(text)
        if kind is bool:
            lowered = text.strip().lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"expected true or false, got {text!r}")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except (ValueError, json.JSONDecodeError) as e:
        raise ConfigurationError(str(e), key=key)
    return text


# every config key gets a --flag; only these show up in --help
DOCUMENTED_FLAGS = {
    "seed": "Run seed",
    "epochs": "Pretraining epochs",
    "cfg_scale": "Classifier-free guidance scale (default: 4)",
    "beta": "DPO beta (default: 2000)",
    "gap": "Minimum winner-loser score gap (default: 0.4)",
    "dpo_epochs": "DPO epochs (default: 8)",
    "winner_source": "generated or ground-truth",
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("configuration overrides")
    group.add_argument("--config", help="Flat JSON config file")
    group.add_argument("--out", default="runs", help="Output directory (default: runs)")
    for key in config_keys():
        group.add_argument(
            f"--{key.replace('_', '-')}",
            dest=f"cfg_{key}",
            metavar="VALUE",
            default=None,
            help=DOCUMENTED_FLAGS.get(key, argparse.SUPPRESS),
        )


def create_parser() -> argparse.ArgumentParser:
    """Create and configure argument parser."""
    common = argparse.ArgumentParser(add_help=False)
    _add_config_flags(common)

    parser = argparse.ArgumentParser(
        prog="flowpref",
        description="Flow-matching generation with preference optimization on "
        "synthetic latent sequences",
        epilog="""
Examples:
  flowpref gen-data --out runs/demo
  flowpref train --out runs/demo --epochs 20
  flowpref train --out runs/demo --stage sft
  flowpref dpo --out runs/demo --checkpoint runs/demo/sft.drpc --beta 2000
  flowpref sample --out runs/demo --checkpoint runs/demo/dpo.drpc --cfg-scale 4
  flowpref eval --out runs/demo --samples runs/demo/samples.drpd \\
      --reference runs/demo/heldout.drpd
  flowpref ablate --out runs/demo --checkpoint runs/demo/sft.drpc --axes gap,epochs
        """,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("gen-data", parents=[common], help="Generate datasets")

    train = commands.add_parser("train", parents=[common], help="Pretrain or SFT")
    train.add_argument(
        "--stage",
        choices=[s.value for s in Stage],
        default=Stage.PRETRAIN.value,
        help="Training stage (default: pretrain)",
    )
    train.add_argument("--checkpoint", help="Checkpoint to start from")
    train.add_argument("--dataset", help="Dataset file (default: <out>/dataset.drpd)")
    train.add_argument(
        "--full-scale-lengths",
        action="store_true",
        help="Crop at 2048 (pretrain) or 6144 (SFT) frames unless set explicitly",
    )

    sample = commands.add_parser("sample", parents=[common], help="Generate samples")
    sample.add_argument("--checkpoint", required=True, help="Checkpoint to sample")
    sample.add_argument("--prompts", help="Dataset to draw prompts from")
    sample.add_argument("--lyrics", help="Lyrics sung by every sample, spread evenly")
    sample.add_argument(
        "--output", default="samples.drpd", help="Output file name inside --out"
    )

    dpo = commands.add_parser("dpo", parents=[common], help="Mine pairs and run DPO")
    dpo.add_argument("--checkpoint", required=True, help="Reference checkpoint")
    dpo.add_argument("--pairs", help="Existing pair store to train on")
    dpo.add_argument("--dataset", help="Dataset to draw prompts from")

    evaluate = commands.add_parser("eval", parents=[common], help="Objective metrics")
    evaluate.add_argument("--samples", required=True, help="Generated samples file")
    evaluate.add_argument("--reference", required=True, help="Reference samples file")

    ablate = commands.add_parser("ablate", parents=[common], help="DPO ablation sweep")
    ablate.add_argument("--checkpoint", required=True, help="Checkpoint before DPO")
    ablate.add_argument(
        "--axes",
        default=",".join(ABLATION_AXES),
        help=f"Comma-separated axes (default: {','.join(ABLATION_AXES)})",
    )
    ablate.add_argument("--dataset", help="Dataset to draw prompts from")

    return parser


def resolve_config(args: Namespace) -> Any:
    """Config file (or defaults) with command-line overrides applied."""
    base = parse_config(args.config)
    if getattr(args, "full_scale_lengths", False):
        base = base.with_full_scale_lengths()
    overrides: Dict[str, Any] = {}
    for key, kind in config_keys().items():
        text: Optional[str] = getattr(args, f"cfg_{key}", None)
        if text is not None:
            overrides[key] = parse_override(key, text, kind)
    if not overrides:
        return base
    cfg = config_from_dict(overrides, base)
    logger.info("overrides: %s", json.dumps(overrides, sort_keys=True))
    return cfg


def run_command(args: Namespace, verbose: bool) -> None:
    """Dispatch a parsed subcommand to the pipeline."""
    cfg = resolve_config(args)
    pipeline = Pipeline(cfg, args.out, verbose=verbose)

    if args.command == "gen-data":
        pipeline.gen_data()
    elif args.command == "train":
        pipeline.train(Stage(args.stage), args.checkpoint, args.dataset)
    elif args.command == "sample":
        pipeline.sample(args.checkpoint, args.prompts, args.output, args.lyrics)
    elif args.command == "dpo":
        pipeline.dpo(args.checkpoint, args.pairs, args.dataset)
    elif args.command == "eval":
        pipeline.evaluate(args.samples, args.reference)
    elif args.command == "ablate":
        axes = [axis.strip() for axis in args.axes.split(",") if axis.strip()]
        pipeline.ablate(args.checkpoint, axes, args.dataset)


def run(argv: Optional[List[str]] = None) -> int:
    """Parse `argv`, run one stage and return the exit status."""
    parser = create_parser()
    args = parser.parse_args(argv)
    mode = configure_logging()

    try:
        run_command(args, verbose=mode != "quiet")
    except ConfigurationError as e:
        print(f"❌ Configuration Error: {e}")
        return 1
    except PersistenceError as e:
        print(f"❌ File Format Error: {e}")
        return 1
    except NumericalError as e:
        print(f"❌ Numerical Error: {e}")
        return 1
    except ScoringError as e:
        print(f"❌ Scoring Error: {e}")
        return 1
    except (ValueError, FlowprefError) as e:
        print(f"❌ Input Error: {e}")
        return 1
    except OSError as e:
        print(f"❌ File Error: {e}")
        return 1
    except KeyboardInterrupt:
        print("\n⚠️  Operation cancelled by user")
        return 1
    except Exception as e:
        print(f"❌ Unexpected Error: {e}")
        return 1
    return 0


def main() -> None:
    """Main CLI entry point."""
    sys.exit(run())


if __name__ == "__main__":
    main()
