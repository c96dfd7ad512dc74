"""``druformer`` command-line tool."""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from . import __version__
from .commands import (
    cmd_eval,
    cmd_export_relmaps,
    cmd_gen_data,
    cmd_gradcheck,
    cmd_infer,
    cmd_pretrain_pe,
    cmd_sweep_layers,
    cmd_train,
)
from .config import RunConfig, load_config, with_overrides
from .exceptions import DivergenceError, DruformerError
from .training import SUBSETS

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_DIVERGENCE = 2


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


def _box(text: str) -> List[float]:
    try:
        values = [float(part) for part in text.split(",")]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected cx,cy,w,h, got {text!r}") from e
    if len(values) != 4:
        raise argparse.ArgumentTypeError(f"expected four values cx,cy,w,h, got {text!r}")
    return values


def _add_common(parser: argparse.ArgumentParser, out_required: bool = True) -> None:
    parser.add_argument("--config", type=Path, default=None, help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=None, help="override train.seed")
    parser.add_argument("--out", type=Path, required=out_required, help="output directory or file")


def _add_training(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", type=Path, required=True, help="dataset directory")
    parser.add_argument("--epochs", type=int, default=None, help="override the epoch count of this stage")
    parser.add_argument("--resume", type=Path, default=None, help="checkpoint to resume from")


def _add_ablation(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--dru-layers", type=int, default=None, help="number of DRU layers (1-6)")
    parser.add_argument("--no-dru", action="store_true", help="head reads the entity set directly")
    parser.add_argument("--no-intention", action="store_true", help="drop the intention token")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="druformer", description="Important-object detection with DRUformer")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging verbosity"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_common(gen)
    gen.add_argument("--n", type=int, default=None, help="number of scenes (default: data.n_scenes)")

    pre = sub.add_parser("pretrain-pe", help="pretrain the participants extractor")
    _add_common(pre)
    _add_training(pre)

    train = sub.add_parser("train", help="train the full model")
    _add_common(train)
    _add_training(train)
    _add_ablation(train)
    train.add_argument("--pe-checkpoint", type=Path, default=None, help="pretrained participants extractor")

    ev = sub.add_parser("eval", help="evaluate a trained checkpoint")
    _add_common(ev, out_required=False)
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--data", type=Path, required=True)
    ev.add_argument("--split", default="test", choices=["train", "val", "test"])
    ev.add_argument("--subset", default="all", choices=list(SUBSETS))

    infer = sub.add_parser("infer", help="predict the important object of one image")
    _add_common(infer)
    infer.add_argument("--checkpoint", type=Path, required=True)
    infer.add_argument("--image", type=Path, required=True)
    infer.add_argument("--intention", required=True, help='driving command, e.g. "turn left"')
    infer.add_argument("--label", type=_box, default=None, help="ground-truth box cx,cy,w,h to draw in red")

    export = sub.add_parser("export-relmaps", help="export relationship maps of dataset scenes")
    _add_common(export)
    export.add_argument("--checkpoint", type=Path, required=True)
    export.add_argument("--data", type=Path, required=True)
    export.add_argument("--scenes", type=_int_list, required=True, help="comma-separated scene ids")
    export.add_argument("--top-k", type=int, default=None, help="participants to keep (default: dru.top_k)")

    grad = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    _add_common(grad, out_required=False)
    grad.add_argument("--seeds", type=int, default=100, help="number of random seeds per check")

    sweep = sub.add_parser("sweep-layers", help="train and evaluate across DRU depths and seeds")
    _add_common(sweep)
    sweep.add_argument("--data", type=Path, required=True)
    sweep.add_argument("--layers", type=_int_list, default=[1, 3, 6])
    sweep.add_argument("--seeds", type=_int_list, default=[42, 43, 44])
    sweep.add_argument("--epochs", type=int, default=None)
    sweep.add_argument("--pe-checkpoint", type=Path, default=None)
    return parser


def resolve_config(args: argparse.Namespace, stage: Optional[str] = None) -> RunConfig:
    """Load ``--config`` (defaults when absent) and apply the command-line overrides.

    Raises:
        ConfigError: If the file or an override is invalid
    """
    config = load_config(args.config)
    train: Dict[str, Any] = {}
    dru: Dict[str, Any] = {}
    if args.seed is not None:
        train["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        train["pretrain_epochs" if stage == "pe_pretrain" else "epochs"] = args.epochs
    if getattr(args, "dru_layers", None) is not None:
        dru["layers"] = args.dru_layers
    if getattr(args, "no_dru", False):
        dru["use_dru"] = False
    if getattr(args, "no_intention", False):
        dru["use_intention"] = False
    sections = {name: values for name, values in (("train", train), ("dru", dru)) if values}
    return with_overrides(config, **sections) if sections else config


def run(args: argparse.Namespace) -> int:
    command = args.command
    if command == "gen-data":
        config = resolve_config(args)
        manifest = cmd_gen_data(config, args.out, args.n, args.seed)
        print(json.dumps(manifest.split_sizes, sort_keys=True))
    elif command == "pretrain-pe":
        print(cmd_pretrain_pe(resolve_config(args, "pe_pretrain"), args.data, args.out, args.resume))
    elif command == "train":
        print(cmd_train(resolve_config(args), args.data, args.out, args.pe_checkpoint, args.resume))
    elif command == "eval":
        config = resolve_config(args) if args.config is not None else None
        report = cmd_eval(args.checkpoint, args.data, args.split, args.subset, args.out, config)
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    elif command == "infer":
        config = resolve_config(args) if args.config is not None else None
        prediction = cmd_infer(args.checkpoint, args.image, args.intention, args.out, args.label, config)
        print(json.dumps(prediction.to_dict(), sort_keys=True))
    elif command == "export-relmaps":
        config = resolve_config(args) if args.config is not None else None
        for path in cmd_export_relmaps(args.checkpoint, args.data, args.scenes, args.out, args.top_k, config):
            print(path)
    elif command == "gradcheck":
        results = cmd_gradcheck(resolve_config(args), args.seeds, args.out)
        for result in results:
            status = "ok" if result.passed else "FAIL"
            print(f"{result.name:<24} {result.max_error:.3e} {status}")
        if not all(r.passed for r in results):
            return EXIT_FAILURE
    elif command == "sweep-layers":
        config = resolve_config(args)
        summary = cmd_sweep_layers(config, args.data, args.out, args.layers, args.seeds, args.pe_checkpoint)
        print(json.dumps(summary["median"], indent=2, sort_keys=True))
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except DivergenceError as e:
        logger.error(f"Training diverged at step {e.step}: {e}")
        return EXIT_DIVERGENCE
    except (DruformerError, ValueError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
