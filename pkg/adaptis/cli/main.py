"""Command-line interface for generating toy data, training, inference and evaluation."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from adaptis.config.environment import default_output_dir, load_local_env, resolve_device
from adaptis.config.settings import (
    ConfigError,
    GenConfig,
    RunConfig,
    list_config_keys,
    load_run_config,
    write_run_config,
)
from adaptis.structures import PointProposal

LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - [%(funcName)s:%(lineno)d] - %(message)s"


class UsageError(Exception):
    """Raised for invalid flags, overrides or config keys."""


class AdaptISArgumentParser(argparse.ArgumentParser):
    """``ArgumentParser`` that reports usage errors with exit status 1."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON config file (sections gen, model, train, infer).")
    parser.add_argument("--out", type=Path, help="Output directory (default: $ADAPTIS_OUTPUT_ROOT/<command>).")
    parser.add_argument("--seed", type=int, help="Seed applied to every config section.")
    parser.add_argument("--deterministic", action="store_true", help="Force serial, deterministic execution.")


def build_parser() -> AdaptISArgumentParser:
    """Create the argument parser for the CLI."""
    parser = AdaptISArgumentParser(
        prog="adaptis",
        description=(
            "Point-proposal instance and panoptic segmentation on a synthetic toy benchmark. "
            "Any config field can be overridden with --<section>.<field> <value>, e.g. --train.epochs 5."
        ),
    )
    commands = parser.add_subparsers(dest="command", required=True, parser_class=AdaptISArgumentParser)

    generate = commands.add_parser("generate", help="Generate the toy train/test splits.")
    _add_common(generate)
    generate.add_argument("--split", choices=("train", "test", "both"), default="both")
    generate.add_argument("--workers", type=int, default=0, help="Process-pool size for generation.")

    train = commands.add_parser("train", help="Train backbone, controller and heads.")
    _add_common(train)
    train.add_argument("--data", type=Path, required=True, help="Training dataset directory.")

    proposals = commands.add_parser("train-proposals", help="Train the point-proposal branch on a frozen model.")
    _add_common(proposals)
    proposals.add_argument("--data", type=Path, required=True, help="Training dataset directory.")
    proposals.add_argument("--checkpoint", type=Path, required=True, help="Checkpoint from the train command.")

    infer = commands.add_parser("infer", help="Segment images with a trained model.")
    _add_common(infer)
    infer.add_argument("--checkpoint", type=Path, required=True)
    source = infer.add_mutually_exclusive_group(required=True)
    source.add_argument("--image", type=Path, help="PNG image or directory of PNG images.")
    source.add_argument("--data", type=Path, help="Dataset directory.")
    infer.add_argument("--threshold", type=float, help="Mask threshold T (shortcut for --infer.threshold).")
    infer.add_argument("--strategy", choices=("auto", "random", "learned"), help="Proposal strategy.")

    evaluate = commands.add_parser("evaluate", help="Score predictions against a dataset.")
    _add_common(evaluate)
    evaluate.add_argument("--data", type=Path, required=True, help="Ground-truth dataset directory.")
    scored = evaluate.add_mutually_exclusive_group(required=True)
    scored.add_argument("--checkpoint", type=Path, help="Run inference with this checkpoint, then score.")
    scored.add_argument("--predictions", type=Path, help="Directory written by the infer command.")
    evaluate.add_argument("--threshold", type=float)
    evaluate.add_argument("--strategy", choices=("auto", "random", "learned"))
    evaluate.add_argument("--consistency", action="store_true", help="Also report the mask-consistency statistic.")

    visualize = commands.add_parser("visualize", help="Write heatmap, instance, panoptic and proposal PNGs.")
    _add_common(visualize)
    visualize.add_argument("--checkpoint", type=Path, required=True)
    visualize.add_argument("--image", type=Path, required=True)
    visualize.add_argument("--points", help="Semicolon-separated x,y pairs, e.g. '10,12;40.5,8'.")

    ablate = commands.add_parser("ablate", help="Train and compare the loss × CoordConv matrix.")
    _add_common(ablate)
    ablate.add_argument("--train-data", type=Path, required=True)
    ablate.add_argument("--test-data", type=Path, required=True)
    ablate.add_argument("--losses", default="nfl,fl,bce", help="Comma-separated subset of nfl,fl,bce.")
    ablate.add_argument("--coordconv", default="on,off", help="Comma-separated subset of on,off.")
    return parser


def parse_overrides(extra: Sequence[str]) -> List[Tuple[str, str]]:
    """Turn leftover ``--section.key value`` tokens into pairs; unknown keys are usage errors."""
    known = set(list_config_keys())
    pairs: List[Tuple[str, str]] = []
    tokens = list(extra)
    while tokens:
        flag = tokens.pop(0)
        if not flag.startswith("--"):
            raise UsageError(f"unexpected argument {flag!r}")
        key = flag[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        elif tokens and not tokens[0].startswith("--"):
            value = tokens.pop(0)
        else:
            raise UsageError(f"override {flag} needs a value")
        if key not in known:
            raise UsageError(f"unknown option or config key {flag!r}")
        pairs.append((key, value))
    return pairs


def parse_points(raw: Optional[str]) -> Optional[List[PointProposal]]:
    if not raw:
        return None
    points = []
    for chunk in raw.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        try:
            x_text, y_text = chunk.split(",")
            points.append(PointProposal(float(x_text), float(y_text)))
        except ValueError as exc:
            raise UsageError(f"cannot parse point {chunk!r}; expected x,y") from exc
    return points


def _attach_run_log(out_dir: Path) -> logging.Handler:
    out_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out_dir / "run.log", encoding="utf-8")
    handler.setLevel(logging.DEBUG)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    package_logger = logging.getLogger("adaptis")
    package_logger.addHandler(handler)
    package_logger.setLevel(logging.DEBUG)
    return handler


def _resolve_out(args: argparse.Namespace) -> Path:
    if args.out is not None:
        return args.out
    fallback = default_output_dir(args.command)
    if fallback is None:
        raise UsageError("--out is required when ADAPTIS_OUTPUT_ROOT is not set")
    return fallback


def _command_overrides(args: argparse.Namespace) -> List[Tuple[str, str]]:
    pairs: List[Tuple[str, str]] = []
    if getattr(args, "threshold", None) is not None:
        pairs.append(("infer.threshold", str(args.threshold)))
    if getattr(args, "strategy", None) is not None:
        pairs.append(("infer.strategy", args.strategy))
    if args.deterministic:
        pairs.append(("train.num_workers", "0"))
    return pairs


def _align_with_dataset(config: RunConfig, gen_config: GenConfig) -> RunConfig:
    """Use the generator settings stored with the data and size the semantic branch to match."""
    config.gen = dataclasses.replace(gen_config)
    if gen_config.panoptic_mode and config.model.num_classes == 1:
        config.model.num_classes = gen_config.num_classes
    return config.validate()


def _device(config: RunConfig, section: str) -> str:
    return resolve_device(getattr(config, section).device)


def cmd_generate(args: argparse.Namespace, config: RunConfig, out: Path) -> int:
    from adaptis.data import generate_dataset, write_dataset

    splits = ("train", "test") if args.split == "both" else (args.split,)
    workers = 0 if config.deterministic else args.workers
    write_run_config(config, out / "config.json")
    for split in splits:
        dataset = generate_dataset(config.gen, split, workers=workers)
        write_dataset(dataset, out / split)
    print(f"Wrote {', '.join(splits)} split(s) to {out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, config: RunConfig, out: Path) -> int:
    from adaptis.core.history import summarize_history
    from adaptis.core.training import seed_everything, train_adaptis
    from adaptis.data import read_dataset
    from adaptis.model import AdaptISNet

    dataset = read_dataset(args.data)
    config = _align_with_dataset(config, dataset.gen_config)
    write_run_config(config, out / "config.json")
    seed_everything(config.train.seed, config.deterministic)
    model = AdaptISNet(config.model)
    result = train_adaptis(dataset, model, config.train, out, device=_device(config, "train"))
    print(summarize_history(result.records, "adaptis").summary_line())
    print(f"Checkpoint: {result.checkpoint}")
    return EXIT_OK


def cmd_train_proposals(args: argparse.Namespace, config: RunConfig, out: Path) -> int:
    from adaptis.core.history import summarize_history
    from adaptis.core.training import seed_everything, train_proposal_branch
    from adaptis.data import read_dataset
    from adaptis.model import load_checkpoint

    model, metadata = load_checkpoint(args.checkpoint)
    dataset = read_dataset(args.data)
    config.model = model.config
    config = _align_with_dataset(config, dataset.gen_config)
    write_run_config(config, out / "config.json")
    seed_everything(config.train.seed, config.deterministic)
    LOGGER.info("Loaded %s checkpoint from epoch %s", metadata.get("stage"), metadata.get("epoch"))
    result = train_proposal_branch(
        model, dataset, config.train, out, threshold=config.infer.threshold, device=_device(config, "train")
    )
    print(summarize_history(result.records, "proposals").summary_line())
    print(f"Checkpoint: {result.checkpoint}")
    return EXIT_OK


def _load_images(path: Path) -> List[Tuple[str, Path]]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
        if not files:
            raise FileNotFoundError(f"No PNG images in {path}")
        return [(p.stem, p) for p in files]
    if not path.is_file():
        raise FileNotFoundError(f"Image not found: {path}")
    return [(path.stem, path)]


def _read_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as handle:
        return np.array(handle.convert("RGB"))


def cmd_infer(args: argparse.Namespace, config: RunConfig, out: Path) -> int:
    from adaptis.core.evaluation import predict_dataset, predict_sample, sample_inference_rng, to_stored, write_prediction
    from adaptis.data import read_dataset
    from adaptis.model import load_checkpoint

    model, _ = load_checkpoint(args.checkpoint, device=_device(config, "infer"))
    config.model = model.config
    write_run_config(config, out / "config.json")
    predictions_dir = out / "predictions"

    if args.data is not None:
        dataset = read_dataset(args.data)
        count = 0
        for sample, prediction in predict_dataset(model, dataset, config.infer, strategy=args.strategy):
            write_prediction(predictions_dir, prediction)
            count += 1
        print(f"Wrote predictions for {count} images to {predictions_dir}")
        return EXIT_OK

    gen_config = GenConfig(panoptic_mode=model.config.semantic_enabled)
    failures: Dict[str, str] = {}
    images = _load_images(args.image)
    for index, (image_id, path) in enumerate(images):
        try:
            image = _read_rgb(path)
            result = predict_sample(
                model, image, config.infer, gen_config, sample_inference_rng(config.infer.seed, index), strategy=args.strategy
            )
            write_prediction(predictions_dir, to_stored(image_id, result, keep_confidences=config.infer.save_confidences))
            LOGGER.info("%s: %d instances", image_id, len(result.records))
        except Exception as exc:
            LOGGER.exception("Inference failed for %s", path)
            failures[image_id] = str(exc)
    print(f"Wrote predictions for {len(images) - len(failures)} of {len(images)} images to {predictions_dir}")
    for image_id, message in failures.items():
        print(f"--- {image_id} ---\nInference failed: {message}")
    return EXIT_RUNTIME if failures else EXIT_OK


def cmd_evaluate(args: argparse.Namespace, config: RunConfig, out: Path) -> int:
    from adaptis.core.evaluation import (
        evaluate_predictions,
        mask_consistency,
        predict_dataset,
        read_prediction,
        write_metrics,
    )
    from adaptis.data import read_dataset
    from adaptis.model import load_checkpoint

    dataset = read_dataset(args.data)
    model = None
    if args.checkpoint is not None:
        model, _ = load_checkpoint(args.checkpoint, device=_device(config, "infer"))
        config.model = model.config
        pairs = predict_dataset(model, dataset, config.infer, strategy=args.strategy)
    else:
        pairs = ((sample, read_prediction(args.predictions, sample.sample_id)) for sample in dataset)
    config.gen = dataclasses.replace(dataset.gen_config)
    write_run_config(config, out / "config.json")

    record = evaluate_predictions(pairs, dataset.gen_config, config.infer.ap_thresholds)
    if args.consistency:
        if model is None:
            raise UsageError("--consistency needs --checkpoint")
        record["consistency"] = mask_consistency(
            model,
            dataset,
            config.infer.consistency_objects,
            threshold=config.infer.threshold,
            seed=config.infer.seed,
            chunk_size=config.infer.chunk_size,
        )
    write_metrics(out / "metrics.json", record)

    ap = record["instances"]["ap"]
    print("\n=== Evaluation ===")
    print("AP: " + ", ".join(f"@{t}: {v * 100:.1f}" for t, v in ap.items()))
    panoptic = record["panoptic"]
    print(f"PQ: {panoptic['pq'] * 100:.1f} (things {panoptic['pq_things'] * 100:.1f}, stuff {panoptic['pq_stuff'] * 100:.1f})")
    print(f"mIoU: {record['miou'] * 100:.1f}")
    if "consistency" in record:
        print(f"Mask consistency: {record['consistency']['mean_pairwise_iou']:.3f}")
    return EXIT_OK


def cmd_visualize(args: argparse.Namespace, config: RunConfig, out: Path) -> int:
    from adaptis.core.visualize import write_visualizations
    from adaptis.model import load_checkpoint

    points = parse_points(args.points)
    model, _ = load_checkpoint(args.checkpoint, device=_device(config, "infer"))
    config.model = model.config
    write_run_config(config, out / "config.json")
    image = _read_rgb(args.image)
    written = write_visualizations(
        model,
        image,
        out,
        points=points,
        config=config.infer,
        gen_config=GenConfig(panoptic_mode=model.config.semantic_enabled),
        prefix=args.image.stem,
    )
    print(f"Wrote {len(written)} images to {out}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace, config: RunConfig, out: Path) -> int:
    from adaptis.core.ablation import run_ablation
    from adaptis.data import read_dataset

    losses = [item.strip() for item in args.losses.split(",") if item.strip()]
    switches = {"on": True, "off": False}
    try:
        coordconv = [switches[item.strip()] for item in args.coordconv.split(",") if item.strip()]
    except KeyError as exc:
        raise UsageError(f"--coordconv accepts on/off, got {exc.args[0]!r}") from exc
    unknown = set(losses) - {"nfl", "fl", "bce"}
    if unknown:
        raise UsageError(f"unknown loss kinds {sorted(unknown)}")

    train_set = read_dataset(args.train_data)
    test_set = read_dataset(args.test_data)
    config = _align_with_dataset(config, train_set.gen_config)
    write_run_config(config, out / "config.json")
    result = run_ablation(
        config, train_set, test_set, out, losses=losses, coordconv=coordconv, device=_device(config, "train")
    )
    print(result.table.to_string(index=False))
    for name, value in result.deltas.items():
        print(f"{name}: {'n/a' if value is None else f'{value:+.4f}'}")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig, Path], int]] = {
    "generate": cmd_generate,
    "train": cmd_train,
    "train-proposals": cmd_train_proposals,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "visualize": cmd_visualize,
    "ablate": cmd_ablate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point invoked by ``python -m adaptis.cli`` or ``python main.py``."""
    logging.basicConfig(level=logging.INFO)
    load_local_env()
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        overrides = parse_overrides(extra) + _command_overrides(args)
        config = load_run_config(
            args.config, overrides, seed=args.seed, deterministic=True if args.deterministic else None
        )
        out = _resolve_out(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"adaptis: error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    handler = _attach_run_log(out)
    try:
        return COMMANDS[args.command](args, config, out)
    except UsageError as exc:
        print(f"adaptis: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        LOGGER.exception("%s failed", args.command)
        print(f"adaptis {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        logging.getLogger("adaptis").removeHandler(handler)
        handler.close()


__all__ = ["build_parser", "main", "parse_overrides", "parse_points"]
