"""Harness operations behind the command-line tool.

Each ``cmd_*`` function takes plain arguments, writes its artifacts and returns the
in-memory result, so tests can drive the harness without going through argparse.
"""

import json
import logging
import os
import statistics
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, config_hash, with_overrides
from .dataset import Dataset, DatasetManifest, generate_scenes, load_image, read_dataset, write_dataset
from .exceptions import CheckpointError, ConfigError, DatasetError
from .gradcheck import run_gradcheck
from .intention import IntentionVocab
from .model import DRUformer, importance_probabilities
from .models import GradCheckResult, MetricsReport, Prediction
from .relationship import EGO_ANCHOR, EGO_CLASS, cosine_relmap, location_relmap, semantic_relmap
from .scenes import CATEGORIES
from .tensor import Tensor, no_grad
from .training import (
    Trainer,
    build_model,
    evaluate,
    evaluate_detection,
    load_pretrained_pe,
    load_vocab,
    model_from_checkpoint,
    predict,
    select_subset,
)

logger = logging.getLogger(__name__)

THREADS_ENV = "DRUFORMER_THREADS"
PE_CHECKPOINT = "pe_pretrain.ckpt"
FULL_CHECKPOINT = "full.ckpt"
PREDICTION_FILE = "prediction.json"
ANNOTATED_FILE = "annotated.png"
SWEEP_SUMMARY = "sweep_summary.json"
RELMAP_KINDS = ("dru", "loc", "sem")

PREDICTION_COLOUR = (0, 0, 255)
LABEL_COLOUR = (255, 0, 0)

PathLike = Union[str, Path]


def resolve_threads(value: Optional[int] = None) -> int:
    """Worker count for evaluation and generation: explicit value, else ``DRUFORMER_THREADS``, else 1.

    Raises:
        ConfigError: If the environment variable is not a positive integer
    """
    if value is not None:
        return max(1, int(value))
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return 1
    try:
        threads = int(raw)
    except ValueError as e:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from e
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return threads


def _write_json(path: Path, data: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _open_dataset(data: PathLike, config: RunConfig) -> Dataset:
    dataset = read_dataset(data)
    if dataset.manifest.image_size != config.pe.image_h:
        raise DatasetError(
            f"Dataset images are {dataset.manifest.image_size} px but the model expects {config.pe.image_h} px"
        )
    return dataset


def load_trained(
    checkpoint: PathLike, config: Optional[RunConfig] = None
) -> Tuple[DRUformer, RunConfig, IntentionVocab]:
    """Rebuild a full model from its checkpoint.

    Without ``config`` the configuration stored in the checkpoint is used; with one,
    its hash must match the checkpoint's.

    Raises:
        CheckpointError: On a stage, hash or architecture mismatch
    """
    ckpt = load_checkpoint(checkpoint, expected_stage="full")
    stored = ckpt.metadata.get("config")
    if config is None:
        if stored is None:
            raise CheckpointError(f"Checkpoint {checkpoint} carries no configuration; pass --config")
        config = RunConfig.from_dict(stored)
    if config_hash(config) != ckpt.config_hash:
        logger.error(f"Config hash {config_hash(config)} does not match checkpoint {ckpt.config_hash}")
        raise CheckpointError(f"Checkpoint {checkpoint} was trained with config {ckpt.config_hash}")
    vocab = IntentionVocab.from_dict(ckpt.metadata["vocab"]) if "vocab" in ckpt.metadata else load_vocab(config)
    return model_from_checkpoint(ckpt, config, vocab), config, vocab


def _run_stage(trainer: Trainer, epochs: int, path: Path, threads: int) -> Checkpoint:
    """Train to ``epochs`` epochs, checkpointing at every epoch boundary."""
    checkpoint = trainer.checkpoint()
    saved = False
    while trainer.state.epoch < epochs:
        trainer.fit(trainer.state.epoch + 1, threads)
        checkpoint = trainer.checkpoint()
        save_checkpoint(path, checkpoint)
        saved = True
    if not saved:
        save_checkpoint(path, checkpoint)
    return checkpoint


def cmd_gen_data(
    config: RunConfig,
    out_dir: PathLike,
    n: Optional[int] = None,
    seed: Optional[int] = None,
    threads: Optional[int] = None,
) -> DatasetManifest:
    """Generate, render and write ``n`` scenes split by ``config.data.split_ratios``."""
    n = config.data.n_scenes if n is None else n
    seed = config.train.seed if seed is None else seed
    workers = resolve_threads(threads)
    scenes = generate_scenes(config.generator, n, seed, workers)
    return write_dataset(scenes, out_dir, config.generator, seed, config.data.split_ratios, workers)


def cmd_pretrain_pe(
    config: RunConfig,
    data: PathLike,
    out_dir: PathLike,
    resume: Optional[PathLike] = None,
    threads: Optional[int] = None,
) -> Path:
    """Pretrain the participants extractor on every participant; returns the checkpoint path.

    Raises:
        DivergenceError: If the loss becomes non-finite
        CheckpointError: If ``resume`` is incompatible
    """
    out = Path(out_dir)
    workers = resolve_threads(threads)
    dataset = _open_dataset(data, config)
    trainer = Trainer(config, dataset, out, stage="pe_pretrain")
    if resume is not None:
        trainer.resume(load_checkpoint(resume, expected_stage="pe_pretrain"))
    path = out / PE_CHECKPOINT
    _run_stage(trainer, config.train.pretrain_epochs, path, workers)
    if dataset.manifest.splits["val"]:
        report = evaluate_detection(trainer.model, dataset, "val", config, workers)
        _write_json(out / "pe_val_detection.json", report.to_dict())
        logger.info(f"Pretrained extractor detection on val: mIoU {report.miou:.4f} ACC {report.acc:.4f}")
    return path


def cmd_train(
    config: RunConfig,
    data: PathLike,
    out_dir: PathLike,
    pe_checkpoint: Optional[PathLike] = None,
    resume: Optional[PathLike] = None,
    threads: Optional[int] = None,
) -> Path:
    """Train the full model end to end; returns the checkpoint path.

    Raises:
        DivergenceError: If the loss becomes non-finite
        CheckpointError: If a checkpoint does not fit the configuration
    """
    out = Path(out_dir)
    workers = resolve_threads(threads)
    dataset = _open_dataset(data, config)
    vocab = load_vocab(config)
    model = build_model(config, vocab)
    if pe_checkpoint is not None and resume is None:
        load_pretrained_pe(model, pe_checkpoint)
    trainer = Trainer(config, dataset, out, stage="full", model=model, vocab=vocab)
    if resume is not None:
        trainer.resume(load_checkpoint(resume, expected_stage="full"))
    logger.info(f"Training {model.num_parameters()} parameters (config {config_hash(config)})")
    path = out / FULL_CHECKPOINT
    _run_stage(trainer, config.train.epochs, path, workers)
    return path


def cmd_eval(
    checkpoint: PathLike,
    data: PathLike,
    split: str = "test",
    subset: str = "all",
    out: Optional[PathLike] = None,
    config: Optional[RunConfig] = None,
    threads: Optional[int] = None,
) -> MetricsReport:
    """Evaluate a full checkpoint; the JSON report goes to ``out`` with per-scene predictions beside it.

    Raises:
        CheckpointError: If ``config`` does not match the checkpoint
        DatasetError: If the split or subset is empty
    """
    model, config, vocab = load_trained(checkpoint, config)
    dataset = _open_dataset(data, config)
    report, predictions = evaluate(model, dataset, split, config, vocab, subset, resolve_threads(threads))
    logger.info(f"{report.split}: mIoU {report.miou:.4f} ACC {report.acc:.4f} over {report.num_samples} scenes")
    if out is not None:
        target = Path(out)
        _write_json(target, report.to_dict())
        scenes = select_subset(dataset.split(split), subset)
        lines = [
            json.dumps({"scene_id": scene.scene_id, **pred.to_dict()}, sort_keys=True)
            for scene, pred in zip(scenes, predictions)
        ]
        target.with_suffix(".predictions.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return report


def _pixel_rect(box: Sequence[float], width: int, height: int) -> List[int]:
    cx, cy, w, h = box
    x0 = int(np.clip(np.floor((cx - w / 2) * width), 0, width - 1))
    y0 = int(np.clip(np.floor((cy - h / 2) * height), 0, height - 1))
    x1 = int(np.clip(np.ceil((cx + w / 2) * width) - 1, x0, width - 1))
    y1 = int(np.clip(np.ceil((cy + h / 2) * height) - 1, y0, height - 1))
    return [x0, y0, x1, y1]


def annotate_image(
    image: np.ndarray, prediction: Optional[Sequence[float]], label: Optional[Sequence[float]] = None
) -> Image.Image:
    """Burn the predicted box (blue) and optional label box (red) into a 3×H×W raster."""
    raster = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    canvas = Image.fromarray(np.ascontiguousarray(raster))
    draw = ImageDraw.Draw(canvas)
    width, height = canvas.size
    if label is not None:
        draw.rectangle(_pixel_rect(label, width, height), outline=LABEL_COLOUR)
    if prediction is not None:
        draw.rectangle(_pixel_rect(prediction, width, height), outline=PREDICTION_COLOUR)
    return canvas


def cmd_infer(
    checkpoint: PathLike,
    image: PathLike,
    intention: str,
    out_dir: PathLike,
    label: Optional[Sequence[float]] = None,
    config: Optional[RunConfig] = None,
) -> Prediction:
    """Predict the important object of one image under a driving intention.

    Writes ``prediction.json`` and ``annotated.png`` into ``out_dir``.

    Raises:
        UnknownIntentionError: If the intention text is not in the vocabulary
        DatasetError: If the image cannot be read or has the wrong size
    """
    model, config, vocab = load_trained(checkpoint, config)
    intention_id = vocab.parse(intention)
    pixels = load_image(image, config.pe.image_h)
    (prediction,), _ = predict(model, pixels[None], [intention_id], config.train.importance_threshold)

    out = Path(out_dir)
    _write_json(
        out / PREDICTION_FILE,
        {
            "image": str(image),
            "intention": vocab.name_of(intention_id),
            "intention_id": intention_id,
            "config_hash": config_hash(config),
            "label": list(label) if label is not None else None,
            **prediction.to_dict(),
        },
    )
    annotate_image(pixels, prediction.box, label).save(out / ANNOTATED_FILE)
    logger.info(f"Prediction for {image}: box {prediction.box}, probability {prediction.probability:.3f}")
    return prediction


def _write_relmap(out: Path, stem: str, values: np.ndarray) -> List[Path]:
    """CSV at full precision plus a min-max scaled greyscale PGM (a constant map is all white)."""
    csv_path, pgm_path = out / f"{stem}.csv", out / f"{stem}.pgm"
    np.savetxt(csv_path, values, fmt="%.6f", delimiter=",")
    lo, hi = float(values.min()), float(values.max())
    if hi > lo:
        scaled = np.round((values - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.full(values.shape, 255.0)
    Image.fromarray(scaled.astype(np.uint8)).save(pgm_path, format="PPM")
    return [csv_path, pgm_path]


def relationship_maps(
    model: DRUformer, image: np.ndarray, intention_id: int, top_k: int, sigma: float
) -> Tuple[Dict[str, np.ndarray], List[Dict[str, Any]]]:
    """DRU, location and semantic maps over the ego entity and the ``top_k`` most important slots.

    Slots are ranked by importance probability (ties keep the lower slot). Row 0 is the ego.
    """
    with no_grad():
        out = model(Tensor(image[None]), [intention_id])
        _, class_logits = model.pe.detect(out.tokens)
    probs = importance_probabilities(out.logits.data[0])
    candidates = probs[1:]
    available = len(candidates)
    if available < top_k:
        logger.warning(f"Only {available} detections available; exporting all of them instead of {top_k}")
    slots = (np.argsort(-candidates, kind="stable")[:top_k] + 1).tolist()
    rows = [0] + slots

    n_classes = len(CATEGORIES)
    classes = [EGO_CLASS] + [CATEGORIES[int(np.argmax(class_logits.data[0][s - 1][:n_classes]))] for s in slots]
    boxes = np.vstack([np.array(EGO_ANCHOR)] + [out.boxes.data[0][s] for s in slots])
    maps = {
        "dru": cosine_relmap(out.hidden.data[0][rows]),
        "loc": location_relmap(boxes, sigma),
        "sem": semantic_relmap(classes),
    }
    entities = [{"row": 0, "slot": 0, "class": EGO_CLASS, "box": list(EGO_ANCHOR), "probability": None}]
    for row, slot in enumerate(slots, start=1):
        entities.append(
            {
                "row": row,
                "slot": slot,
                "class": classes[row],
                "box": [float(v) for v in out.boxes.data[0][slot]],
                "probability": float(probs[slot]),
            }
        )
    return maps, entities


def cmd_export_relmaps(
    checkpoint: PathLike,
    data: PathLike,
    scene_ids: Sequence[int],
    out_dir: PathLike,
    top_k: Optional[int] = None,
    config: Optional[RunConfig] = None,
) -> List[Path]:
    """Write ``{id}.{dru|loc|sem}.{csv|pgm}`` and ``{id}.entities.json`` per scene.

    Raises:
        DatasetError: If a scene id is not in the dataset
    """
    model, config, vocab = load_trained(checkpoint, config)
    dataset = _open_dataset(data, config)
    k = config.dru.top_k if top_k is None else top_k
    if k < 1:
        raise ValueError(f"top_k must be positive, got {k}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    for scene_id in scene_ids:
        if scene_id not in dataset.scenes:
            raise DatasetError(f"Scene {scene_id} is not in the dataset")
        scene = dataset.scenes[scene_id]
        intention_id = vocab.parse(scene.intention)
        maps, entities = relationship_maps(model, dataset.image(scene_id), intention_id, k, config.dru.location_sigma)
        for kind in RELMAP_KINDS:
            written.extend(_write_relmap(out, f"{scene_id}.{kind}", maps[kind]))
        entities_path = out / f"{scene_id}.entities.json"
        _write_json(
            entities_path,
            {"scene_id": scene_id, "intention": scene.intention, "config_hash": config_hash(config), "rows": entities},
        )
        written.append(entities_path)
    logger.info(f"Exported relationship maps for {len(scene_ids)} scene(s) to {out}")
    return written


def cmd_gradcheck(
    config: Optional[RunConfig] = None, seeds: int = 100, out: Optional[PathLike] = None
) -> List[GradCheckResult]:
    """Run the finite-difference suite; the report lists every operation once."""
    weights = config.loss if config is not None else None
    results = run_gradcheck(range(seeds), weights=weights)
    if out is not None:
        _write_json(Path(out), {"results": [r.to_dict() for r in results], "passed": all(r.passed for r in results)})
    return results


def cmd_sweep_layers(
    config: RunConfig,
    data: PathLike,
    out_dir: PathLike,
    layers: Sequence[int] = (1, 3, 6),
    seeds: Sequence[int] = (42, 43, 44),
    pe_checkpoint: Optional[PathLike] = None,
    split: str = "test",
    threads: Optional[int] = None,
) -> Dict[str, Any]:
    """Train and evaluate one model per (DRU depth, seed); writes ``sweep_summary.json``."""
    out = Path(out_dir)
    runs: List[Dict[str, Any]] = []
    for n_layers in layers:
        for seed in seeds:
            run_config = with_overrides(config, dru={"layers": n_layers}, train={"seed": seed})
            run_dir = out / f"layers{n_layers}_seed{seed}"
            checkpoint = cmd_train(run_config, data, run_dir, pe_checkpoint, threads=threads)
            report = cmd_eval(checkpoint, data, split, out=run_dir / f"eval_{split}.json", threads=threads)
            runs.append(
                {
                    "layers": n_layers,
                    "seed": seed,
                    "miou": report.miou,
                    "acc": report.acc,
                    "config_hash": config_hash(run_config),
                }
            )
    medians = {
        str(n_layers): {
            "miou": statistics.median(r["miou"] for r in runs if r["layers"] == n_layers),
            "acc": statistics.median(r["acc"] for r in runs if r["layers"] == n_layers),
        }
        for n_layers in layers
    }
    summary = {"split": split, "runs": runs, "median": medians}
    _write_json(out / SWEEP_SUMMARY, summary)
    return summary
