"""Training loop, resumable train state and evaluation for both training stages."""

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, model_hash
from .config import RunConfig, config_hash
from .dataset import Dataset
from .exceptions import CheckpointError, DatasetError, DivergenceError, NonFiniteError
from .geometry import EvalPair, prediction_box, summarize, to_xyxy
from .intention import IntentionVocab
from .matching import SetLossOutput, hungarian, match_and_loss, match_cost, matched_ious
from .model import DRUformer, select_prediction
from .models import LossRecord, MetricsReport, Prediction
from .nn import Module
from .optim import AdamW, StepLR, clip_grad_norm
from .relationship import check_row_stochastic
from .rng import make_rng
from .scenes import LAYOUTS, SceneSpec
from .tensor import Tape, Tensor, backward, getitem, no_grad

logger = logging.getLogger(__name__)

INIT_STREAM = 0
SHUFFLE_STREAM = 1
LOSS_CURVE = "loss_curve.jsonl"
# The detection head only serves pretraining; the full stage leaves it untouched.
DETECT_HEAD = "pe.detect_head."
SUBSETS = ("all", "intention-ambiguous") + LAYOUTS


def load_vocab(config: RunConfig) -> IntentionVocab:
    if config.intention_vocab_path:
        return IntentionVocab.from_file(config.intention_vocab_path)
    return IntentionVocab()


def build_model(config: RunConfig, vocab: Optional[IntentionVocab] = None) -> DRUformer:
    """Freshly initialised model; the init stream depends only on the seed."""
    vocab = vocab or load_vocab(config)
    return DRUformer(config, make_rng(config.train.seed, INIT_STREAM), vocab_size=len(vocab))


def intention_ids(scenes: Sequence[SceneSpec], vocab: IntentionVocab) -> np.ndarray:
    return np.array([vocab.parse(s.intention) for s in scenes], dtype=np.int64)


def select_subset(scenes: Sequence[SceneSpec], subset: str) -> List[SceneSpec]:
    """Filter to ``all``, ``intention-ambiguous`` or a single layout.

    Raises:
        ValueError: If the subset name is unknown
    """
    if subset == "all":
        return list(scenes)
    if subset == "intention-ambiguous":
        return [s for s in scenes if s.layout == "intersection" and s.intention_ambiguous]
    if subset in LAYOUTS:
        return [s for s in scenes if s.layout == subset]
    raise ValueError(f"Unknown subset {subset!r}; expected one of {SUBSETS}")


@dataclass
class TrainState:
    """Progress of a run; ``epoch`` counts completed epochs."""

    stage: str
    epoch: int = 0
    step: int = 0
    best_val: Optional[Dict[str, Any]] = None
    history: List[Dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "stage": self.stage,
            "epoch": self.epoch,
            "step": self.step,
            "best_val": self.best_val,
            "history": list(self.history),
        }


class Trainer:
    """Runs one training stage over a dataset.

    ``stage="pe_pretrain"`` trains the participants extractor and its detection head on
    every participant; ``stage="full"`` trains the whole model on the important object
    with the detection head frozen.
    """

    def __init__(
        self,
        config: RunConfig,
        dataset: Dataset,
        out_dir: Union[str, Path],
        stage: str = "full",
        model: Optional[DRUformer] = None,
        vocab: Optional[IntentionVocab] = None,
    ) -> None:
        """Initialize the trainer.

        Args:
            config: Validated run configuration
            dataset: Opened dataset; its ``train`` split is used for updates
            out_dir: Directory for the loss curve and checkpoints
            stage: ``pe_pretrain`` or ``full``
            model: Model to train (a fresh one is built from the seed otherwise)
            vocab: Intention vocabulary
        """
        if stage not in ("pe_pretrain", "full"):
            raise ValueError(f"Unknown training stage {stage!r}")
        self._config = config
        self._dataset = dataset
        self._out_dir = Path(out_dir)
        self._vocab = vocab or load_vocab(config)
        self._model = model or build_model(config, self._vocab)
        self._stage = stage
        self._config_hash = config_hash(config)
        opt = config.optimizer
        frozen = (DETECT_HEAD,) if stage == "full" else ()
        self._optimizer = AdamW(self.trainable, opt.lr, opt.weight_decay, opt.betas, opt.eps, frozen=frozen)
        self._scheduler = StepLR(self._optimizer, opt.lr_drop_epochs, opt.lr_gamma)
        self._state = TrainState(stage=stage)
        self._lock = threading.Lock()
        self._step_callback: Optional[Callable[[LossRecord], None]] = None
        self._train_scenes = dataset.split("train")
        if not self._train_scenes:
            raise DatasetError("Training split is empty")

    @property
    def model(self) -> DRUformer:
        return self._model

    @property
    def trainable(self) -> Module:
        return self._model.pe if self._stage == "pe_pretrain" else self._model

    @property
    def state(self) -> TrainState:
        return self._state

    @property
    def optimizer(self) -> AdamW:
        return self._optimizer

    def set_step_callback(self, callback: Optional[Callable[[LossRecord], None]]) -> None:
        """Register a callable receiving every step's LossRecord."""
        with self._lock:
            self._step_callback = callback

    def _notify(self, record: LossRecord) -> None:
        with self._lock:
            callback = self._step_callback
        if callback:
            try:
                callback(record)
            except Exception as e:
                logger.error(f"Error in step callback: {e}")

    # Batches

    def epoch_batches(self, epoch: int) -> List[List[SceneSpec]]:
        """Shuffled batches of an epoch, a pure function of (seed, epoch)."""
        order = make_rng(self._config.train.seed, SHUFFLE_STREAM, epoch).permutation(len(self._train_scenes))
        size = self._config.train.batch_size
        scenes = [self._train_scenes[i] for i in order]
        return [scenes[i : i + size] for i in range(0, len(scenes), size)]

    def batch_loss(self, scenes: Sequence[SceneSpec]) -> Tuple[Tensor, SetLossOutput]:
        """Mean set loss over a batch, plus averaged components."""
        images = self._dataset.images([s.scene_id for s in scenes])
        weights = self._config.loss
        no_object_weight = self._config.train.no_object_weight
        outputs: List[SetLossOutput] = []
        if self._stage == "pe_pretrain":
            pe = self._model.pe
            boxes, logits = pe.detect(pe(Tensor(images)))
            for b, scene in enumerate(scenes):
                gt = np.array([p.box.as_list() for p in scene.participants]).reshape(-1, 4)
                labels = [p.class_id for p in scene.participants]
                loss, _ = match_and_loss(boxes[b], logits[b], gt, weights, labels, no_object_weight)
                outputs.append(loss)
        else:
            out = self._model(Tensor(images), intention_ids(scenes, self._vocab))
            if self._state.step % self._config.train.check_maps_every == 0:
                check_row_stochastic(out.maps)
            first = self._model.first_candidate_row
            for b, scene in enumerate(scenes):
                important = scene.important
                gt = np.array([important.box.as_list()]) if important is not None else np.zeros((0, 4))
                slots = slice(first, None)
                loss, _ = match_and_loss(
                    getitem(out.boxes, (b, slots)), getitem(out.logits, (b, slots)), gt, weights, None, no_object_weight
                )
                outputs.append(loss)

        scale = 1.0 / len(outputs)
        total = outputs[0].total
        for extra in outputs[1:]:
            total = total + extra.total
        total = total * scale
        summary = SetLossOutput(
            total=total,
            l_b=sum(o.l_b for o in outputs) * scale,
            l_giou=sum(o.l_giou for o in outputs) * scale,
            l_c=sum(o.l_c for o in outputs) * scale,
        )
        return total, summary

    def train_step(self, scenes: Sequence[SceneSpec], epoch: int) -> LossRecord:
        """One optimizer step.

        Raises:
            DivergenceError: If the forward pass or loss becomes non-finite
            InvariantViolation: If a relationship map is not row-stochastic
        """
        params = self.trainable.parameters()
        try:
            with Tape() as tape:
                total, summary = self.batch_loss(scenes)
            backward(total, tape)
        except NonFiniteError as e:
            logger.error(f"Training diverged at step {self._state.step} ({e.op_name}): {e}")
            where = e.op_name or "forward pass"
            raise DivergenceError(f"Non-finite value in {where}: {e}", step=self._state.step) from e
        grad_norm = clip_grad_norm(params, self._config.optimizer.clip_grad_norm)
        if not np.isfinite(grad_norm):
            raise DivergenceError(f"Non-finite gradient norm at step {self._state.step}", step=self._state.step)
        self._optimizer.step()
        self.trainable.zero_grad()

        record = summary.to_record(self._state.step, epoch)
        self._state.step += 1
        logger.debug(f"step {record.step} epoch {epoch}: total={record.total:.5f} |g|={grad_norm:.4f}")
        self._append_loss(record)
        self._notify(record)
        return record

    def _append_loss(self, record: LossRecord) -> None:
        self._out_dir.mkdir(parents=True, exist_ok=True)
        with open(self._out_dir / LOSS_CURVE, "a", encoding="utf-8") as f:
            f.write(json.dumps({**record.to_dict(), "config_hash": self._config_hash}, sort_keys=True) + "\n")

    def fit(self, epochs: int, threads: int = 1) -> TrainState:
        """Train until ``epochs`` epochs are complete (continuing a resumed state)."""
        validate_every = self._config.train.validate_every
        while self._state.epoch < epochs:
            epoch = self._state.epoch
            self._scheduler.set_epoch(epoch)
            records = [self.train_step(batch, epoch) for batch in self.epoch_batches(epoch)]
            mean_total = float(np.mean([r.total for r in records]))
            self._state.epoch += 1
            self._state.history.append({"epoch": epoch, "mean_total": mean_total, "lr": self._optimizer.lr})
            logger.info(f"[{self._stage}] epoch {epoch + 1}/{epochs} mean loss {mean_total:.5f}")
            if validate_every and self._state.epoch % validate_every == 0 and self._dataset.manifest.splits["val"]:
                self._validate(threads)
        return self._state

    def _validate(self, threads: int) -> None:
        if self._stage == "pe_pretrain":
            report = evaluate_detection(self._model, self._dataset, "val", self._config, threads)
        else:
            report, _ = evaluate(self._model, self._dataset, "val", self._config, self._vocab, threads=threads)
        logger.info(f"Validation after epoch {self._state.epoch}: mIoU {report.miou:.4f} ACC {report.acc:.4f}")
        if self._state.best_val is None or report.miou > self._state.best_val["miou"]:
            self._state.best_val = {"epoch": self._state.epoch, "miou": report.miou, "acc": report.acc}

    # Checkpointing

    def checkpoint(self) -> Checkpoint:
        tensors = {f"model.{name}": value for name, value in self.trainable.state_dict().items()}
        tensors.update({f"optim.{name}": value for name, value in self._optimizer.state_arrays().items()})
        return Checkpoint(
            stage=self._stage,
            config_hash=self._config_hash,
            model_hash=model_hash(self.trainable),
            tensors=tensors,
            metadata={
                "config": self._config.to_dict(),
                "train_state": self._state.to_dict(),
                "optimizer_step": self._optimizer.state.step,
                "vocab": self._vocab.to_dict(),
            },
        )

    def resume(self, checkpoint: Checkpoint) -> None:
        """Restore parameters, optimizer moments and progress.

        Raises:
            CheckpointError: If stage, config or architecture differ
        """
        if checkpoint.stage != self._stage:
            raise CheckpointError(f"Cannot resume {self._stage} from a {checkpoint.stage} checkpoint")
        if checkpoint.config_hash != self._config_hash:
            raise CheckpointError(f"Checkpoint config hash {checkpoint.config_hash} != {self._config_hash}")
        if checkpoint.model_hash != model_hash(self.trainable):
            raise CheckpointError("Checkpoint architecture does not match the model")
        self.trainable.load_state_dict(checkpoint.with_prefix("model."))
        self._optimizer.load_state_arrays(int(checkpoint.metadata["optimizer_step"]), checkpoint.with_prefix("optim."))
        saved = checkpoint.metadata["train_state"]
        self._state = TrainState(
            stage=saved["stage"],
            epoch=int(saved["epoch"]),
            step=int(saved["step"]),
            best_val=saved.get("best_val"),
            history=list(saved.get("history", [])),
        )
        logger.info(f"Resumed {self._stage} at epoch {self._state.epoch}, step {self._state.step}")


def load_pretrained_pe(model: DRUformer, path: Union[str, Path]) -> None:
    """Initialise the participants extractor from a pretraining checkpoint.

    Raises:
        CheckpointError: If the checkpoint is not a compatible pretraining checkpoint
    """
    checkpoint = load_checkpoint(path, expected_stage="pe_pretrain")
    if checkpoint.model_hash != model_hash(model.pe):
        raise CheckpointError(f"Pretrained extractor in {path} does not match the configured architecture")
    model.pe.load_state_dict(checkpoint.with_prefix("model."))
    logger.info(f"Initialised participants extractor from {path}")


def model_from_checkpoint(checkpoint: Checkpoint, config: RunConfig, vocab: IntentionVocab) -> DRUformer:
    """Rebuild a trained full model.

    Raises:
        CheckpointError: On stage, config or architecture mismatch
    """
    if checkpoint.stage != "full":
        raise CheckpointError(f"Expected a full checkpoint, got {checkpoint.stage}")
    if checkpoint.config_hash != config_hash(config):
        raise CheckpointError(f"Checkpoint config hash {checkpoint.config_hash} != {config_hash(config)}")
    model = build_model(config, vocab)
    if checkpoint.model_hash != model_hash(model):
        raise CheckpointError("Checkpoint architecture does not match the configuration")
    model.load_state_dict(checkpoint.with_prefix("model."))
    return model


# Evaluation


def _batches(items: Sequence[Any], size: int) -> List[Sequence[Any]]:
    return [items[i : i + size] for i in range(0, len(items), size)]


def predict(
    model: DRUformer, images: np.ndarray, ids: Sequence[int], threshold: float = 0.5
) -> Tuple[List[Prediction], Any]:
    """Predictions for a batch without recording gradients; also returns the raw output."""
    with no_grad():
        out = model(Tensor(images), ids)
    first = model.first_candidate_row
    predictions = [
        select_prediction(out.boxes.data[b], out.logits.data[b], first, threshold) for b in range(images.shape[0])
    ]
    return predictions, out


def _fan_out(
    fn: Callable[[Sequence[SceneSpec]], List[EvalPair]], batches: List[Sequence[SceneSpec]], threads: int
) -> List[EvalPair]:
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(fn, batches))
    else:
        results = [fn(batch) for batch in batches]
    return [pair for batch in results for pair in batch]


def evaluate(
    model: DRUformer,
    dataset: Dataset,
    split: str,
    config: RunConfig,
    vocab: IntentionVocab,
    subset: str = "all",
    threads: int = 1,
) -> Tuple[MetricsReport, List[Prediction]]:
    """mIoU / ACC of the important-object prediction over a split.

    Batches are evaluated in parallel and merged in scene-id order.

    Raises:
        DatasetError: If the selection is empty
    """
    scenes = select_subset(dataset.split(split), subset)
    if not scenes:
        raise DatasetError(f"No scenes in split {split!r} for subset {subset!r}")
    threshold = config.train.importance_threshold
    predictions: Dict[int, Prediction] = {}

    def run(batch: Sequence[SceneSpec]) -> List[EvalPair]:
        preds, _ = predict(model, dataset.images([s.scene_id for s in batch]), intention_ids(batch, vocab), threshold)
        pairs = []
        for scene, pred in zip(batch, preds):
            predictions[scene.scene_id] = pred
            box, degenerate = prediction_box(pred.box) if pred.box is not None else (None, False)
            important = scene.important
            pairs.append(
                EvalPair(
                    prediction=box,
                    label=to_xyxy(important.box) if important is not None else None,
                    layout=scene.layout,
                    category=important.category if important is not None else None,
                    degenerate_prediction=degenerate,
                )
            )
        return pairs

    pairs = _fan_out(run, _batches(scenes, config.train.batch_size), threads)
    report = summarize(pairs, config_hash(config), split if subset == "all" else f"{split}:{subset}")
    return report, [predictions[s.scene_id] for s in scenes]


def evaluate_detection(
    model: DRUformer, dataset: Dataset, split: str, config: RunConfig, threads: int = 1
) -> MetricsReport:
    """Detection quality of the pretraining head: each ground-truth object vs its matched slot.

    Raises:
        DatasetError: If the split holds no participants
    """
    scenes = [s for s in dataset.split(split) if s.participants]
    if not scenes:
        raise DatasetError(f"Split {split!r} has no participants to evaluate")
    pe = model.pe

    def run(batch: Sequence[SceneSpec]) -> List[EvalPair]:
        with no_grad():
            boxes, logits = pe.detect(pe(Tensor(dataset.images([s.scene_id for s in batch]))))
        pairs = []
        for b, scene in enumerate(batch):
            gt = np.array([p.box.as_list() for p in scene.participants])
            labels = [p.class_id for p in scene.participants]
            assignment = hungarian(match_cost(boxes.data[b], logits.data[b], gt, config.loss, labels))
            matched = dict(assignment.pairs)
            for g, participant in enumerate(scene.participants):
                box, degenerate = prediction_box(boxes.data[b][matched[g]])
                pairs.append(EvalPair(box, to_xyxy(participant.box), scene.layout, participant.category, degenerate))
        return pairs

    pairs = _fan_out(run, _batches(scenes, config.train.batch_size), threads)
    return summarize(pairs, config_hash(config), f"{split}:detection")


def detection_ious(model: DRUformer, images: np.ndarray, scenes: Sequence[SceneSpec], config: RunConfig) -> List[float]:
    """Matched IoUs of every participant in ``scenes`` (used by overfit checks)."""
    with no_grad():
        boxes, logits = model.pe.detect(model.pe(Tensor(images)))
    ious: List[float] = []
    for b, scene in enumerate(scenes):
        if not scene.participants:
            continue
        gt = np.array([p.box.as_list() for p in scene.participants])
        labels = [p.class_id for p in scene.participants]
        assignment = hungarian(match_cost(boxes.data[b], logits.data[b], gt, config.loss, labels))
        ious.extend(matched_ious(boxes.data[b], gt, assignment))
    return ious


__all__ = [
    "SUBSETS",
    "TrainState",
    "Trainer",
    "build_model",
    "evaluate",
    "evaluate_detection",
    "load_pretrained_pe",
    "load_vocab",
    "model_from_checkpoint",
    "predict",
    "select_subset",
]
