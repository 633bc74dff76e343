"""Training loops for the teacher (plain CE) and the distilled student.

One control thread mutates parameters; batches are assembled on the fly
from in-memory samples or lazily loaded descriptors. Every step appends a
JSON line {step, epoch, l_dist, l_logit, l_cls, l_total} to the loss log,
and a non-finite total aborts the run with the offending step recorded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import TrainConfig
from .data import PairDescriptor, PairedSample
from .errors import ContractViolation, DivergenceError
from .losses import LossBreakdown, total_loss
from .models import PolypClassifier, save_checkpoint


@dataclass
class TrainResult:
    checkpoint_path: Path | None
    log_path: Path | None
    history: list[dict]
    model: PolypClassifier


def _materialize(item) -> PairedSample:
    return item.load() if isinstance(item, PairDescriptor) else item


def _resize_pair(sample: PairedSample, size: int) -> PairedSample:
    if sample.image_w.shape[-2:] == (size, size):
        return sample
    def rs(img):
        return F.interpolate(img[None], size=(size, size), mode="bilinear", align_corners=False)[0]
    return PairedSample(
        image_w=rs(sample.image_w), image_n=rs(sample.image_n),
        label=sample.label, patient_id=sample.patient_id, pair_id=sample.pair_id,
        gt_warp=sample.gt_warp, gt_lesion_mask_w=sample.gt_lesion_mask_w,
    )


def _flip_pair(sample: PairedSample) -> PairedSample:
    # The same flip is applied to both modalities so the pairing (and the
    # semantics of cross-domain matching) survives augmentation.
    return PairedSample(
        image_w=sample.image_w.flip(-1), image_n=sample.image_n.flip(-1),
        label=sample.label, patient_id=sample.patient_id, pair_id=sample.pair_id,
    )


def _batches(items, config: TrainConfig, rng: np.random.Generator, augment: bool):
    order = rng.permutation(len(items))
    for start in range(0, len(items), config.batch_size):
        chunk = [items[i] for i in order[start:start + config.batch_size]]
        samples = [_resize_pair(_materialize(it), config.input_size) for it in chunk]
        if augment and config.hflip:
            flips = rng.random(len(samples)) < 0.5
            samples = [_flip_pair(s) if f else s for s, f in zip(samples, flips)]
        yield samples


def _log_record(step: int, epoch: int, breakdown: LossBreakdown) -> dict:
    rec = {"step": step, "epoch": epoch}
    rec.update(breakdown.scalars())
    return rec


def train_teacher(
    dataset: Sequence,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    backbone: str | None = None,
) -> TrainResult:
    """Cross-entropy training of a classifier on teacher-modality images.

    Same loop, optimizer, and hyperparameters as student training, with
    every distillation term disabled.
    """
    torch.manual_seed(config.seed)
    model = PolypClassifier(
        backbone_id=backbone or config.backbone,
        stage_taps=config.stage_taps,
        trainable=True,
    )
    def step_loss(samples: list[PairedSample]) -> LossBreakdown:
        images = torch.stack([s.image_n for s in samples])
        labels = torch.tensor([s.label for s in samples], dtype=torch.long)
        pyr = model(images)
        l_cls = F.cross_entropy(pyr.logits, labels)
        zero = pyr.logits.sum() * 0.0
        return LossBreakdown(l_dist=zero, l_logit=zero, l_cls=l_cls, l_total=l_cls)

    return _run(model, dataset, config, step_loss, out_dir, name="teacher")


def train_student(
    dataset: Sequence,
    config: TrainConfig,
    teacher: PolypClassifier,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Distillation training of the student against a frozen teacher."""
    if teacher.trainable:
        raise ContractViolation("teacher must be frozen (trainable=False)")
    torch.manual_seed(config.seed)
    model = PolypClassifier(
        backbone_id=config.backbone, stage_taps=config.stage_taps, trainable=True,
    )
    if tuple(teacher.stage_taps) != tuple(model.stage_taps):
        raise ContractViolation("teacher and student must share stage taps")
    teacher.eval()

    def step_loss(samples: list[PairedSample]) -> LossBreakdown:
        return total_loss(samples, model, teacher, config)

    return _run(model, dataset, config, step_loss, out_dir, name="student")


def _run(model, dataset, config, step_loss, out_dir, name: str) -> TrainResult:
    if len(dataset) == 0:
        raise ContractViolation("empty training dataset")
    model.train()
    opt = torch.optim.Adam(
        [p for p in model.parameters() if p.requires_grad],
        lr=config.learning_rate, weight_decay=config.weight_decay,
    )
    rng = np.random.default_rng(config.seed)
    history: list[dict] = []
    log_file = None
    log_path = None
    ckpt_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / f"{name}_loss_log.jsonl"
        log_file = log_path.open("w")
    try:
        step = 0
        for epoch in range(config.epochs):
            for samples in _batches(dataset, config, rng, augment=True):
                breakdown = step_loss(samples)
                total = breakdown.l_total
                if not bool(torch.isfinite(total)):
                    raise DivergenceError(
                        f"non-finite loss at step {step} (epoch {epoch})", step=step
                    )
                opt.zero_grad()
                total.backward()
                opt.step()
                rec = _log_record(step, epoch, breakdown)
                history.append(rec)
                if log_file is not None:
                    log_file.write(json.dumps(rec) + "\n")
                step += 1
            if log_file is not None:
                log_file.flush()
    finally:
        if log_file is not None:
            log_file.close()
    model.eval()
    if out_dir is not None:
        ckpt_path = save_checkpoint(model, Path(out_dir) / f"{name}.pt", config.input_size)
    return TrainResult(checkpoint_path=ckpt_path, log_path=log_path, history=history, model=model)


def predict_scores(
    model: PolypClassifier,
    dataset: Sequence,
    config: TrainConfig,
    modality: str = "w",
) -> tuple[np.ndarray, np.ndarray]:
    """Positive-class probabilities and labels for a dataset, in order."""
    model.eval()
    scores = []
    labels = []
    with torch.no_grad():
        for start in range(0, len(dataset), config.batch_size):
            samples = [
                _resize_pair(_materialize(it), config.input_size)
                for it in dataset[start:start + config.batch_size]
            ]
            images = torch.stack([
                s.image_w if modality == "w" else s.image_n for s in samples
            ])
            pyr = model(images)
            probs = torch.softmax(pyr.logits, dim=-1)[:, 1]
            scores.extend(float(p) for p in probs)
            labels.extend(s.label for s in samples)
    return np.array(scores), np.array(labels)


def smoothed(values: list[float], window: int = 10) -> list[float]:
    """Trailing moving average, used for monotonicity checks on loss logs."""
    out = []
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        out.append(sum(values[lo:i + 1]) / (i + 1 - lo))
    return out
