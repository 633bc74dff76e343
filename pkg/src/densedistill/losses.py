"""Composite training objective: dense distillation + logit matching + CE.

The total loss is the plain unweighted sum of the enabled terms; disabled
terms contribute exactly zero. Teacher activations are always produced
under no_grad, so no gradient can reach teacher parameters through any
term.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

from .affinity import add_loss_all_scales
from .config import TrainConfig
from .errors import ContractViolation
from .models import FeaturePyramid, PolypClassifier
from .relations import semantic_relations


@dataclass
class LossBreakdown:
    """Scalar components of one objective evaluation; total is their sum."""

    l_dist: Tensor
    l_logit: Tensor
    l_cls: Tensor
    l_total: Tensor

    def scalars(self) -> dict[str, float]:
        return {
            "l_dist": float(self.l_dist.detach()),
            "l_logit": float(self.l_logit.detach()),
            "l_cls": float(self.l_cls.detach()),
            "l_total": float(self.l_total.detach()),
        }


def classification_loss(logits: Tensor, labels: Tensor | int) -> Tensor:
    """Cross-entropy of softmaxed logits against hard labels in {0, 1}."""
    if logits.ndim == 1:
        logits = logits[None]
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device).reshape(-1)
    if bool(((labels != 0) & (labels != 1)).any()):
        raise ContractViolation(f"labels must be in {{0, 1}}, got {labels.tolist()}")
    if labels.shape[0] != logits.shape[0]:
        raise ContractViolation(f"{logits.shape[0]} logit rows vs {labels.shape[0]} labels")
    return F.cross_entropy(logits, labels)


def logit_distillation_loss(student_logits: Tensor, teacher_logits: Tensor, match: str = "logits") -> Tensor:
    """Norm of the student-teacher logit difference (soft-label matching).

    ``match="probs"`` compares softmax outputs instead of raw logits.
    Batched inputs give the mean of per-sample norms.
    """
    if student_logits.shape != teacher_logits.shape:
        raise ContractViolation(
            f"logit shape mismatch: {tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}"
        )
    if match == "probs":
        student_logits = F.softmax(student_logits, dim=-1)
        teacher_logits = F.softmax(teacher_logits, dim=-1)
    elif match != "logits":
        raise ContractViolation(f"unknown logit match mode {match!r}")
    diff = student_logits - teacher_logits
    if diff.ndim == 1:
        return diff.norm()
    return diff.norm(dim=-1).mean()


def consistency_loss(student_levels: dict[int, Tensor], teacher_levels: dict[int, Tensor]) -> Tensor:
    """Same-position feature distance, the alignment-assuming fallback.

    Mean over positions of the channel-wise L2 distance between student and
    teacher features at identical coordinates, averaged over scales. This is
    what replaces the affinity-weighted loss when dense matching is
    disabled.
    """
    if set(student_levels) != set(teacher_levels):
        raise ContractViolation("stage taps differ between pyramids")
    per_scale = []
    for l in sorted(student_levels):
        fs, ft = student_levels[l], teacher_levels[l]
        if fs.shape != ft.shape:
            raise ContractViolation(f"stage {l} shape mismatch: {fs.shape} vs {ft.shape}")
        sq = (fs - ft).pow(2).sum(dim=0)
        positive = sq > 0
        dist = torch.sqrt(torch.where(positive, sq, torch.ones_like(sq))) * positive
        per_scale.append(dist.mean())
    return torch.stack(per_scale).mean()


def _zero(ref: Tensor) -> Tensor:
    return ref.sum() * 0.0


def total_loss(
    samples,
    student: PolypClassifier,
    teacher: PolypClassifier,
    config: TrainConfig,
    student_pyramid: FeaturePyramid | None = None,
    teacher_pyramid: FeaturePyramid | None = None,
) -> LossBreakdown:
    """Objective for one sample or a batch of samples.

    ``samples`` is a PairedSample or a sequence of them. Pyramids may be
    passed in when the caller already ran the forward passes (the training
    loop does); otherwise the student runs in its current mode and the
    teacher under no_grad.
    """
    if not isinstance(samples, Sequence):
        samples = [samples]
    images_w = torch.stack([s.image_w for s in samples])
    images_n = torch.stack([s.image_n for s in samples])
    labels = torch.tensor([s.label for s in samples], dtype=torch.long)

    if student_pyramid is None:
        student_pyramid = student(images_w)
    if teacher_pyramid is None:
        with torch.no_grad():
            teacher_pyramid = teacher(images_n)

    l_cls = classification_loss(student_pyramid.logits, labels)
    if config.enable_logit:
        l_logit = logit_distillation_loss(
            student_pyramid.logits, teacher_pyramid.logits.detach(), match=config.logit_match
        )
    else:
        l_logit = _zero(student_pyramid.logits)

    if config.enable_dist:
        last = max(student.stage_taps)
        per_sample = []
        for i in range(len(samples)):
            pyr_s = student_pyramid.select(i)
            pyr_t = teacher_pyramid.select(i)
            if config.enable_add:
                grids = {l: tuple(f.shape[-2:]) for l, f in pyr_s.levels.items()}
                cls_idx = (
                    int(labels[i]) if config.cam_class == "label"
                    else int(pyr_s.logits.detach().argmax())
                )
                maps = semantic_relations(
                    images_w[i], images_n[i],
                    pyr_s.levels[last].detach(), pyr_t.levels[last],
                    student.head_weights.detach(), teacher.head_weights,
                    cls_idx, grids,
                    psr_iters=config.psr_iters if config.enable_psr else 0,
                    tau1=config.tau1, tau2=config.tau2,
                    enabled=config.enable_srg,
                )
                per_sample.append(add_loss_all_scales(
                    pyr_s.levels,
                    {l: f.detach() for l, f in pyr_t.levels.items()},
                    {l: m.relation for l, m in maps.items()},
                    bidirectional=config.enable_bi_a,
                    detach_affinity=config.detach_affinity,
                    norm=config.feature_norm,
                ))
            else:
                per_sample.append(consistency_loss(
                    pyr_s.levels, {l: f.detach() for l, f in pyr_t.levels.items()}
                ))
        l_dist = torch.stack(per_sample).mean()
    else:
        l_dist = _zero(student_pyramid.logits)

    return LossBreakdown(l_dist=l_dist, l_logit=l_logit, l_cls=l_cls,
                         l_total=l_dist + l_logit + l_cls)
