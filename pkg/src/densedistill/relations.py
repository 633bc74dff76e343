"""Semantic relation generation: CAM maps, similarity-guided refinement,
double-threshold masks, and the binary relation matrix.

The relation matrix restricts dense distillation to cross-modality position
pairs whose class-evidence masks agree. Pipeline, per sample:

1. a raw CAM per modality at the deepest feature resolution, normalized to
   [0, 1];
2. ``psr_iters`` rounds of local aggregation weighted by RGB similarity
   (the image is bilinearly downsampled to the CAM resolution first);
3. per scale: bilinear resize of the refined map to the feature grid, then
   double-threshold trinarization into {background, unsure, polyp};
4. the relation matrix marks pairs whose masks match and are not unsure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ContractViolation

if TYPE_CHECKING:
    from .config import TrainConfig
    from .data import PairedSample
    from .models import PolypClassifier

BACKGROUND = 0
POLYP = 1
UNSURE = 2

# 3x3 window offsets in fixed row-major order; the center is part of its own
# neighborhood so a pixel's aggregation weight never degenerates to zero.
_OFFSETS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]

_SQRT3 = 3.0 ** 0.5


def psr_weights(image: Tensor) -> tuple[Tensor, Tensor]:
    """Per-offset aggregation weights for one [3, h, w] image in [0, 1].

    Returns ``(weights, denom)`` where ``weights[o]`` holds
    ``1 - ||I_p - I_{p+o}|| / sqrt(3)`` for every pixel p whose neighbor at
    offset o lies inside the image (0 outside), and ``denom`` is the sum
    over offsets. Offsets beyond the border simply drop out of the
    normalization; the color distance is scaled so weights stay in [0, 1].
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise ContractViolation(f"expected [3, h, w] image, got {tuple(image.shape)}")
    _, h, w = image.shape
    weights = image.new_zeros((len(_OFFSETS), h, w))
    for o, (dy, dx) in enumerate(_OFFSETS):
        ys, ye = max(0, -dy), min(h, h - dy)
        xs, xe = max(0, -dx), min(w, w - dx)
        center = image[:, ys:ye, xs:xe]
        neighbor = image[:, ys + dy:ye + dy, xs + dx:xe + dx]
        dist = (center - neighbor).pow(2).sum(dim=0).sqrt() / _SQRT3
        weights[o, ys:ye, xs:xe] = 1.0 - dist
    # accumulate the normalizer in the same offset order as the refinement
    # loop, so a constant map is an exact floating-point fixed point
    denom = weights[0].clone()
    for o in range(1, len(_OFFSETS)):
        denom = denom + weights[o]
    return weights, denom


def psr_refine(cam: Tensor, image: Tensor, iters: int) -> Tensor:
    """Iteratively smooth a [h, w] map by color-similarity-weighted 3x3 means.

    Each iteration replaces every pixel by the weighted average of its 3x3
    neighborhood (clipped at borders), with weights from ``psr_weights`` on
    the fixed guidance image. ``iters=0`` returns the input unchanged.
    """
    if iters < 0:
        raise ContractViolation(f"iteration count must be >= 0, got {iters}")
    if cam.ndim != 2:
        raise ContractViolation(f"expected [h, w] map, got {tuple(cam.shape)}")
    if image.shape[-2:] != cam.shape:
        raise ContractViolation(
            f"image {tuple(image.shape)} not aligned to map {tuple(cam.shape)}"
        )
    if iters == 0:
        return cam.clone()
    weights, denom = psr_weights(image.to(cam.dtype))
    h, w = cam.shape
    out = cam
    for _ in range(iters):
        acc = cam.new_zeros((h, w))
        for o, (dy, dx) in enumerate(_OFFSETS):
            ys, ye = max(0, -dy), min(h, h - dy)
            xs, xe = max(0, -dx), min(w, w - dx)
            acc[ys:ye, xs:xe] = acc[ys:ye, xs:xe] + (
                weights[o, ys:ye, xs:xe] * out[ys + dy:ye + dy, xs + dx:xe + dx]
            )
        out = acc / denom
    return out


def resize_map(m: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Bilinear resize of a [h, w] map."""
    return F.interpolate(
        m[None, None], size=out_hw, mode="bilinear", align_corners=False
    )[0, 0]


def trinarize(refined: Tensor, tau1: float, tau2: float, out_hw: tuple[int, int] | None = None) -> Tensor:
    """Double-threshold a [0, 1] map into {BACKGROUND, UNSURE, POLYP}.

    Values <= tau1 are background, values >= tau2 are polyp, everything in
    between is unsure. When ``out_hw`` is given the map is bilinearly
    resized to that grid before thresholding.
    """
    if not (0.0 < tau1 < tau2 < 1.0):
        raise ContractViolation(f"need 0 < tau1 < tau2 < 1, got tau1={tau1}, tau2={tau2}")
    if out_hw is not None:
        refined = resize_map(refined, out_hw)
    mask = torch.full_like(refined, UNSURE, dtype=torch.int8)
    mask[refined <= tau1] = BACKGROUND
    mask[refined >= tau2] = POLYP
    return mask


def relation_matrix(mask_student: Tensor, mask_teacher: Tensor) -> Tensor:
    """Binary [H*W, H*W] matrix of semantically consistent position pairs.

    Entry (i, j) is 1 iff the student mask at i equals the teacher mask at j
    and neither is UNSURE.
    """
    ms = mask_student.reshape(-1)
    mt = mask_teacher.reshape(-1)
    same = ms[:, None] == mt[None, :]
    sure = (ms[:, None] != UNSURE) & (mt[None, :] != UNSURE)
    return (same & sure).to(torch.float32)


@dataclass
class SemanticMaps:
    """Per-scale relation matrix plus the maps it was derived from.

    The CAM/mask fields are ``None`` when relation generation is disabled
    (the relation is then all-ones and distillation is unmasked).
    """

    relation: Tensor
    cam_raw_student: Tensor | None = None
    cam_raw_teacher: Tensor | None = None
    cam_refined_student: Tensor | None = None
    cam_refined_teacher: Tensor | None = None
    mask_student: Tensor | None = None
    mask_teacher: Tensor | None = None
    cam_degenerate: bool = False


def semantic_relations(
    image_student: Tensor,
    image_teacher: Tensor,
    feat_student_last: Tensor,
    feat_teacher_last: Tensor,
    head_weights_student: Tensor,
    head_weights_teacher: Tensor,
    class_index: int,
    scale_grids: dict[int, tuple[int, int]],
    psr_iters: int,
    tau1: float,
    tau2: float,
    enabled: bool = True,
) -> dict[int, SemanticMaps]:
    """Relation matrices for every scale from images and last-stage features.

    The features and head weights are treated as constants (the relation is
    a hard mask, so no gradient flows through it). With ``enabled=False``
    every scale gets an all-ones relation.
    """
    from .models import compute_cam  # local import to avoid a cycle

    if not enabled:
        return {
            l: SemanticMaps(relation=torch.ones(hw[0] * hw[1], hw[0] * hw[1]))
            for l, hw in scale_grids.items()
        }

    with torch.no_grad():
        cam_s, degen_s = compute_cam(feat_student_last.detach(), head_weights_student.detach(), class_index)
        cam_t, degen_t = compute_cam(feat_teacher_last.detach(), head_weights_teacher.detach(), class_index)
        cam_hw = tuple(cam_s.shape)
        img_s = F.interpolate(image_student[None], size=cam_hw, mode="bilinear", align_corners=False)[0]
        img_t = F.interpolate(image_teacher[None], size=cam_hw, mode="bilinear", align_corners=False)[0]
        ref_s = psr_refine(cam_s, img_s, psr_iters)
        ref_t = psr_refine(cam_t, img_t, psr_iters)

        out: dict[int, SemanticMaps] = {}
        for l, hw in scale_grids.items():
            mask_s = trinarize(ref_s, tau1, tau2, out_hw=hw)
            mask_t = trinarize(ref_t, tau1, tau2, out_hw=hw)
            out[l] = SemanticMaps(
                relation=relation_matrix(mask_s, mask_t),
                cam_raw_student=cam_s,
                cam_raw_teacher=cam_t,
                cam_refined_student=ref_s,
                cam_refined_teacher=ref_t,
                mask_student=mask_s,
                mask_teacher=mask_t,
                cam_degenerate=degen_s or degen_t,
            )
    return out


def build_relations(
    sample: "PairedSample",
    teacher: "PolypClassifier",
    student: "PolypClassifier",
    config: "TrainConfig",
) -> dict[int, SemanticMaps]:
    """End-to-end relation generation for one sample in inference mode."""
    from .models import extract

    pyr_s = extract(student, sample.image_w)
    pyr_t = extract(teacher, sample.image_n)
    last = max(student.stage_taps)
    scale_grids = {l: tuple(pyr_s.levels[l].shape[-2:]) for l in student.stage_taps}
    return semantic_relations(
        sample.image_w,
        sample.image_n,
        pyr_s.levels[last],
        pyr_t.levels[last],
        student.head_weights,
        teacher.head_weights,
        sample.label if config.cam_class == "label" else int(pyr_s.logits.argmax()),
        scale_grids,
        psr_iters=config.psr_iters if config.enable_psr else 0,
        tau1=config.tau1,
        tau2=config.tau2,
        enabled=config.enable_srg,
    )
