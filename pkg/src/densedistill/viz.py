"""Rendering helpers: CAM overlays and semantic-map panels as PNG grids."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .models import PolypClassifier, compute_cam, extract
from .relations import BACKGROUND, POLYP, UNSURE


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def _colormap(m: np.ndarray) -> np.ndarray:
    """[h, w] map in [0,1] -> [h, w, 3] heat colors."""
    from matplotlib import cm

    return cm.jet(np.clip(m, 0.0, 1.0))[..., :3]


def _upsample(m: torch.Tensor, hw: tuple[int, int]) -> np.ndarray:
    return F.interpolate(m[None, None].float(), size=hw, mode="bilinear",
                         align_corners=False)[0, 0].numpy()


def cam_overlay(image: torch.Tensor, cam: torch.Tensor, alpha: float = 0.5) -> np.ndarray:
    """Blend a CAM heat map over an image; returns [H, W, 3] in [0,1]."""
    hw = tuple(image.shape[-2:])
    heat = _colormap(_upsample(cam, hw))
    base = image.permute(1, 2, 0).numpy()
    return (1.0 - alpha) * base + alpha * heat


MASK_COLORS = {
    BACKGROUND: (0.15, 0.15, 0.6),
    UNSURE: (0.6, 0.6, 0.15),
    POLYP: (0.7, 0.1, 0.1),
}


def mask_panel(mask: torch.Tensor, hw: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor render of a trinary mask as a 3-color image."""
    m = mask.numpy()
    out = np.zeros(m.shape + (3,))
    for value, color in MASK_COLORS.items():
        out[m == value] = color
    rep_h, rep_w = hw[0] // m.shape[0], hw[1] // m.shape[1]
    out = np.repeat(np.repeat(out, rep_h, axis=0), rep_w, axis=1)
    pad_h, pad_w = hw[0] - out.shape[0], hw[1] - out.shape[1]
    if pad_h or pad_w:
        out = np.pad(out, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
    return out


def save_grid(rows: list[list[np.ndarray]], path: str | Path) -> Path:
    """Stack panels into one PNG; every panel must share a shape."""
    from PIL import Image

    grid = np.concatenate([np.concatenate(row, axis=1) for row in rows], axis=0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_uint8(grid)).save(path)
    return path


def export_cam_overlays(
    samples,
    student: PolypClassifier,
    teacher: PolypClassifier,
    path: str | Path,
) -> Path:
    """Fig-style grid: one row per sample, panels input | student CAM | teacher CAM."""
    rows = []
    for sample in samples:
        pyr_s = extract(student, sample.image_w)
        pyr_t = extract(teacher, sample.image_n)
        last = max(student.stage_taps)
        cam_s, _ = compute_cam(pyr_s.levels[last], student.head_weights, sample.label)
        cam_t, _ = compute_cam(pyr_t.levels[last], teacher.head_weights, sample.label)
        rows.append([
            sample.image_w.permute(1, 2, 0).numpy(),
            cam_overlay(sample.image_w, cam_s),
            cam_overlay(sample.image_n, cam_t),
        ])
    return save_grid(rows, path)


def export_relation_panels(sample, maps, path: str | Path) -> Path:
    """Per-sample semantic-map strip: input, raw CAM, refined CAM, mask, pair.

    ``maps`` is one SemanticMaps instance (any scale; the CAMs are shared
    across scales and the mask shown is the one for that scale).
    """
    hw = tuple(sample.image_w.shape[-2:])
    panels = [
        sample.image_w.permute(1, 2, 0).numpy(),
        _colormap(_upsample(maps.cam_raw_student, hw)),
        _colormap(_upsample(maps.cam_refined_student, hw)),
        mask_panel(maps.mask_student, hw),
        sample.image_n.permute(1, 2, 0).numpy(),
    ]
    return save_grid([panels], path)
