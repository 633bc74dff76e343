"""Datasets: manifest loading, patient-level k-fold splits, and a synthetic
misaligned paired-modality generator with known correspondences.

The generator renders one scene per pair and produces two views of it:

* the student-modality image shows the lesion at low texture contrast with
  nuisance clutter (color jitter, specular highlights, noise);
* the teacher-modality image shows the same scene with the class-
  discriminative lesion texture at high contrast, under a modality color
  transform and a random homography.

Class 1 lesions carry fine dark striations, class 0 lesions coarse smooth
bands; both modalities contain the signal but only the teacher modality
makes it easy. The homography and the lesion mask are recorded so tests
can check correspondence recovery against ground truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import (
    ContractViolation,
    ManifestDuplicateError,
    ManifestLabelError,
    ManifestMissingError,
    ManifestPathError,
    ManifestSchemaError,
)


@dataclass
class PairedSample:
    """One student-modality image, one teacher-modality image, shared label.

    ``gt_warp`` (synthetic pairs only) maps homogeneous student-image
    coordinates to teacher-image coordinates; ``gt_lesion_mask_w`` is the
    lesion support in the student image.
    """

    image_w: Tensor
    image_n: Tensor
    label: int
    patient_id: str
    pair_id: str = ""
    gt_warp: np.ndarray | None = None
    gt_lesion_mask_w: np.ndarray | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ContractViolation(f"label must be 0 or 1, got {self.label}")
        if self.image_w.shape[-2:] != self.image_n.shape[-2:]:
            raise ContractViolation(
                f"paired images differ in size: {tuple(self.image_w.shape)} vs {tuple(self.image_n.shape)}"
            )
        if self.gt_warp is not None:
            if self.gt_warp.shape != (3, 3) or abs(np.linalg.det(self.gt_warp)) <= 1e-6:
                raise ContractViolation("gt_warp must be an invertible 3x3 matrix")


@dataclass
class PairDescriptor:
    """Lazily loaded manifest entry."""

    pair_id: str
    patient_id: str
    label: int
    wli_path: Path
    nbi_path: Path
    gt_warp: np.ndarray | None = None
    mask_path: Path | None = None

    def load(self) -> PairedSample:
        mask = None
        if self.mask_path is not None:
            mask = _read_image(self.mask_path)[0].numpy() > 0.5
        return PairedSample(
            image_w=_read_image(self.wli_path),
            image_n=_read_image(self.nbi_path),
            label=self.label,
            patient_id=self.patient_id,
            pair_id=self.pair_id,
            gt_warp=self.gt_warp,
            gt_lesion_mask_w=mask,
        )


def _read_image(path: Path) -> Tensor:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def _write_image(path: Path, img: Tensor | np.ndarray) -> None:
    from PIL import Image

    arr = img.numpy() if isinstance(img, Tensor) else img
    if arr.ndim == 3:
        arr = np.transpose(arr, (1, 2, 0))
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

_REQUIRED_KEYS = ("pair_id", "patient_id", "label", "wli_path", "nbi_path")


def load_manifest(path: str | Path) -> list[PairDescriptor]:
    """Parse a JSON-lines manifest into validated descriptors.

    Each line is an object with pair_id, patient_id, label, wli_path and
    nbi_path (paths relative to the manifest's directory). A ``gt.json``
    sidecar next to the manifest, when present, contributes ground-truth
    warps and lesion-mask paths. Images are loaded lazily.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestMissingError(f"manifest not found: {path}")
    root = path.parent
    sidecar: dict = {}
    sidecar_path = root / "gt.json"
    if sidecar_path.exists():
        sidecar = json.loads(sidecar_path.read_text())

    descriptors: list[PairDescriptor] = []
    seen: set[tuple[str, str]] = set()
    for i, line in enumerate(path.read_text().splitlines()):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestSchemaError(f"invalid JSON ({exc})", entry=i) from exc
        if not isinstance(entry, dict):
            raise ManifestSchemaError("entry is not an object", entry=i)
        for key in _REQUIRED_KEYS:
            if key not in entry:
                raise ManifestSchemaError(f"missing key {key!r}", entry=i)
        if not isinstance(entry["label"], int) or isinstance(entry["label"], bool):
            raise ManifestSchemaError(f"label must be an integer, got {entry['label']!r}", entry=i)
        if entry["label"] not in (0, 1):
            raise ManifestLabelError(f"label must be 0 or 1, got {entry['label']}", entry=i)
        key = (str(entry["patient_id"]), str(entry["pair_id"]))
        if key in seen:
            raise ManifestDuplicateError(f"duplicate (patient_id, pair_id) {key}")
        seen.add(key)
        wli = root / entry["wli_path"]
        nbi = root / entry["nbi_path"]
        for p in (wli, nbi):
            if not p.exists():
                raise ManifestPathError(f"image path does not exist: {p}", entry=i)
        extra = sidecar.get(str(entry["pair_id"]), {})
        warp = np.array(extra["gt_warp"], dtype=np.float64).reshape(3, 3) if "gt_warp" in extra else None
        mask_path = root / extra["mask_path"] if "mask_path" in extra else None
        descriptors.append(PairDescriptor(
            pair_id=str(entry["pair_id"]),
            patient_id=str(entry["patient_id"]),
            label=entry["label"],
            wli_path=wli,
            nbi_path=nbi,
            gt_warp=warp,
            mask_path=mask_path,
        ))
    return descriptors


# ---------------------------------------------------------------------------
# Patient-level folds
# ---------------------------------------------------------------------------

@dataclass
class Fold:
    train_patients: frozenset[str]
    test_patients: frozenset[str]


@dataclass
class FoldPlan:
    folds: list[Fold] = field(default_factory=list)

    def split(self, descriptors, index: int):
        """(train, test) descriptor lists for one fold."""
        fold = self.folds[index]
        train = [d for d in descriptors if d.patient_id in fold.train_patients]
        test = [d for d in descriptors if d.patient_id in fold.test_patients]
        return train, test


def kfold_split(descriptors, k: int = 5, seed: int = 0) -> FoldPlan:
    """Shuffle patients by seed and partition them into k near-equal folds.

    Every patient lands in exactly one test fold and never on both sides of
    the same fold.
    """
    patients = sorted({d.patient_id for d in descriptors})
    if len(patients) < k:
        raise ContractViolation(f"need at least {k} distinct patients, got {len(patients)}")
    rng = np.random.default_rng(seed)
    order = [patients[i] for i in rng.permutation(len(patients))]
    groups = np.array_split(np.arange(len(order)), k)
    all_patients = set(order)
    folds = []
    for g in groups:
        test = frozenset(order[i] for i in g)
        folds.append(Fold(train_patients=frozenset(all_patients - test), test_patients=test))
    return FoldPlan(folds=folds)


# ---------------------------------------------------------------------------
# Synthetic paired-image generator
# ---------------------------------------------------------------------------

def _smooth_noise(rng: np.random.Generator, size: int, cells: int, amp: float) -> np.ndarray:
    """Low-frequency noise field: a coarse random grid, bilinearly upsampled."""
    grid = rng.standard_normal((cells, cells)).astype(np.float64)
    t = torch.from_numpy(grid)[None, None]
    up = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=True)[0, 0]
    return amp * up.numpy()


def _solve_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 homography mapping 4 source points to 4 destination points."""
    rows = []
    rhs = []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rhs.append(u)
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs.append(v)
    h = np.linalg.solve(np.array(rows, dtype=np.float64), np.array(rhs, dtype=np.float64))
    return np.array([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])


def _random_homography(rng: np.random.Generator, size: int, magnitude: float) -> np.ndarray:
    """Corner-jitter homography; jitter radius is magnitude * 15% of width."""
    if magnitude == 0.0:
        return np.eye(3)
    s = float(size)
    corners = np.array([[0.0, 0.0], [s, 0.0], [s, s], [0.0, s]])
    radius = magnitude * 0.15 * s
    while True:
        jitter = rng.uniform(-radius, radius, size=(4, 2))
        warped = corners + jitter
        h = _solve_homography(corners, warped)
        if abs(np.linalg.det(h)) > 1e-6:
            return h


def _warp_image(img: np.ndarray, warp: np.ndarray, fill: np.ndarray) -> np.ndarray:
    """Render ``img`` (defined in source coords) under a source->dest warp.

    Output pixel centers are pulled back through the inverse warp and
    bilinearly sampled; points falling outside the source image take the
    fill color.
    """
    c, h, w = img.shape
    inv = np.linalg.inv(warp)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64) + 0.5,
                         np.arange(w, dtype=np.float64) + 0.5, indexing="ij")
    ones = np.ones_like(xs)
    pts = np.stack([xs, ys, ones], axis=0).reshape(3, -1)
    src = inv @ pts
    sx = src[0] / src[2]
    sy = src[1] / src[2]
    # align_corners=False normalization: pixel center p -> (2p/size) - 1
    gx = (2.0 * sx / w) - 1.0
    gy = (2.0 * sy / h) - 1.0
    grid = torch.from_numpy(np.stack([gx, gy], axis=-1).reshape(1, h, w, 2))
    timg = torch.from_numpy(img)[None]
    sampled = F.grid_sample(timg, grid, mode="bilinear", padding_mode="zeros", align_corners=False)[0]
    inside = F.grid_sample(torch.ones_like(timg[:, :1]), grid, mode="bilinear",
                           padding_mode="zeros", align_corners=False)[0, 0]
    out = sampled.numpy()
    alpha = inside.numpy()
    return out * alpha + fill[:, None, None] * (1.0 - alpha)


def generate_synthetic_pair(
    seed: int,
    label: int,
    warp_magnitude: float,
    size: int = 448,
    patient_id: str | None = None,
    pair_id: str | None = None,
) -> PairedSample:
    """Deterministic synthetic pair with ground-truth warp and lesion mask.

    ``warp_magnitude`` in [0, 1] scales the corner jitter of the homography
    taking student-image coordinates to teacher-image coordinates; 0 means
    the two views differ only by the modality color transform.
    """
    if label not in (0, 1):
        raise ContractViolation(f"label must be 0 or 1, got {label}")
    if not (0.0 <= warp_magnitude <= 1.0):
        raise ContractViolation(f"warp_magnitude must be in [0, 1], got {warp_magnitude}")
    rng = np.random.default_rng(seed)
    s = size
    yy, xx = np.meshgrid(np.arange(s, dtype=np.float64), np.arange(s, dtype=np.float64), indexing="ij")

    # --- shared scene geometry (student-image frame) ---
    cy, cx = rng.uniform(0.36 * s, 0.64 * s, size=2)
    ax = rng.uniform(0.13 * s, 0.21 * s)
    bx = rng.uniform(0.13 * s, 0.21 * s)
    theta = rng.uniform(0.0, np.pi)
    dx, dy = xx - cx, yy - cy
    u = (dx * np.cos(theta) + dy * np.sin(theta)) / ax
    v = (-dx * np.sin(theta) + dy * np.cos(theta)) / bx
    ellipse = u * u + v * v
    lesion_mask = ellipse <= 1.0
    soft = 1.0 / (1.0 + np.exp(6.0 * (ellipse - 1.0)))

    # class-discriminative texture: fine striations for class 1, coarse
    # bands for class 0; domain-warped so the lines bend organically
    wavelength = s / (rng.uniform(24.0, 32.0) if label == 1 else rng.uniform(7.0, 10.0))
    phi = rng.uniform(0.0, np.pi)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    bend = _smooth_noise(rng, s, 5, amp=2.2)
    carrier = np.sin(2.0 * np.pi * (xx * np.cos(phi) + yy * np.sin(phi)) / wavelength + phase + bend)
    lines = np.clip((carrier - 0.15) / 0.85, 0.0, 1.0) ** 1.5

    shading = _smooth_noise(rng, s, 6, amp=0.06)
    grad_dir = rng.uniform(0.0, 2.0 * np.pi)
    ramp = 0.08 * ((xx / s) * np.cos(grad_dir) + (yy / s) * np.sin(grad_dir))
    r2 = ((xx - s / 2) ** 2 + (yy - s / 2) ** 2) / (s / 2) ** 2
    vignette = 1.0 - 0.25 * r2
    light = (1.0 + shading + ramp) * vignette

    base = np.stack([
        0.80 * np.ones_like(xx),
        0.55 * np.ones_like(xx) + _smooth_noise(rng, s, 8, amp=0.03),
        0.50 * np.ones_like(xx) + _smooth_noise(rng, s, 8, amp=0.03),
    ])
    bump = soft * (0.05 + 0.02 * rng.standard_normal())
    base = base + np.stack([bump * 0.8, -bump * 0.2, -bump * 0.3])
    scene = base * light[None]

    # --- teacher-modality rendering: strong texture, chromoendoscopy cast ---
    tex_n = 1.0 - 0.45 * lines * soft
    r, g, b = scene
    scene_n = np.stack([
        (0.42 * r + 0.28 * g) * tex_n,
        (0.62 * g + 0.22 * r) * tex_n ** 1.5,
        0.55 * b + 0.25 * g,
    ])
    scene_n = scene_n + rng.normal(0.0, 0.01, scene_n.shape)

    # --- student-modality rendering: weak texture, nuisance clutter ---
    tex_w = 1.0 - 0.12 * lines * soft
    gains = rng.uniform(0.92, 1.08, size=3)
    scene_w = scene * tex_w[None] * gains[:, None, None]
    for _ in range(rng.integers(2, 5)):
        hy, hx = rng.uniform(0.1 * s, 0.9 * s, size=2)
        hr = rng.uniform(0.02 * s, 0.05 * s)
        blob = np.exp(-((xx - hx) ** 2 + (yy - hy) ** 2) / (2.0 * hr * hr))
        scene_w = scene_w + 0.35 * blob[None]
    scene_w = scene_w + rng.normal(0.0, 0.03, scene_w.shape)

    warp = _random_homography(rng, s, warp_magnitude)
    fill = np.array([0.06, 0.05, 0.05])
    scene_n = np.clip(scene_n, 0.0, 1.0)
    image_n = scene_n if warp_magnitude == 0.0 else _warp_image(scene_n, warp, fill)

    idx = pair_id if pair_id is not None else f"pair_{seed}"
    return PairedSample(
        image_w=torch.from_numpy(np.clip(scene_w, 0.0, 1.0).astype(np.float32)),
        image_n=torch.from_numpy(np.clip(image_n, 0.0, 1.0).astype(np.float32)),
        label=label,
        patient_id=patient_id if patient_id is not None else f"patient_{seed}",
        pair_id=idx,
        gt_warp=warp,
        gt_lesion_mask_w=lesion_mask,
    )


def synthetic_dataset(
    n: int,
    warp_magnitude: float,
    seed: int,
    size: int = 448,
    pairs_per_patient: int = 2,
) -> list[PairedSample]:
    """In-memory synthetic dataset with alternating labels.

    Pair i gets the derived seed ``seed * 1_000_003 + i``, so datasets with
    different base seeds do not share scenes.
    """
    samples = []
    for i in range(n):
        samples.append(generate_synthetic_pair(
            seed=seed * 1_000_003 + i,
            label=i % 2,
            warp_magnitude=warp_magnitude,
            size=size,
            patient_id=f"patient_{i // max(1, pairs_per_patient):04d}",
            pair_id=f"pair_{i:04d}",
        ))
    return samples


def write_synthetic_dataset(
    out_dir: str | Path,
    n: int,
    warp_magnitude: float,
    seed: int,
    size: int = 448,
    pairs_per_patient: int = 2,
) -> Path:
    """Render a synthetic dataset to disk: PNGs, manifest, warp sidecar.

    Returns the manifest path. Layout: ``images/*.png``, ``masks/*.png``,
    ``manifest.jsonl``, and ``gt.json`` holding each pair's row-major 3x3
    warp and mask path.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    sidecar: dict = {}
    lines = []
    for sample in synthetic_dataset(n, warp_magnitude, seed, size, pairs_per_patient):
        wli = f"images/{sample.pair_id}_wli.png"
        nbi = f"images/{sample.pair_id}_nbi.png"
        mask = f"masks/{sample.pair_id}_mask.png"
        _write_image(out / wli, sample.image_w)
        _write_image(out / nbi, sample.image_n)
        _write_image(out / mask, sample.gt_lesion_mask_w.astype(np.float64))
        lines.append(json.dumps({
            "pair_id": sample.pair_id,
            "patient_id": sample.patient_id,
            "label": sample.label,
            "wli_path": wli,
            "nbi_path": nbi,
        }))
        sidecar[sample.pair_id] = {
            "gt_warp": [float(v) for v in sample.gt_warp.reshape(-1)],
            "mask_path": mask,
        }
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    (out / "gt.json").write_text(json.dumps(sidecar, indent=2))
    return manifest


# ---------------------------------------------------------------------------
# Ground-truth correspondence
# ---------------------------------------------------------------------------

OUT_OF_VIEW = -1


def correspondence_oracle(sample: PairedSample, grid_hw: tuple[int, int]) -> Tensor:
    """Ground-truth teacher cell index for every student feature cell.

    For each cell of an ``grid_hw`` grid over the student image, the center
    is pushed through ``gt_warp``; the result is the flat index of the
    teacher-grid cell containing the warped point, or ``OUT_OF_VIEW`` when
    it leaves the image.
    """
    if sample.gt_warp is None:
        raise ContractViolation("sample has no ground-truth warp")
    gh, gw = grid_hw
    h, w = sample.image_w.shape[-2:]
    sy, sx = h / gh, w / gw
    jj, ii = np.meshgrid(np.arange(gw), np.arange(gh))
    x = (jj + 0.5) * sx
    y = (ii + 0.5) * sy
    pts = np.stack([x.ravel(), y.ravel(), np.ones(gh * gw)], axis=0)
    mapped = sample.gt_warp @ pts
    with np.errstate(divide="ignore", invalid="ignore"):
        xn = mapped[0] / mapped[2]
        yn = mapped[1] / mapped[2]
    col = np.floor(xn / sx)
    row = np.floor(yn / sy)
    valid = (mapped[2] > 1e-9) & (col >= 0) & (col < gw) & (row >= 0) & (row < gh)
    flat = np.where(valid, row * gw + col, OUT_OF_VIEW).astype(np.int64)
    return torch.from_numpy(flat.reshape(gh, gw))
