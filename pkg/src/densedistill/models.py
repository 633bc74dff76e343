"""Teacher/student classifiers with multi-scale feature taps and CAM support.

Both classifiers share one architecture family so same-stage feature maps
have matching channel counts (the dense distillation loss takes direct
feature differences). The head is a linear layer on globally pooled
last-stage features, which is exactly the setup class activation maps need:
a CAM is the head-weight-weighted sum of last-stage channel maps.

A frozen classifier refuses to leave eval mode so batch-norm statistics
stay fixed; combined with ``requires_grad=False`` its parameters are
bit-identical across any number of training steps.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
from torch import Tensor

from .errors import ContractViolation, MissingInputError, RejectedInputError


class _BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout)
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: Tensor) -> Tensor:
        h = torch.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return torch.relu(h + self.shortcut(x))


def _tiny_backbone(widths=(16, 32, 64, 128), blocks_per_stage=1):
    """Small 4-stage residual backbone with standard strides 4/8/16/32.

    Sized for CPU-scale experiments on synthetic data; the stage layout and
    stride schedule match the larger residual nets so everything downstream
    (taps, CAM, affinity grids) is backbone-agnostic.
    """
    stem = nn.Sequential(
        nn.Conv2d(3, widths[0], 3, 2, 1, bias=False),
        nn.BatchNorm2d(widths[0]),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(kernel_size=2, stride=2),
    )
    stages = nn.ModuleList()
    cin = widths[0]
    for i, w in enumerate(widths):
        blocks = [_BasicBlock(cin, w, stride=1 if i == 0 else 2)]
        blocks += [_BasicBlock(w, w) for _ in range(blocks_per_stage - 1)]
        stages.append(nn.Sequential(*blocks))
        cin = w
    return stem, stages, list(widths)


def _torchvision_backbone(name: str):
    import torchvision.models as tvm

    net = getattr(tvm, name)(weights=None)
    stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
    stages = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])
    channels = [stage[-1].conv2.out_channels if name in ("resnet18", "resnet34")
                else stage[-1].conv3.out_channels for stage in stages]
    return stem, stages, channels


BACKBONES = {
    "tiny": lambda: _tiny_backbone(),
    "tiny32": lambda: _tiny_backbone(widths=(32, 64, 128, 256)),
    "resnet18": lambda: _torchvision_backbone("resnet18"),
    "resnet34": lambda: _torchvision_backbone("resnet34"),
    "resnet50": lambda: _torchvision_backbone("resnet50"),
}

# All registered backbones downsample by 4 in the stem and by 2 in each of
# stages 2..4, giving per-stage output strides 4/8/16/32.
STAGE_STRIDES = {1: 4, 2: 8, 3: 16, 4: 32}
MAX_STRIDE = 32


@dataclass
class FeaturePyramid:
    """Feature maps per tapped stage plus final logits.

    ``levels`` maps stage index (1-based) to a ``[C_l, H_l, W_l]`` tensor
    (or ``[B, C_l, H_l, W_l]`` when produced by a batched forward pass).
    """

    levels: dict[int, Tensor]
    logits: Tensor

    def select(self, i: int) -> "FeaturePyramid":
        """Single-sample view of a batched pyramid."""
        return FeaturePyramid({l: f[i] for l, f in self.levels.items()}, self.logits[i])


class PolypClassifier(nn.Module):
    """Backbone + linear head exposing tapped intermediate feature maps.

    Args:
        backbone_id: key into ``BACKBONES``.
        stage_taps: 1-based stage indices whose outputs are exported.
        num_classes: size of the logit vector.
        trainable: when False the module is frozen: parameters stop
            receiving gradients and ``train()`` keeps it in eval mode.
    """

    def __init__(
        self,
        backbone_id: str = "resnet50",
        stage_taps: tuple[int, ...] = (3, 4),
        num_classes: int = 2,
        trainable: bool = True,
    ):
        super().__init__()
        if backbone_id not in BACKBONES:
            raise ContractViolation(
                f"unknown backbone {backbone_id!r}; options: {sorted(BACKBONES)}"
            )
        taps = tuple(sorted(set(int(t) for t in stage_taps)))
        if not taps or any(t < 1 or t > 4 for t in taps):
            raise ContractViolation(f"stage taps must be within 1..4, got {stage_taps}")
        self.backbone_id = backbone_id
        self.stage_taps = taps
        self.num_classes = num_classes
        self.trainable = trainable
        self.stem, self.stages, self.stage_channels = BACKBONES[backbone_id]()
        self.head = nn.Linear(self.stage_channels[-1], num_classes)
        if not trainable:
            for p in self.parameters():
                p.requires_grad_(False)
            super().train(False)

    def train(self, mode: bool = True) -> "PolypClassifier":
        # A frozen classifier never re-enters train mode, so batch-norm
        # running statistics cannot drift during student training.
        return super().train(mode and self.trainable)

    @property
    def head_weights(self) -> Tensor:
        """[num_classes, C_last] weight matrix used for CAM."""
        return self.head.weight

    def forward(self, x: Tensor) -> FeaturePyramid:
        """Batched forward pass: [B, 3, H, W] -> batched pyramid."""
        h = self.stem(x)
        levels: dict[int, Tensor] = {}
        for i, stage in enumerate(self.stages, start=1):
            h = stage(h)
            if i in self.stage_taps:
                levels[i] = h
        logits = self.head(h.mean(dim=(2, 3)))
        return FeaturePyramid(levels, logits)


def extract(classifier: PolypClassifier, image: Tensor) -> FeaturePyramid:
    """Inference-mode feature pyramid for a single [3, H, W] image.

    Deterministic given fixed parameters: the classifier is run in eval
    mode under no_grad. Raises ``RejectedInputError`` for a wrong channel
    count or non-finite pixels.
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise RejectedInputError(f"expected [3, H, W] image, got {tuple(image.shape)}")
    if not bool(torch.isfinite(image).all()):
        raise RejectedInputError("image contains non-finite values")
    was_training = classifier.training
    classifier.eval()
    try:
        with torch.no_grad():
            pyr = classifier(image[None])
    finally:
        classifier.train(was_training)
    return pyr.select(0)


def compute_cam(last_feat: Tensor, head_weights: Tensor, class_index: int | None = None) -> tuple[Tensor, bool]:
    """Class activation map from last-stage features and head weights.

    ``head_weights`` is either the full [num_classes, C] matrix (then
    ``class_index`` selects a row) or a single [C] row. The weighted sum of
    channel maps is min-max normalized to [0, 1] per image; a constant raw
    map cannot be normalized and comes back as all zeros with the
    degenerate flag set.
    """
    if head_weights.ndim == 2:
        if class_index is None or not (0 <= class_index < head_weights.shape[0]):
            raise ContractViolation(f"class index {class_index} out of range")
        row = head_weights[class_index]
    else:
        row = head_weights
    if last_feat.ndim != 3 or last_feat.shape[0] != row.shape[0]:
        raise ContractViolation(
            f"feature/weight mismatch: {tuple(last_feat.shape)} vs {tuple(row.shape)}"
        )
    raw = torch.einsum("c,chw->hw", row, last_feat)
    lo, hi = raw.min(), raw.max()
    if bool(hi == lo):
        return torch.zeros_like(raw), True
    return (raw - lo) / (hi - lo), False


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over all named parameters and buffers, in sorted-name order."""
    digest = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        digest.update(name.encode())
        digest.update(state[name].detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(classifier: PolypClassifier, path: str | Path, input_size: int) -> Path:
    """Write parameter archive plus a JSON sidecar describing the model.

    The sidecar (``<stem>.json`` next to the archive) carries backbone_id,
    stage_taps, num_classes, and input_size so the archive is
    self-describing.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(classifier.state_dict(), path)
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps({
        "backbone_id": classifier.backbone_id,
        "stage_taps": list(classifier.stage_taps),
        "num_classes": classifier.num_classes,
        "input_size": int(input_size),
    }, indent=2))
    return path


def load_checkpoint(path: str | Path, trainable: bool = True) -> tuple[PolypClassifier, dict]:
    """Rebuild a classifier from an archive written by ``save_checkpoint``."""
    path = Path(path)
    sidecar = path.with_suffix(".json")
    if not path.exists():
        raise MissingInputError(f"checkpoint not found: {path}")
    if not sidecar.exists():
        raise MissingInputError(f"checkpoint sidecar not found: {sidecar}")
    meta = json.loads(sidecar.read_text())
    clf = PolypClassifier(
        backbone_id=meta["backbone_id"],
        stage_taps=tuple(meta["stage_taps"]),
        num_classes=meta["num_classes"],
        trainable=trainable,
    )
    state = torch.load(path, map_location="cpu", weights_only=True)
    clf.load_state_dict(state)
    if not trainable:
        clf.eval()
    return clf, meta
