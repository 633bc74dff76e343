"""Training configuration: defaults, config-file loading, CLI overrides.

Precedence is CLI override > config file > built-in defaults. Config files
are flat JSON objects whose keys mirror ``TrainConfig`` field names;
overrides are ``key=value`` strings parsed against the field's type.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass
class TrainConfig:
    # optimization
    learning_rate: float = 1e-4
    weight_decay: float = 1e-8
    batch_size: int = 16
    epochs: int = 200
    input_size: int = 448
    seed: int = 0
    # relation generation
    psr_iters: int = 10
    tau1: float = 0.3
    tau2: float = 0.7
    # ablation switches
    enable_dist: bool = True   # feature-level distillation term at all
    enable_add: bool = True    # affinity-weighted (vs. same-position consistency)
    enable_srg: bool = True    # semantic relation masking of the affinities
    enable_bi_a: bool = True   # bidirectional union (vs. teacher-given-student only)
    enable_psr: bool = True    # similarity refinement of the CAM maps
    enable_logit: bool = True  # logit-matching distillation term
    # model
    backbone: str = "resnet50"
    stage_taps: tuple[int, ...] = (3, 4)
    pretrained_path: str | None = None
    # loss details
    feature_norm: str = "l2"        # distance norm in the dense loss: l1|l2
    logit_match: str = "logits"     # match raw logits or softmax probs: logits|probs
    detach_affinity: bool = False   # stop gradients through the affinity weights
    cam_class: str = "label"        # CAM class choice: label|pred
    # data handling
    hflip: bool = True              # paired horizontal flip augmentation
    device: str = "cpu"

    def validate(self) -> "TrainConfig":
        if not (0.0 < self.tau1 < self.tau2 < 1.0):
            raise ConfigError(f"need 0 < tau1 < tau2 < 1, got {self.tau1}, {self.tau2}")
        if self.psr_iters < 0:
            raise ConfigError("psr_iters must be >= 0")
        if self.feature_norm not in ("l1", "l2"):
            raise ConfigError(f"feature_norm must be l1|l2, got {self.feature_norm!r}")
        if self.logit_match not in ("logits", "probs"):
            raise ConfigError(f"logit_match must be logits|probs, got {self.logit_match!r}")
        if self.cam_class not in ("label", "pred"):
            raise ConfigError(f"cam_class must be label|pred, got {self.cam_class!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.input_size < 32:
            raise ConfigError("batch_size >= 1, epochs >= 0, input_size >= 32 required")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stage_taps"] = list(self.stage_taps)
        return d


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _parse_value(name: str, raw, target_field: dataclasses.Field):
    ftype = target_field.type
    try:
        if ftype == "bool":
            if isinstance(raw, bool):
                return raw
            if str(raw).lower() in ("true", "1", "yes"):
                return True
            if str(raw).lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype.startswith("tuple"):
            if isinstance(raw, (list, tuple)):
                return tuple(int(v) for v in raw)
            return tuple(int(v) for v in str(raw).split(",") if v != "")
        if ftype == "str | None":
            if raw is None or str(raw).lower() in ("none", "null", ""):
                return None
            return str(raw)
        return str(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {name}: {raw!r} ({exc})") from exc


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> TrainConfig:
    """Resolve a TrainConfig from defaults, an optional JSON file, and overrides."""
    values: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            loaded = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {p} must hold a JSON object")
        values.update(loaded)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        values[key.strip()] = raw.strip()
    kwargs = {}
    for key, raw in values.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        kwargs[key] = _parse_value(key, raw, _FIELDS[key])
    return TrainConfig(**kwargs).validate()
