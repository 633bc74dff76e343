"""Command-line entry point.

Subcommands: gen-data, train-teacher, train-student, evaluate,
oracle-check, visualize. Every run resolves its config (defaults < file <
``--set key=value`` overrides), snapshots it into the output directory
before doing any work, and finishes by writing a ``manifest.json`` index of
the artifacts it produced.

Exit codes: 0 ok, 2 config error, 3 missing input, 4 numerical divergence,
5 internal invariant breach.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .config import TrainConfig, load_config
from .errors import (
    ConfigError,
    ContractViolation,
    DivergenceError,
    ManifestError,
    MissingInputError,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_INPUT = 3
EXIT_DIVERGENCE = 4
EXIT_INVARIANT = 5


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, default=None, help="JSON config file")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="seed override")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="config override (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="densedistill")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic paired dataset")
    _add_common(p)
    p.add_argument("--n", type=int, default=64, help="number of pairs")
    p.add_argument("--warp", type=float, default=0.5, help="misalignment magnitude in [0,1]")
    p.add_argument("--size", type=int, default=None, help="image size (defaults to config input_size)")
    p.add_argument("--pairs-per-patient", type=int, default=2)

    p = sub.add_parser("train-teacher", help="train the teacher-modality classifier")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--fold", type=int, default=None, help="hold out this fold (0-based)")
    p.add_argument("--folds", type=int, default=5, help="fold count used with --fold")

    p = sub.add_parser("train-student", help="distill the student against a frozen teacher")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--teacher", type=Path, required=True, help="teacher checkpoint")
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--folds", type=int, default=5)

    p = sub.add_parser("evaluate", help="metrics for a checkpoint on a manifest")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--fold", type=int, default=None, help="evaluate the fold's test split")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--modality", choices=("w", "n"), default="w")

    p = sub.add_parser("oracle-check", help="brute-force vs vectorized loss check")
    _add_common(p)
    p.add_argument("--cells", type=int, default=4)
    p.add_argument("--channels", type=int, default=8)

    p = sub.add_parser("visualize", help="CAM / semantic-map panels for samples")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--student", type=Path, required=True, help="student checkpoint")
    p.add_argument("--teacher", type=Path, required=True, help="teacher checkpoint")
    p.add_argument("--n", type=int, default=4, help="number of samples to render")
    return parser


def _resolve_config(args) -> TrainConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def _snapshot(out_dir: Path, config: TrainConfig, args) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    snap = out_dir / "resolved_config.json"
    snap.write_text(json.dumps(config.to_dict(), indent=2))
    run = out_dir / "run.json"
    run.write_text(json.dumps({
        "command": args.command,
        "argv": sys.argv[1:],
        "seed": config.seed,
        "determinism": "bit-exact for generation/evaluation; training is "
                       "reproducible within framework limits (fixed seeds, "
                       "single-threaded data order, CPU kernels)",
    }, indent=2))
    return [snap, run]


def _write_index(out_dir: Path, artifacts: list[Path]):
    rel = sorted(str(p.relative_to(out_dir)) for p in artifacts if p is not None)
    (out_dir / "manifest.json").write_text(json.dumps({"artifacts": rel}, indent=2))


def _load_fold(manifest: Path, fold: int | None, k: int, seed: int):
    from .data import kfold_split, load_manifest

    descriptors = load_manifest(manifest)
    if fold is None:
        return descriptors, None
    plan = kfold_split(descriptors, k=k, seed=seed)
    if not (0 <= fold < k):
        raise ConfigError(f"fold {fold} out of range for k={k}")
    return plan.split(descriptors, fold)


def _require(path: Path, what: str):
    if not path.exists():
        raise MissingInputError(f"{what} not found: {path}")


def _cmd_gen_data(args, config: TrainConfig) -> list[Path]:
    from .data import write_synthetic_dataset

    size = args.size or config.input_size
    manifest = write_synthetic_dataset(
        args.out, n=args.n, warp_magnitude=args.warp, seed=config.seed,
        size=size, pairs_per_patient=args.pairs_per_patient,
    )
    out = Path(args.out)
    return [manifest, out / "gt.json"]


def _cmd_train_teacher(args, config: TrainConfig) -> list[Path]:
    from .train import train_teacher

    _require(args.manifest, "manifest")
    train_set, _ = _load_fold(args.manifest, args.fold, args.folds, config.seed)
    result = train_teacher(train_set, config, out_dir=args.out)
    return [result.checkpoint_path, result.checkpoint_path.with_suffix(".json"), result.log_path]


def _cmd_train_student(args, config: TrainConfig) -> list[Path]:
    from .models import load_checkpoint
    from .train import train_student

    _require(args.manifest, "manifest")
    _require(args.teacher, "teacher checkpoint")
    teacher, _ = load_checkpoint(args.teacher, trainable=False)
    train_set, _ = _load_fold(args.manifest, args.fold, args.folds, config.seed)
    result = train_student(train_set, config, teacher, out_dir=args.out)
    return [result.checkpoint_path, result.checkpoint_path.with_suffix(".json"), result.log_path]


def _cmd_evaluate(args, config: TrainConfig) -> list[Path]:
    from .metrics import compute_metrics, export_roc
    from .models import load_checkpoint
    from .train import predict_scores

    _require(args.manifest, "manifest")
    _require(args.checkpoint, "checkpoint")
    model, _ = load_checkpoint(args.checkpoint, trainable=False)
    descriptors, test = _load_fold(args.manifest, args.fold, args.folds, config.seed)
    subjects = test if test is not None else descriptors
    scores, labels = predict_scores(model, subjects, config, modality=args.modality)
    report = compute_metrics(scores, labels)
    out = Path(args.out)
    metrics_path = out / "metrics.json"
    metrics_path.write_text(json.dumps(report.to_dict(), indent=2))
    csv_path = export_roc(report, out / "roc.csv", plot_path=out / "roc.png")
    return [metrics_path, csv_path, out / "roc.png"]


def _cmd_oracle_check(args, config: TrainConfig) -> list[Path]:
    from .affinity import oracle_check

    result = oracle_check(config.seed, cells=args.cells, channels=args.channels)
    out = Path(args.out)
    path = out / "oracle_check.json"
    path.write_text(json.dumps(result, indent=2))
    print(json.dumps(result, indent=2))
    return [path]


def _cmd_visualize(args, config: TrainConfig) -> list[Path]:
    from .models import load_checkpoint
    from .relations import build_relations
    from .train import _materialize, _resize_pair
    from .viz import export_cam_overlays, export_relation_panels

    _require(args.manifest, "manifest")
    _require(args.student, "student checkpoint")
    _require(args.teacher, "teacher checkpoint")
    student, _ = load_checkpoint(args.student, trainable=False)
    teacher, _ = load_checkpoint(args.teacher, trainable=False)
    from .data import load_manifest

    descriptors = load_manifest(args.manifest)[: args.n]
    samples = [_resize_pair(_materialize(d), config.input_size) for d in descriptors]
    out = Path(args.out)
    artifacts = [export_cam_overlays(samples, student, teacher, out / "cam_overlays.png")]
    for sample in samples:
        maps = build_relations(sample, teacher, student, config)
        last = max(student.stage_taps)
        artifacts.append(export_relation_panels(
            sample, maps[last], out / f"relations_{sample.pair_id}.png"
        ))
    return artifacts


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-teacher": _cmd_train_teacher,
    "train-student": _cmd_train_student,
    "evaluate": _cmd_evaluate,
    "oracle-check": _cmd_oracle_check,
    "visualize": _cmd_visualize,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out_dir = Path(args.out)
    try:
        config = _resolve_config(args)
        artifacts = _snapshot(out_dir, config, args)
        artifacts += _COMMANDS[args.command](args, config)
        _write_index(out_dir, artifacts)
        return EXIT_OK
    except ConfigError as exc:
        _fail(out_dir, exc)
        return EXIT_CONFIG
    except (MissingInputError, ManifestError) as exc:
        _fail(out_dir, exc)
        return EXIT_MISSING_INPUT
    except DivergenceError as exc:
        _fail(out_dir, exc)
        return EXIT_DIVERGENCE
    except ContractViolation as exc:
        _fail(out_dir, exc)
        return EXIT_INVARIANT


def _fail(out_dir: Path, exc: Exception):
    record = {"error": type(exc).__name__, "code": getattr(exc, "code", "error"), "message": str(exc)}
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "error.json").write_text(json.dumps(record, indent=2))
    except OSError:
        pass
    print(json.dumps(record), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
