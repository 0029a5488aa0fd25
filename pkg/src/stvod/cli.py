"""Command-line entry point.

Subcommands: ``generate`` (write synthetic train/val datasets), ``train``
(spatial, temporal, or both stages), ``eval`` (score a checkpoint, optional
overlay frames), ``gradcheck`` (composite finite-difference suite).

Exit codes: 0 success, 1 usage or configuration error, 2 numerical-check
failure. ``STVOD_SEED`` overrides the config seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config
from .synthetic import DatasetError


def _write_run_manifest(out_dir: Path, command: str, cfg: RunConfig | None, extra=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "argv": sys.argv[1:]}
    if cfg is not None:
        manifest["config"] = {
            k: list(v) if isinstance(v, tuple) else v for k, v in cfg.to_flat().items()
        }
    if extra:
        manifest.update(extra)
    with open(out_dir / "run.json", "w") as fh:
        json.dump(manifest, fh, indent=1)


def _load_config_arg(path: str | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    return load_config(path)


def cmd_generate(args) -> int:
    from .train import generate_datasets

    cfg = _load_config_arg(args.config)
    paths = generate_datasets(cfg, Path(args.out))
    _write_run_manifest(Path(args.out), "generate", cfg)
    print(f"wrote {cfg.data.train_clips} train clips to {paths['train']}")
    print(f"wrote {cfg.data.val_clips} val clips to {paths['val']}")
    return 0


def cmd_train(args) -> int:
    from .train import train

    cfg = _load_config_arg(args.config)
    result = train(
        cfg,
        Path(args.data),
        Path(args.out),
        stage=args.stage,
        freeze_spatial=args.freeze_spatial,
        init_checkpoint=Path(args.init) if args.init else None,
    )
    _write_run_manifest(Path(args.out), "train", cfg, {"steps": result.steps})
    print(f"training log: {result.log_path}")
    if result.spatial_checkpoint:
        print(f"spatial checkpoint: {result.spatial_checkpoint}")
    if result.temporal_checkpoint:
        print(f"temporal checkpoint: {result.temporal_checkpoint}")
    return 0


def cmd_eval(args) -> int:
    from .train import evaluate_checkpoint

    out_dir = Path(args.out) if args.out else Path(args.checkpoint) / "eval"
    result = evaluate_checkpoint(
        Path(args.checkpoint), Path(args.data), out_dir, overlays=args.overlays
    )
    _write_run_manifest(out_dir, "eval", None, {"result": result.to_dict()})
    if result.mean_ap is None:
        print(f"mAP undefined: {result.note}")
    else:
        print(f"mAP@0.5 = {result.mean_ap:.4f}")
        for cls, ap in sorted(result.per_class_ap.items()):
            print(f"  class {cls}: AP {ap:.4f}")
    print(
        f"TP {result.true_positives}  FP {result.false_positives}  "
        f"FN {result.false_negatives}"
    )
    return 0


def cmd_gradcheck(args) -> int:
    from .train import gradcheck_suite

    results = gradcheck_suite(seed=args.seed)
    failed = False
    for name, report in results:
        status = "PASS" if report.passed else "FAIL"
        print(f"{status}  {name:34s} max rel error {report.max_error:.3e}"
              + ("" if report.passed else f"  (worst: {report.worst_param})"))
        failed |= not report.passed
    return 2 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stvod", description="desk-scale spatial-temporal video object detection"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write synthetic train/val datasets")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the detector")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--stage", choices=["spatial", "temporal", "both"], default="both")
    p.add_argument("--freeze-spatial", action="store_true",
                   help="keep spatial weights fixed during the temporal stage")
    p.add_argument("--init", help="spatial checkpoint to warm-start --stage temporal")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="where to write eval.json / detections.jsonl")
    p.add_argument("--overlays", action="store_true", help="emit detection overlays")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the composite gradient-check suite")
    p.add_argument("--config", help="accepted for symmetry; suite uses toy shapes")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
