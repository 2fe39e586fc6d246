"""Command-line interface.

Subcommands: synth (generate an annotated synthetic dataset), train, eval,
count (single images, with saliency overlay), gradcheck. Outputs go to
--out, or to $PATCHCOUNT_OUT/<command>-<timestamp> when unset. Errors from
the package are reported as one JSON line on stderr with exit code 1.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import load_checkpoint
from .config import build_train_config, load_config
from .data import ImageRecord, generate_synthetic, load_manifest, write_dataset
from .errors import ConfigError, PatchCountError
from .evaluation import evaluate, infer_image
from .report import write_count_outputs, write_eval_outputs, write_train_outputs
from .train import grad_check, train

ENV_OUT = "PATCHCOUNT_OUT"


def _out_dir(explicit, command: str) -> Path:
    if explicit:
        return Path(explicit)
    root = Path(os.environ.get(ENV_OUT, "runs"))
    return root / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"


def _cmd_synth(args) -> int:
    records = generate_synthetic(
        args.n,
        size_range=(args.size_min, args.size_max),
        count_range=(args.count_min, args.count_max),
        seed=args.seed,
    )
    out = _out_dir(args.out, "synth")
    manifest = write_dataset(records, out)
    total = sum(r.gt_count for r in records)
    print(f"wrote {len(records)} images ({total} points) -> {manifest}")
    return 0


def _records_for_training(args, raw: dict, config_dir: Path) -> list[ImageRecord]:
    if args.manifest:
        return load_manifest(args.manifest)
    data = raw.get("data") or {}
    if "manifest" in data:
        return load_manifest((config_dir / data["manifest"]).resolve())
    if "synthetic" in data:
        s = dict(data["synthetic"] or {})
        return generate_synthetic(
            int(s.get("n_images", 40)),
            size_range=tuple(s.get("size_range", (192, 384))),
            count_range=tuple(s.get("count_range", (0, 50))),
            seed=int(s.get("seed", 0)),
        )
    raise ConfigError("no training data: pass --manifest or add a data: section to the config")


def _cmd_train(args) -> int:
    raw = load_config(args.config) if args.config else {}
    config_dir = Path(args.config).parent if args.config else Path.cwd()
    cfg = build_train_config(raw, {"seed": args.seed, "epochs": args.epochs})
    records = _records_for_training(args, raw, config_dir)
    out = _out_dir(args.out, "train")
    model, report = train(records, cfg, out_dir=out, resume=args.resume, log=print)
    paths = write_train_outputs(report, out)
    print(
        f"done: train MAE {report.train_mae:.3f}  RMSE {report.train_rmse:.3f}  "
        f"cc_max {report.cc_max}  checkpoint {report.checkpoint}"
    )
    print(f"report files: {', '.join(str(p) for p in paths.values())}")
    return 0


def _cmd_eval(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    records = load_manifest(args.manifest)
    report = evaluate(model, records, routing=args.routing)
    out = _out_dir(args.out, "eval")
    paths = write_eval_outputs(report, out)
    print(f"MAE {report.mae:.3f}  RMSE {report.rmse:.3f}  over {report.n_images} images")
    print(f"report files: {', '.join(str(p) for p in paths.values())}")
    return 0


def _load_image_record(path: Path) -> ImageRecord:
    if not path.is_file():
        raise PatchCountError(f"image not found: {path}")
    with Image.open(path) as im:
        image = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return ImageRecord(id=path.stem, image=image, points=np.zeros((0, 2)))


def _cmd_count(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    out = _out_dir(args.out, "count")
    for image_path in args.images:
        rec = _load_image_record(Path(image_path))
        result = infer_image(model, rec)
        write_count_outputs(result, rec, out)
        print(f"{rec.id}: {result.total:.2f}")
    print(f"outputs in {out}")
    return 0


def _cmd_gradcheck(args) -> int:
    report = grad_check(seed=args.seed, step=args.step, max_per_tensor=args.max_per_tensor)
    for g in report.groups:
        print(f"  {g.name:<12} entries {g.n_checked:6d}  max rel err {g.max_rel:.3e}")
    status = "OK" if report.max_rel < args.tol else "FAIL"
    print(f"overall max rel err {report.max_rel:.3e} (tolerance {args.tol:g}) {status}")
    return 0 if report.max_rel < args.tol else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchcount",
        description="Patch-based crowd counting with density-aware rescaling.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate an annotated synthetic dataset")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size-min", type=int, default=192)
    p.add_argument("--size-max", type=int, default=512)
    p.add_argument("--count-min", type=int, default=0)
    p.add_argument("--count-max", type=int, default=60)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a counting network")
    p.add_argument("--config", default=None, help="YAML config (arch/train/data sections)")
    p.add_argument("--manifest", default=None, help="training manifest (overrides the config)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--routing", choices=("predicted", "gt"), default="predicted")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("count", help="count one or more images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("images", nargs="+")
    p.set_defaults(func=_cmd_count)

    p = sub.add_parser("gradcheck", help="finite-difference check of the joint-loss gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--max-per-tensor", type=int, default=25)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PatchCountError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
