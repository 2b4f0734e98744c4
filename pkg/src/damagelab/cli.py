"""``damagelab`` command line: synth, preprocess, train, eval, compare, gradcam.

Exit status is 0 on success, 1 on a domain error (reported by its error
class name) and 2 on a usage error. Every run leaves ``run_meta.json`` in its
output directory; :func:`replay` re-runs a command from that file.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import DamageLabError, IoFailure
from .ingest import iter_scene_pairs
from .model import Backbone, default_weight_path, load_checkpoint
from .preprocess import (
    CROP_SIDE,
    MIN_AREA,
    SPLIT_RATIO,
    balanced_split,
    build_records,
    class_counts,
    read_manifest,
    write_manifest,
)
from .synthdata import SynthParams, generate, separability_report
from .trainer import (
    HyperParams,
    compare_grid,
    evaluate,
    format_config_text,
    parse_config_text,
    render_grid,
    train,
)

log = logging.getLogger("damagelab")
RUN_META = "run_meta.json"


def _class_mix(text: str) -> tuple[float, ...]:
    try:
        parts = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad class mix {text!r}") from None
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("class mix needs four comma-separated fractions")
    return parts


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default: 0, or the config's)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="damagelab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"damagelab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic xBD-style dataset")
    p.add_argument("--scenes", type=int, default=4)
    p.add_argument("--buildings-per-scene", type=int, default=20)
    p.add_argument("--class-mix", type=_class_mix, default=(0.25, 0.25, 0.25, 0.25))
    p.add_argument("--image-side", type=int, default=1024)
    p.add_argument("--min-box", type=int, default=32)
    p.add_argument("--max-box", type=int, default=96)
    p.add_argument("--noise-floor", type=float, default=0.02)
    p.add_argument("--unclassified-rate", type=float, default=0.0)
    p.add_argument("--type-bias", action="store_true")

    p = sub.add_parser("preprocess", parents=[common], help="crop, filter, balance and split buildings")
    p.add_argument("--root", required=True)
    p.add_argument("--min-area", type=int, default=MIN_AREA)
    p.add_argument("--crop-side", type=int, default=CROP_SIDE)
    p.add_argument("--pad", type=int, default=0)
    p.add_argument("--ratio", type=float, default=SPLIT_RATIO)
    p.add_argument("--max-per-class", type=int, default=None)

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--weights", default=None, help="pretrained ResNet-18 weight file")
    p.add_argument("--init-checkpoint", default=None, help="start from this checkpoint")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--side", choices=["train", "val"], default="val")
    p.add_argument("--ordinal-decode", choices=["scan", "count"], default="scan")

    p = sub.add_parser("compare", parents=[common], help="train the 3 x 3 input/loss grid")
    p.add_argument("--manifest", required=True)
    p.add_argument("--show-paper-ref", action="store_true", help="add the published accuracies")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--backbone", choices=[b.value for b in Backbone], default=Backbone.TINY_RESNET.value)
    p.add_argument("--weights", default=None)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("gradcam", parents=[common], help="render Grad-CAM panels")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--layer", default=None)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--class-from", choices=["label", "prediction"], default="prediction")
    p.add_argument("--colormap", default="viridis")
    return parser


def _seed(args, default: int = 0) -> int:
    return default if args.seed is None else args.seed


def cmd_synth(args) -> dict:
    params = SynthParams(
        n_scenes=args.scenes,
        buildings_per_scene=args.buildings_per_scene,
        image_side=args.image_side,
        class_mix=args.class_mix,
        noise_floor=args.noise_floor,
        seed=_seed(args),
        min_box=args.min_box,
        max_box=args.max_box,
        unclassified_rate=args.unclassified_rate,
        type_bias=args.type_bias,
    )
    root = generate(params, args.out)
    stats = separability_report(root)
    for c, v in stats.items():
        log.info("mean |post - pre| for %-13s %.2f", c.label, v)
    return {"separability": {c.label: v for c, v in stats.items()}}


def cmd_preprocess(args) -> dict:
    records = build_records(
        iter_scene_pairs(args.root), min_area=args.min_area, crop_side=args.crop_side, pad=args.pad
    )
    counts = class_counts(records)
    log.info("kept %d buildings: %s", len(records), {c.label: n for c, n in counts.items()})
    manifest = balanced_split(records, args.ratio, _seed(args), args.max_per_class)
    write_manifest(manifest, records, args.out)
    log.info("train %d / val %d, split checksum %s", len(manifest.train), len(manifest.val), manifest.checksum())
    return {"train": len(manifest.train), "val": len(manifest.val), "split_checksum": manifest.checksum()}


def cmd_train(args) -> dict:
    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read config {args.config}: {exc}") from exc
    config, hp = parse_config_text(text)
    if args.seed is not None:
        hp = HyperParams(**{**hp.__dict__, "seed": args.seed})
    manifest, records = read_manifest(args.manifest)
    weights = args.weights
    if weights is None and config.backbone is Backbone.RESNET18_PRETRAINED:
        weights = default_weight_path()
    report = train(config, hp, manifest, records, out_dir=args.out, weights=weights,
                   init_checkpoint=args.init_checkpoint)
    Path(args.out, "config.txt").write_text(format_config_text(config, hp), encoding="utf-8")
    log.info("best val accuracy %.4f at epoch %d", report.best_val_accuracy, report.best_epoch)
    return {"config": config.to_dict(), "hyperparams": hp.__dict__}


def cmd_eval(args) -> dict:
    model = load_checkpoint(args.checkpoint)
    manifest, records = read_manifest(args.manifest)
    acc, cm = evaluate(model, manifest.resolve(records, args.side), args.ordinal_decode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = {"accuracy": acc, "confusion": cm.tolist(), "side": args.side, "config": model.config.to_dict()}
    (out / "eval.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    log.info("%s accuracy %.4f", args.side, acc)
    return {"config": model.config.to_dict()}


def cmd_compare(args) -> dict:
    manifest, records = read_manifest(args.manifest)
    hp = HyperParams(learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=_seed(args))
    weights = args.weights
    if weights is None and args.backbone == Backbone.RESNET18_PRETRAINED.value:
        weights = default_weight_path()
    grid = compare_grid(hp, manifest, records, backbone=Backbone(args.backbone), out_dir=args.out,
                        show_paper_ref=args.show_paper_ref, jobs=args.jobs, weights=weights)
    print(render_grid(grid, args.show_paper_ref))
    return {"hyperparams": hp.__dict__}


def cmd_gradcam(args) -> dict:
    from .gradcam import cam_batch

    model = load_checkpoint(args.checkpoint)
    manifest, records = read_manifest(args.manifest)
    paths = cam_batch(model, manifest, records, args.out, layer=args.layer, alpha=args.alpha,
                      class_from=args.class_from, colormap=args.colormap)
    log.info("wrote %d images to %s", len(paths), args.out)
    return {"images": len(paths)}


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "gradcam": cmd_gradcam,
}


def _write_run_meta(args, argv, extra: dict) -> None:
    flags = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items()}
    meta = {
        "argv": list(argv),
        "command": args.command,
        "flags": flags,
        "seed": args.seed,
        "version": __version__,
        "details": extra,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / RUN_META).write_text(json.dumps(meta, indent=1, sort_keys=True, default=str) + "\n", encoding="utf-8")


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger().setLevel(args.log_level)
    try:
        extra = COMMANDS[args.command](args)
        _write_run_meta(args, argv, extra)
    except DamageLabError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def replay(meta_path) -> int:
    """Re-run the command recorded in a ``run_meta.json``."""
    meta = json.loads(Path(meta_path).read_text(encoding="utf-8"))
    return dispatch(meta["argv"])


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
