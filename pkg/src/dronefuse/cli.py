"""Command-line entry point.

Exit codes: 0 success, 1 internal failure (including failed gradient
checks), 2 input error. Option values resolve as flag > ``--config`` file >
built-in default; the config file holds ``key=value`` lines whose keys are
option names (``conf=0.3``, ``policy=disjoint``).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import alarm, bias, dataset, gradcheck, metrics
from .detections import confidence_filter, decode_head, nms
from .net import STRIDES, Checkpoint, CheckpointError, NetworkConfig, full_forward, load_checkpoint, save_checkpoint
from .net.model import default_anchors
from .numeric import Tensor

log = logging.getLogger("dronefuse")


class InputError(Exception):
    """Bad user input; maps to exit code 2."""


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _existing_dir(path: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise InputError(f"not a directory: {path}")
    return p


def _existing_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"no such file: {path}")
    return p


def _emit(lines: list[str], out: Path | None = None) -> None:
    text = "".join(f"{line}\n" for line in lines)
    sys.stdout.write(text)
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")


# -- subcommands ------------------------------------------------------------

def cmd_eval(args) -> int:
    pred_dir, gt_dir = _existing_dir(args.pred_dir), _existing_dir(args.gt_dir)
    pred_stems = {p.stem for p in pred_dir.glob("*.txt")}
    gt_stems = {p.stem for p in gt_dir.glob("*.txt")}
    if pred_stems != gt_stems:
        for stem in sorted(pred_stems - gt_stems):
            print(f"unmatched prediction file: {stem}.txt", file=sys.stderr)
        for stem in sorted(gt_stems - pred_stems):
            print(f"unmatched ground-truth file: {stem}.txt", file=sys.stderr)
        raise InputError("prediction and ground-truth file stems differ")
    if not gt_stems:
        raise InputError(f"no label files in {gt_dir}")
    try:
        preds = dataset.read_label_dir(pred_dir, predictions=True)
        gts = dataset.read_label_dir(gt_dir)
        cfg = metrics.MatchingConfig(iou_threshold=args.count_iou, confidence_threshold=args.conf)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    report = metrics.evaluate(preds, gts, args.iou, cfg)
    _emit(report.lines())
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0


def cmd_bias(args) -> int:
    pred_dir = _existing_dir(args.pred_dir)
    try:
        cfg = bias.load_bias_config(_existing_file(args.bias_config)) if args.bias_config else bias.BiasConfig()
        if args.mode:
            cfg = bias.BiasConfig(args.mode, cfg.fixed_lambda_w, cfg.fixed_lambda_h, cfg.categories)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failed = 0
    written = 0
    for f in sorted(pred_dir.glob("*.txt")):
        try:
            dets = dataset.parse_predictions(f.read_text(encoding="utf-8"), source=f.name)
        except ValueError as exc:
            print(f"skipped: {exc}", file=sys.stderr)
            failed += 1
            continue
        (out / f.name).write_text(dataset.write_predictions(bias.compensate_all(dets, cfg)), encoding="utf-8")
        written += 1
    print(f"mode={cfg.mode} files={written} failed={failed}")
    return 2 if failed else 0


def cmd_alarm(args) -> int:
    path = _existing_file(args.seq_file)
    try:
        seq = alarm.parse_sequence(path.read_text(encoding="utf-8"), source_id=path.stem)
        curve = alarm.alarm_curve(seq, args.sizes, args.policy)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    _emit(curve.lines(), Path(args.out) if args.out else None)
    return 0


def cmd_forward(args) -> int:
    try:
        ckpt = load_checkpoint(_existing_file(args.checkpoint))
    except CheckpointError as exc:
        raise InputError(str(exc)) from exc
    cfg = ckpt.config
    if args.input_size is not None and args.input_size != cfg.input_size:
        raise InputError(f"--input-size {args.input_size} does not match checkpoint input size {cfg.input_size}")
    rng = np.random.default_rng(args.seed)
    x = Tensor(rng.uniform(0.0, 1.0, size=(cfg.input_size, cfg.input_size, 3)))
    head = full_forward(x, ckpt)
    anchors = ckpt.params.get("head.anchors")
    anchors = anchors.data if anchors is not None else default_anchors(cfg)
    raw = decode_head(head, cfg, anchors)
    kept = nms(confidence_filter(raw, args.conf), args.nms_iou)
    confs = [d.confidence for d in raw]
    lines = [f"stride={s} shape={'x'.join(map(str, head[s].shape))}" for s in STRIDES]
    lines += [
        f"detections_raw={len(raw)}",
        f"confidence_min={min(confs):.12g}",
        f"confidence_max={max(confs):.12g}",
        f"detections_kept={len(kept)}",
    ]
    _emit(lines)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(dataset.write_predictions(kept), encoding="utf-8")
    return 0


def cmd_gradcheck(args) -> int:
    if args.size % 32:
        raise InputError("--size must be divisible by 32")
    if args.tol < 0:
        raise InputError("--tol must be non-negative")
    results = gradcheck.run_all(size=args.size, seed=args.seed, tol=args.tol, corrupt=args.corrupt_gradient)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def cmd_crop(args) -> int:
    manifest_path = _existing_file(args.manifest)
    try:
        entries = dataset.parse_manifest(manifest_path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise InputError(f"{manifest_path}: {exc}") from exc
    base = manifest_path.parent
    # validate every label path before cropping anything
    labels = {}
    for e in entries:
        lp = base / e.label_path
        if not lp.is_file():
            raise InputError(f"label file missing for {e.image_id}: {lp}")
        try:
            labels[e.image_id] = dataset.parse_labels(lp.read_text(encoding="utf-8"), source=str(lp))
        except ValueError as exc:
            raise InputError(str(exc)) from exc

    spec = dataset.CropSpec(output_size=args.size, seed=args.seed)
    out = Path(args.out)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    rows = []
    skipped = 0
    for e in entries:
        if min(e.width, e.height) < args.size:
            log.warning("skipping %s: %dx%d is smaller than %d", e.image_id, e.width, e.height, args.size)
            skipped += 1
            continue
        res = dataset.square_crop((e.width, e.height), labels[e.image_id], spec, image_id=e.image_id)
        w = res.window
        rows.append(f"{e.image_id}\t{w.x}\t{w.y}\t{w.size}\t{int(res.fallback)}\n")
        (out / "labels" / f"{e.image_id}.txt").write_text(dataset.write_labels(res.annotations), encoding="utf-8")
    (out / "windows.tsv").write_text("".join(rows), encoding="utf-8")
    print(f"cropped={len(rows)} skipped={skipped}")
    return 0


def cmd_init(args) -> int:
    try:
        cfg = NetworkConfig(input_size=args.input_size, base_channels=args.base_channels,
                            anchors_per_scale=args.anchors, class_count=args.classes)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    ckpt = Checkpoint.initialise(cfg, seed=args.seed, zero=args.zero)
    save_checkpoint(ckpt, args.path)
    print(f"wrote {args.path} tensors={len(ckpt.params)}")
    return 0


def cmd_fixture(args) -> int:
    try:
        fx = dataset.gen_fixture_dataset(args.images, args.background, args.seed, args.tp, args.fp, args.fn)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    fx.write(args.out)
    print(" ".join(f"{k}={v}" for k, v in fx.composition.items()))
    return 0


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dronefuse", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="key=value file supplying option defaults")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true")
    verbosity.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="mAP, FNR, FDR and containment rate for a prediction directory")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("--iou", type=_float_list, default=list(metrics.DEFAULT_IOU_THRESHOLDS))
    p.add_argument("--conf", type=float, default=metrics.DEFAULT_CONFIDENCE)
    p.add_argument("--count-iou", type=float, default=metrics.COUNT_IOU,
                   help="IoU threshold for FNR/FDR/containment")
    p.add_argument("--out", help="write a JSON summary here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bias", help="enlarge predicted boxes to offset labeling bias")
    p.add_argument("pred_dir")
    p.add_argument("--mode", choices=("fixed", "variable"))
    p.add_argument("--bias-config", help="key=value bias configuration")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bias)

    p = sub.add_parser("alarm", help="window-level FNR curve for a frame sequence")
    p.add_argument("seq_file")
    p.add_argument("--sizes", type=_int_list, default=list(alarm.DEFAULT_SIZES))
    p.add_argument("--policy", choices=alarm.POLICIES, default="sliding")
    p.add_argument("--out")
    p.set_defaults(func=cmd_alarm)

    p = sub.add_parser("forward", help="run the network on a seeded random input")
    p.add_argument("checkpoint")
    p.add_argument("--input-size", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--conf", type=float, default=metrics.DEFAULT_CONFIDENCE)
    p.add_argument("--nms-iou", type=float, default=0.45)
    p.add_argument("--out", help="write kept detections in prediction format")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("gradcheck", help="taped gradients vs finite differences")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("crop", help="square crop windows and remapped labels for a manifest")
    p.add_argument("manifest")
    p.add_argument("--size", type=int, choices=(640, 1080), default=640)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_crop)

    p = sub.add_parser("init-checkpoint", help="write a seeded toy checkpoint")
    p.add_argument("path")
    p.add_argument("--input-size", type=int, default=64)
    p.add_argument("--base-channels", type=int, default=8)
    p.add_argument("--anchors", type=int, default=3)
    p.add_argument("--classes", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--zero", action="store_true", help="zero weights: every confidence decodes to 0.25")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("fixture", help="generate a synthetic labelled dataset with predictions")
    p.add_argument("out")
    p.add_argument("--images", type=int, default=10)
    p.add_argument("--background", type=float, default=0.075)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tp", type=int)
    p.add_argument("--fp", type=int)
    p.add_argument("--fn", type=int)
    p.set_defaults(func=cmd_fixture)
    return parser


def read_config(path) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _apply_config(parser: argparse.ArgumentParser, values: dict[str, str]) -> None:
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for subparser in sub.choices.values():
        defaults = {}
        for action in subparser._actions:
            if action.dest in values and action.option_strings:
                raw = values[action.dest]
                if isinstance(action, argparse._StoreTrueAction):
                    defaults[action.dest] = raw.lower() in ("1", "true", "yes")
                else:
                    defaults[action.dest] = action.type(raw) if action.type else raw
        subparser.set_defaults(**defaults)


def main(argv=None) -> int:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    try:
        if known.config:
            _apply_config(parser, read_config(_existing_file(known.config)))
    except (InputError, argparse.ArgumentTypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.ERROR if args.quiet else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort exit code contract
        log.exception("internal failure")
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
