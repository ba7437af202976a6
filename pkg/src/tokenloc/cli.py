"""Command-line interface.

Exit codes: 0 success, 2 usage, 3 format/IO failure, 4 contract
violation. Every failure writes a single line to stderr of the form
`error: <kind>: <detail>`.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import numerics as nm
from .ablation import parse_strategy, run_ablation
from .backbone import ModelConfig
from .errors import ContractError, DegenerateInputError, DimensionError, FormatError
from .formats import (
    load_samples,
    parse_manifest,
    read_checkpoint,
    read_tensor,
    write_checkpoint,
    write_heatmap,
    write_tensor,
)
from .localization import (
    DEFAULT_GRID,
    best_threshold,
    box_from_heat,
    fuse,
    gt_class_heats,
    gt_known_table,
    localize,
    max_box_acc_v2_over_grid,
    threshold_grid,
)
from .metrics import EvalRecord, loc_acc, max_box_acc_v2
from .pipeline import two_branch_forward
from .training import ToyTaskConfig, TrainConfig, train_toy

METRIC_NAMES = ("gt-known", "top1", "top5", "maxboxaccv2")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: usage: {message}", file=sys.stderr)
        raise SystemExit(2)


def _parse_grid(text: str) -> tuple:
    if text == "grid":
        return DEFAULT_GRID
    parts = text.split(":")
    if parts[0] == "grid":
        parts = parts[1:]
    if len(parts) != 3:
        raise ContractError(f"grid must be start:stop:step, got {text!r}")
    return tuple(float(p) for p in parts)


def _ranking(p_cam: np.ndarray) -> list:
    return [int(i) for i in np.argsort(-p_cam, kind="stable")]


def prediction_heats(params, cfg, samples, *, selection_mass=None):
    """Per sample: class ranking by CAM probability and the fused map of
    the top-ranked class."""
    out = []
    for image, _, _ in samples:
        result = two_branch_forward(params, cfg, image, selection_mass=selection_mass)
        ranking = _ranking(nm.value_of(result.p_cam))
        fused = fuse(result.refined_map, result.cam_maps, ranking[0])
        out.append((ranking, nm.bilinear_resize(fused, cfg.image_size, cfg.image_size)))
    return out


def evaluate_samples(params, cfg, samples, records, metrics, *, theta=None, grid=None,
                     selection_mass=None):
    """Shared engine behind `eval`: returns (theta_star, {metric: value}).

    With a grid, theta_star maximises GT-known accuracy and the class-
    aware metrics are computed there; maxboxaccv2 takes each IoU level's
    own best threshold. With a fixed theta everything uses that theta.
    """
    side = cfg.image_size
    heats_gt = gt_class_heats(params, cfg, samples, selection_mass=selection_mass)
    thetas = threshold_grid(*grid) if grid is not None else [float(theta)]
    table = gt_known_table(heats_gt, samples, thetas, side, side)
    theta_star = best_threshold(table) if grid is not None else float(theta)

    def records_at(heats, rankings, value):
        built = []
        for record, heat, ranking in zip(records, heats, rankings):
            box, _ = box_from_heat(heat, value, side, side)
            built.append(EvalRecord(image_id=record.image_id, box=box,
                                    gt_boxes=record.boxes, gt_class=record.label,
                                    class_ranking=ranking))
        return built

    identity_ranking = [list(range(cfg.num_classes)) for _ in samples]
    results = {}
    needs_prediction = any(m in metrics for m in ("top1", "top5"))
    predictions = prediction_heats(params, cfg, samples,
                                   selection_mass=selection_mass) if needs_prediction else None
    for metric in metrics:
        if metric == "gt-known":
            results[metric] = dict(table)[theta_star]
        elif metric == "maxboxaccv2":
            if grid is not None:
                results[metric] = max_box_acc_v2_over_grid(heats_gt, samples, thetas, side, side)
            else:
                results[metric] = max_box_acc_v2(records_at(heats_gt, identity_ranking, theta_star))
        else:
            rankings = [ranking for ranking, _ in predictions]
            heats_pred = [heat for _, heat in predictions]
            results[metric] = loc_acc(records_at(heats_pred, rankings, theta_star), metric)
    return theta_star, results


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _load_manifest_samples(path):
    records = parse_manifest(path)
    if not records:
        raise ContractError(f"manifest {path} is empty")
    return records, load_samples(records)


def cmd_infer(args):
    cfg, params = read_checkpoint(args.ckpt)
    image = read_tensor(args.input)
    result = two_branch_forward(params, cfg, image, selection_mass=args.u)
    write_tensor(args.out_logits, nm.value_of(result.p_cam))
    write_tensor(args.out_pt, nm.value_of(result.p_refine))
    return 0


def cmd_localize(args):
    cfg, params = read_checkpoint(args.ckpt)
    image = read_tensor(args.input)
    class_id = "predicted" if args.class_id == "auto" else int(args.class_id)
    result = localize(params, cfg, image, class_id, selection_mass=args.u, theta=args.theta)
    box = result.box
    Path(args.out_box).write_text(f"{box.x0} {box.y0} {box.x1} {box.y1}\n", encoding="ascii")
    if args.out_map:
        write_tensor(args.out_map, result.heat)
    if result.degenerate:
        print("warning: empty foreground, emitted the full-image box", file=sys.stderr)
    return 0


def cmd_eval(args):
    cfg, params = read_checkpoint(args.ckpt)
    records, samples = _load_manifest_samples(args.manifest)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    for metric in metrics:
        if metric not in METRIC_NAMES:
            raise ContractError(f"unknown metric {metric!r}, expected one of {METRIC_NAMES}")
    if args.theta.startswith("grid"):
        theta, grid = None, _parse_grid(args.theta)
    else:
        theta, grid = float(args.theta), None
    theta_star, results = evaluate_samples(params, cfg, samples, records, metrics,
                                           theta=theta, grid=grid, selection_mass=args.u)
    rows = [(metric, repr(results[metric])) for metric in metrics]
    rows.append(("theta", repr(theta_star)))
    _write_csv(args.out_report, ("metric", "value"), rows)
    return 0


def cmd_calibrate(args):
    cfg, params = read_checkpoint(args.ckpt)
    _, samples = _load_manifest_samples(args.manifest)
    grid = _parse_grid(args.grid)
    heats = gt_class_heats(params, cfg, samples, selection_mass=args.u)
    side = cfg.image_size
    table = gt_known_table(heats, samples, threshold_grid(*grid), side, side)
    theta_star = best_threshold(table)
    _write_csv(args.out_table, ("theta", "gt_known"),
               [(repr(theta), repr(acc)) for theta, acc in table])
    print(f"theta_star={theta_star!r}")
    return 0


def _dataclass_from_json(cls, path, extra=()):
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise FormatError(f"{path}: expected a JSON object")
    known = {k: v for k, v in payload.items() if k not in extra}
    try:
        return cls(**known), {k: payload[k] for k in extra if k in payload}
    except TypeError as exc:
        raise ContractError(f"{path}: {exc}") from exc


def cmd_train_toy(args):
    toy, _ = _dataclass_from_json(ToyTaskConfig, args.toy_config)
    train, extras = _dataclass_from_json(TrainConfig, args.train_config, extra=("model",))
    model = None
    if "model" in extras:
        try:
            model = ModelConfig(image_size=toy.image_size, num_classes=toy.num_classes,
                                **extras["model"])
        except TypeError as exc:
            raise ContractError(f"{args.train_config}: model section: {exc}") from exc
    cfg, params, curve = train_toy(toy, train, model)
    write_checkpoint(args.out_ckpt, cfg, params)
    _write_csv(args.out_curve, ("step", "phase", "loss"),
               [(step, phase, repr(loss)) for step, phase, loss in curve])
    return 0


def cmd_ablate(args):
    cfg, params = read_checkpoint(args.ckpt)
    _, samples = _load_manifest_samples(args.manifest)
    strategies = [parse_strategy(part) for part in args.strategies.split(",") if part]
    modes = {"both": None, "on": True, "off": False}[args.reattention]
    grid = _parse_grid(args.grid) if args.grid else None
    rows = run_ablation(params, cfg, samples, strategies, reattention_on=modes, grid=grid)
    _write_csv(args.out_table, ("strategy", "reattention", "theta", "gt_known", "max_box_acc_v2"),
               [(label, "on" if reatt else "off", repr(theta), repr(gt), repr(mb))
                for label, reatt, theta, gt, mb in rows])
    return 0


def cmd_heatmap(args):
    heat = read_tensor(args.map)
    image = read_tensor(args.image)
    write_heatmap(args.out, heat, image, args.alpha)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="tokenloc",
                     description="Token re-attention localization pipeline")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("infer", help="run both branches on one image tensor")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out-logits", required=True, help="CAM-branch class probabilities")
    p.add_argument("--out-pt", required=True, help="scoring-branch class probabilities")
    p.add_argument("--u", type=float, default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("localize", help="predict one bounding box")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--class", dest="class_id", default="auto",
                   help="class id, or 'auto' for the CAM prediction")
    p.add_argument("--u", type=float, default=None)
    p.add_argument("--theta", type=float, required=True)
    p.add_argument("--out-box", required=True)
    p.add_argument("--out-map", default=None)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("eval", help="evaluate localization metrics on a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--u", type=float, default=None)
    p.add_argument("--theta", required=True,
                   help="fixed threshold, or grid[:start:stop:step]")
    p.add_argument("--metrics", default="gt-known,top1,top5,maxboxaccv2")
    p.add_argument("--out-report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("calibrate", help="grid-search the binarization threshold")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--u", type=float, default=None)
    p.add_argument("--grid", default="grid")
    p.add_argument("--out-table", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("train-toy", help="train on the synthetic square task")
    p.add_argument("--toy-config", required=True)
    p.add_argument("--train-config", required=True)
    p.add_argument("--out-ckpt", required=True)
    p.add_argument("--out-curve", required=True)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("ablate-selection", help="compare token-selection strategies")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--strategies", required=True,
                   help="comma list: adaptive[:u], topk:<k>, fixed:<t|mean>")
    p.add_argument("--reattention", choices=("both", "on", "off"), default="both")
    p.add_argument("--grid", default=None)
    p.add_argument("--out-table", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("heatmap", help="render a heat map over an image as PPM")
    p.add_argument("--map", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"error: format: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: format: {exc}", file=sys.stderr)
        return 3
    except (ContractError, DimensionError, DegenerateInputError, ValueError) as exc:
        print(f"error: contract: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
