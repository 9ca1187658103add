"""Command-line pipeline driver.

Subcommands cover the full flow: synth (oracle dataset), parse-model
(validation report), propagate / text-prompt (annotation spreading and
mask prediction), render-depth (depth maps for external inpainting),
train (removal fitting), evaluate (metrics CSV + figure), serve (the
annotation HTTP service).

Exit codes: 0 success, 2 usage, 3 data error, 4 external tool failure.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import imgio, report
from .colmap_model import parse_model
from .dataset import (
    build_supervision,
    load_dataset,
    load_mask_dir,
    make_box_detector,
    make_mask_predictor,
)
from .errors import DataError, ExternalToolError
from .field import VoxelField, load_checkpoint, render_image, save_checkpoint
from .masks import mask_filename, save_mask_png
from .metrics import mask_accuracy, mask_iou, psnr
from .propagation import load_prompts, predict_masks, propagate_points, run_text_prompt, save_prompts
from .synthetic import SceneSpec, write_dataset
from .train import TrainConfig, save_loss_history, train_removal


def _parse_resolution(text):
    parts = [int(v) for v in text.split(",")]
    if len(parts) == 1:
        return (parts[0],) * 3
    if len(parts) == 3:
        return tuple(parts)
    raise ValueError("resolution must be N or NX,NY,NZ")


def _parse_bounds(text):
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 6:
        raise ValueError("bounds must be six comma-separated numbers")
    return parts[:3], parts[3:]


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def cmd_synth(args):
    spec = SceneSpec.load(args.spec) if args.spec else SceneSpec()
    out = write_dataset(spec, args.out, model_format=args.format, seed=args.seed)
    print(f"wrote dataset to {out}")
    print(f"views: {spec.n_views}  image size: {spec.width}x{spec.height}")
    return 0


def cmd_parse_model(args):
    model = parse_model(args.model, args.format)
    n_kp = sum(img.num_keypoints() for img in model.images.values())
    print(f"cameras: {len(model.cameras)}")
    print(f"images: {len(model.images)}  keypoints: {n_kp}")
    print(f"points3D: {len(model.points)}")
    if model.clamp_report:
        total = sum(model.clamp_report.values())
        print(f"clamped keypoints: {total} across {len(model.clamp_report)} image(s)")
    print("view order: " + ", ".join(model.images[v].name for v in model.view_order))
    print("ok")
    return 0


def _write_mask_stack(stack, images, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for view_id, mask in stack.masks.items():
        save_mask_png(mask, out_dir / mask_filename(images[view_id].name))
    for view_id, reason in stack.failures.items():
        print(f"view {view_id}: {reason}", file=sys.stderr)
    for view_id, warning in stack.warnings.items():
        print(f"view {view_id}: {warning}", file=sys.stderr)


def cmd_propagate(args):
    dataset = load_dataset(args.model)
    prompts_in = load_prompts(args.prompts)
    initial = next((p for p in prompts_in.prompts.values() if len(p)), None)
    if initial is None:
        raise DataError(f"{args.prompts} contains no annotation points")
    if initial.view_id not in dataset.images:
        raise DataError(f"annotated view {initial.view_id} not in the model")
    predictor = make_mask_predictor(args.mask_predictor, dataset)
    initial_mask = predictor.predict(dataset.images[initial.view_id], initial.points)
    result = propagate_points(dataset.model, initial, initial_mask)
    stack = predict_masks(predictor, dataset.images, result)
    _write_mask_stack(stack, dataset.images, args.out)
    prompts_out = args.prompts_out or str(Path(args.out) / "prompts_propagated.json")
    save_prompts(result, prompts_out)
    for note in result.notes:
        print(f"note: {note}", file=sys.stderr)
    n_masks = sum(1 for v in stack.masks.values() if v.foreground_count())
    print(f"propagated to {len(result.prompts)} view(s), {len(result.dropped)} dropped")
    print(f"wrote {n_masks} non-empty mask(s) to {args.out}")
    print(f"wrote prompts to {prompts_out}")
    return 0


def cmd_text_prompt(args):
    dataset = load_dataset(args.model)
    detector = make_box_detector(args.detector, dataset)
    predictor = make_mask_predictor(args.mask_predictor, dataset)
    result, _ = run_text_prompt(
        dataset.model, dataset.images, detector, predictor, args.text, args.view
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_prompts(result, out / "prompts.json")
    stack = predict_masks(predictor, dataset.images, result)
    _write_mask_stack(stack, dataset.images, out)
    print(f"propagated to {len(result.prompts)} view(s), {len(result.dropped)} dropped")
    print(f"wrote prompts to {out / 'prompts.json'}")
    return 0


def cmd_render_depth(args):
    dataset = load_dataset(args.model)
    trained = load_checkpoint(args.field)
    near, far = (
        (args.near, args.far)
        if args.near is not None and args.far is not None
        else dataset.ray_bounds()
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for view_id in dataset.view_ids():
        img = dataset.model.images[view_id]
        cam = dataset.model.cameras[img.camera_id]
        _, depth, _ = render_image(trained, cam, img.pose, near, far, args.samples)
        imgio.write_pfm(depth, out / imgio.depth_filename(img.name))
    print(f"wrote {len(dataset.view_ids())} depth map(s) to {out}")
    return 0


_TRAIN_FLAG_KEYS = (
    ("mode", "depth_mode"),
    ("steps", "steps"),
    ("lr", "lr"),
    ("seed", "seed"),
    ("ray_batch", "ray_batch"),
    ("n_samples", "n_samples"),
    ("patch_size", "patch_size"),
    ("patch_batch", "patch_batch"),
    ("weight_a", "a"),
    ("weight_b", "b"),
    ("weight_c", "c"),
    ("near", "t_near"),
    ("far", "t_far"),
)


def _merge_train_config(args, dataset):
    """Precedence: flags > config file > scene-derived bounds > defaults."""
    merged = TrainConfig().to_dict()
    if dataset is not None:
        try:
            merged["t_near"], merged["t_far"] = dataset.ray_bounds()
        except DataError:
            pass
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as f:
                merged.update(json.load(f))
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"unreadable train config {args.config}: {e}") from None
    for flag, key in _TRAIN_FLAG_KEYS:
        value = getattr(args, flag)
        if value is not None:
            merged[key] = value
    if args.lpips is not None:
        merged["perceptual_on"] = args.lpips == "on"
    try:
        return TrainConfig.from_dict(merged)
    except (TypeError, ValueError) as e:
        raise DataError(f"bad train config: {e}") from None


def cmd_train(args):
    dataset = load_dataset(args.model) if args.model else None
    config = _merge_train_config(args, dataset)
    if args.print_config:
        payload = config.to_dict()
        payload["resolution"] = list(args.resolution)
        print(json.dumps(payload, indent=2))
        return 0
    if dataset is None:
        raise DataError("train needs --model (dataset directory)")
    if args.out is None:
        raise DataError("train needs --out (checkpoint path)")
    exclude = args.exclude_view or []
    supervision = build_supervision(dataset, args.priors, args.masks, exclude)
    if args.bounds is not None:
        lo, hi = args.bounds
    else:
        lo, hi = dataset.field_bounds()
    start = VoxelField.create(args.resolution, lo, hi)
    trained, history = train_removal(start, supervision, config)
    save_checkpoint(trained, args.out)
    loss_csv = args.loss_csv or f"{args.out}.loss.csv"
    loss_fig = args.figure or f"{args.out}.loss.png"
    save_loss_history(history, loss_csv)
    report.save_loss_figure(history, loss_fig)
    if history:
        last = history[-1]
        print(
            f"step {last[0]}: L_c={last[1]:.5g} L_d={last[2]:.5g} "
            f"L_p={last[3]:.5g} total={last[4]:.5g}"
        )
    print(f"wrote checkpoint to {args.out}")
    print(f"wrote loss history to {loss_csv} and {loss_fig}")
    return 0


def cmd_evaluate(args):
    dataset = load_dataset(args.gt)
    trained = load_checkpoint(args.field)
    near, far = (
        (args.near, args.far)
        if args.near is not None and args.far is not None
        else dataset.ray_bounds()
    )
    gt_masks = load_mask_dir(dataset, Path(dataset.root) / "masks")
    pred_masks = load_mask_dir(dataset, args.masks) if args.masks else gt_masks
    rows = []
    for view_id in dataset.view_ids():
        img = dataset.model.images[view_id]
        cam = dataset.model.cameras[img.camera_id]
        target_path = Path(dataset.root) / "priors" / imgio.inpaint_filename(img.name)
        if not target_path.is_file():
            raise DataError(f"missing removal ground truth {target_path}")
        target = imgio.load_image_png(target_path)
        rendered, _, _ = render_image(trained, cam, img.pose, near, far, args.samples)
        rows.append(
            (
                img.name,
                mask_accuracy(pred_masks[view_id], gt_masks[view_id]),
                mask_iou(pred_masks[view_id], gt_masks[view_id]),
                psnr(rendered, target),
            )
        )
    report.save_metrics_csv(rows, args.out)
    figure = args.figure or str(Path(args.out).with_suffix(".png"))
    report.save_metrics_figure(rows, figure)
    finite = [r[3] for r in rows if np.isfinite(r[3])]
    mean_psnr = sum(finite) / len(finite) if finite else float("inf")
    print(f"mean acc={sum(r[1] for r in rows) / len(rows):.4f}")
    print(f"mean iou={sum(r[2] for r in rows) / len(rows):.4f}")
    print(f"mean psnr={mean_psnr:.2f} dB")
    print(f"wrote metrics to {args.out} and {figure}")
    return 0


def cmd_serve(args):
    from .service import serve

    dataset = load_dataset(args.model)
    predictor = make_mask_predictor(args.mask_predictor, dataset)
    print(f"serving {dataset.root} on {args.host}:{args.port}")
    serve(dataset, predictor, args.host, args.port, args.export_dir)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="scenewipe",
        description="multi-view object removal: prompts to masks to a retrained scene",
    )
    parser.add_argument(
        "--json",
        action="store_true",
        help="emit machine-readable error JSON on stderr",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", help="write an analytic oracle dataset")
    p.add_argument("--spec", help="scene spec JSON (default: built-in scene)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--format", choices=("text", "binary"), default="text")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("parse-model", help="parse and validate a sparse model")
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--format", choices=("auto", "text", "binary"), default="auto")
    p.set_defaults(func=cmd_parse_model)

    p = sub.add_parser("propagate", help="spread a point prompt and predict masks")
    p.add_argument("--model", required=True, help="dataset or sparse model directory")
    p.add_argument("--prompts", required=True, help="prompt JSON (first annotated view is used)")
    p.add_argument("--mask-predictor", default="oracle", help="oracle or exec:CMD")
    p.add_argument("--out", required=True, help="output directory for mask PNGs")
    p.add_argument("--prompts-out", help="propagated prompt JSON (default under --out)")
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("text-prompt", help="text-driven annotation via a box detector")
    p.add_argument("--model", required=True)
    p.add_argument("--text", required=True, help="object description")
    p.add_argument("--detector", default="oracle", help="oracle or exec:CMD")
    p.add_argument("--mask-predictor", default="oracle", help="oracle or exec:CMD")
    p.add_argument("--view", type=int, help="annotated view id (default: first)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_text_prompt)

    p = sub.add_parser("render-depth", help="render per-view depth maps from a field")
    p.add_argument("--field", required=True, help="field checkpoint")
    p.add_argument("--model", required=True, help="dataset directory (cameras)")
    p.add_argument("--out", required=True)
    p.add_argument("--near", type=float)
    p.add_argument("--far", type=float)
    p.add_argument("--samples", type=int, default=64)
    p.set_defaults(func=cmd_render_depth)

    p = sub.add_parser("train", help="fit the removal field to priors")
    p.add_argument("--model", help="dataset directory")
    p.add_argument("--priors", help="priors directory (default <model>/priors)")
    p.add_argument("--masks", help="mask directory (default <model>/masks)")
    p.add_argument("--out", help="output checkpoint path")
    p.add_argument("--config", help="train config JSON")
    p.add_argument("--mode", choices=("dir", "dp", "da"), help="depth supervision mode")
    p.add_argument("--lpips", choices=("on", "off"), help="perceptual surrogate term")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--ray-batch", type=int, dest="ray_batch")
    p.add_argument("--n-samples", type=int, dest="n_samples")
    p.add_argument("--patch-size", type=int, dest="patch_size")
    p.add_argument("--patch-batch", type=int, dest="patch_batch")
    p.add_argument("--weight-a", type=float, dest="weight_a")
    p.add_argument("--weight-b", type=float, dest="weight_b")
    p.add_argument("--weight-c", type=float, dest="weight_c")
    p.add_argument("--near", type=float)
    p.add_argument("--far", type=float)
    p.add_argument("--resolution", type=_parse_resolution, default=(64, 64, 64))
    p.add_argument("--bounds", type=_parse_bounds, help="x0,y0,z0,x1,y1,z1")
    p.add_argument("--exclude-view", type=int, action="append", help="hold out a view id")
    p.add_argument("--loss-csv", help="loss history CSV path")
    p.add_argument("--figure", help="loss figure path")
    p.add_argument("--print-config", action="store_true", help="print merged config and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="mask metrics and render PSNR vs ground truth")
    p.add_argument("--field", required=True, help="field checkpoint")
    p.add_argument("--gt", required=True, help="dataset directory with masks/ and priors/")
    p.add_argument("--masks", help="predicted mask directory (default: ground truth)")
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--figure", help="metrics figure path (default: CSV with .png)")
    p.add_argument("--near", type=float)
    p.add_argument("--far", type=float)
    p.add_argument("--samples", type=int, default=64)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("serve", help="run the annotation HTTP service")
    p.add_argument("--model", required=True, help="dataset directory")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--mask-predictor", default="oracle", help="oracle or exec:CMD")
    p.add_argument("--export-dir", help="directory for exported prompt files")
    p.set_defaults(func=cmd_serve)

    return parser


def _report_error(args, exc):
    if getattr(args, "json", False):
        payload = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(payload), file=sys.stderr)
    else:
        print(f"error: {exc}", file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ExternalToolError as e:
        _report_error(args, e)
        return 4
    except DataError as e:
        _report_error(args, e)
        return 3
    except ValueError as e:
        _report_error(args, e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
