"""Command-line interface.

Subcommands: fixture, slic, prototypes, train-align, refine, eval.
Exit codes: 0 success, 1 usage/config, 2 data or format problem,
3 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import affinity, cmpa, evaluation, superpixel, tensor_io
from .config import ConfigError, as_dict, echo_toml, load_config
from .fixture import FixtureConfig, make_fixture

SUMMARY_SCHEMA_VERSION = 1


def _echo(cfg):
    sys.stderr.write(echo_toml(cfg))


def _emit(args, payload):
    if getattr(args, "json", False):
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        for key, val in payload.items():
            if key in ("schema_version", "config"):
                continue
            print(f"{key}: {val}")


def _public_config(cfg):
    # worker count is an execution detail; outputs must not depend on it
    return {k: v for k, v in as_dict(cfg).items() if k != "workers"}


def _config_from(args, **extra):
    overrides = {}
    for name in ("seed", "superpixels", "compactness", "slic_iters", "regions",
                 "high_conf_thresh", "ratio_thresh", "ratio_mode", "w_clip", "w_dino",
                 "prop_steps", "attn_layers", "bg_thresh", "lr", "weight_decay", "gamma",
                 "tau_init", "refresh_interval", "batch_size", "iters", "k_prototypes",
                 "d2", "workers"):
        if hasattr(args, name):
            overrides[name] = getattr(args, name)
    overrides.update(extra)
    cfg = load_config(getattr(args, "config", None), overrides)
    _echo(cfg)
    return cfg


def cmd_fixture(args):
    fc = FixtureConfig(
        seed=args.seed, num_images=args.images, image_size=args.size,
        num_classes=args.classes, blob_count=args.blobs, num_background=args.background,
    )
    images, manifest = make_fixture(fc, args.out)
    _emit(args, {
        "schema_version": SUMMARY_SCHEMA_VERSION,
        "command": "fixture",
        "manifest": str(Path(args.out) / "manifest.json"),
        "images": len(images),
        "classes": manifest.num_foreground,
        "config": {f: getattr(fc, f) for f in ("seed", "num_images", "image_size",
                                               "num_classes", "blob_count", "num_background")},
    })
    return 0


def cmd_slic(args):
    cfg = _config_from(args)
    img = tensor_io.read_image(args.image)
    lab = superpixel.rgb_to_lab(img)
    s_target = min(cfg.superpixels, img.shape[0] * img.shape[1])
    spx = superpixel.slic_segment(lab, s_target, cfg.compactness, cfg.slic_iters)
    tensor_io.save_tensor(spx.labels.astype(np.int32), args.out)
    payload = {
        "schema_version": SUMMARY_SCHEMA_VERSION,
        "command": "slic",
        "labels": str(args.out),
        "num_superpixels": spx.num_superpixels,
        "config": _public_config(cfg),
    }
    if args.regions:
        clustering = superpixel.cluster_superpixels(
            spx, min(cfg.regions, spx.num_superpixels), seed=cfg.seed
        )
        region_path = Path(args.out).with_name(Path(args.out).stem + "_regions.npy")
        tensor_io.save_tensor(
            clustering.region_of_superpixel[spx.labels].astype(np.int32), region_path
        )
        payload["regions"] = str(region_path)
        payload["num_regions"] = clustering.num_regions
    if args.viz:
        mean_rgb = np.zeros((spx.num_superpixels, 3), dtype=np.float64)
        for c in range(3):
            np.add.at(mean_rgb[:, c], spx.labels.ravel(), img[..., c].ravel().astype(np.float64))
        mean_rgb /= spx.pixel_counts[:, None]
        viz = mean_rgb[spx.labels].astype(np.uint8)
        edge = np.zeros(spx.labels.shape, dtype=bool)
        edge[:, 1:] |= spx.labels[:, 1:] != spx.labels[:, :-1]
        edge[1:, :] |= spx.labels[1:, :] != spx.labels[:-1, :]
        viz[edge] = 0
        tensor_io.write_image(viz, args.viz)
        payload["viz"] = str(args.viz)
    _emit(args, payload)
    return 0


def _load_state_or_init(args, cfg, manifest, bundles):
    if getattr(args, "checkpoint", None):
        return cmpa.load_checkpoint(args.checkpoint)
    d1 = bundles[0].clip_feat.shape[1]
    return cmpa.init_alignment_state(
        d1, manifest.num_foreground, d2=cfg.d2 or None, tau_init=cfg.tau_init,
        seed=cfg.seed, with_seg_probe=False,
    )


def cmd_prototypes(args):
    cfg = _config_from(args)
    manifest = tensor_io.load_manifest(args.manifest)
    bundles = [tensor_io.load_bundle(manifest, e) for e in manifest.entries]
    state = _load_state_or_init(args, cfg, manifest, bundles)
    f_img, f_txt, classes = cmpa.collect_pairs(manifest, state, bundles=bundles)
    k = cfg.k_prototypes or manifest.num_foreground
    bank = cmpa.refresh_prototypes(f_img, f_txt, k, seed=cfg.seed,
                                   refresh_interval=cfg.refresh_interval)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tensor_io.save_tensor(bank.p_image, out / "p_image.npy")
    tensor_io.save_tensor(bank.p_text, out / "p_text.npy")
    with open(out / "prototypes.json", "w", encoding="utf-8") as fh:
        json.dump({"k": k, "seed": cfg.seed, "pairs": int(f_img.shape[0]),
                   "classes": [int(c) for c in sorted(set(classes.tolist()))]},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    _emit(args, {
        "schema_version": SUMMARY_SCHEMA_VERSION,
        "command": "prototypes",
        "out": str(out),
        "k": k,
        "pairs": int(f_img.shape[0]),
        "config": _public_config(cfg),
    })
    return 0


def cmd_train_align(args):
    cfg = _config_from(args)
    manifest = tensor_io.load_manifest(args.manifest)
    state, history = cmpa.train_align(
        manifest,
        iters=cfg.iters,
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
        gamma=cfg.gamma,
        tau_init=cfg.tau_init,
        refresh_interval=cfg.refresh_interval,
        k=cfg.k_prototypes or None,
        seed=cfg.seed,
        bg_thresh=cfg.bg_thresh,
        d2=cfg.d2 or None,
    )
    cmpa.save_checkpoint(state, args.out)
    _emit(args, {
        "schema_version": SUMMARY_SCHEMA_VERSION,
        "command": "train-align",
        "checkpoint": str(args.out),
        "iterations": state.iteration,
        "initial_proto_loss": history[0]["proto"],
        "final_proto_loss": history[-1]["proto"],
        "final_tau": state.tau,
        "config": _public_config(cfg),
    })
    return 0


def refine_bundle(bundle, image, cfg):
    """Superpixel-guided correction for one image: SLIC regions select the
    target patch columns, the fused attention is masked, and the CAM seeds
    are propagated through the result."""
    lab = superpixel.rgb_to_lab(image)
    s_target = min(cfg.superpixels, image.shape[0] * image.shape[1])
    spx = superpixel.slic_segment(lab, s_target, cfg.compactness, cfg.slic_iters)
    clustering = superpixel.cluster_superpixels(
        spx, min(cfg.regions, spx.num_superpixels), seed=cfg.seed
    )
    foreground = bundle.cam_seed.max(axis=0)
    targets = superpixel.select_target_regions(
        clustering, spx, foreground, cfg.high_conf_thresh, cfg.ratio_thresh, cfg.ratio_mode
    )
    keep = superpixel.regions_to_patch_mask(clustering, targets, spx, bundle.patch_grid)
    mask = affinity.build_mask(keep)

    def avg(stack):
        nl = stack.shape[0]
        return affinity.average_heads(stack, range(max(0, nl - cfg.attn_layers), nl))

    fused = affinity.fuse_affinity(avg(bundle.clip_attn), avg(bundle.dino_attn),
                                   cfg.w_clip, cfg.w_dino)
    # no row renormalization: masked-out mass must stay lost, otherwise
    # background rows redistribute onto the kept columns and the mask
    # stops suppressing anything
    masked = affinity.apply_mask(fused, mask, renormalize=False)
    h, w = bundle.patch_grid
    cam_flat = bundle.cam_seed.reshape(bundle.cam_seed.shape[0], -1)
    refined = affinity.refine_cam(masked, cam_flat, cfg.prop_steps)
    return refined.reshape(-1, h, w)


def cmd_refine(args):
    cfg = _config_from(args)
    manifest = tensor_io.load_manifest(args.manifest)
    out_dir = Path(args.out_dir)
    (out_dir / "refined_cam").mkdir(parents=True, exist_ok=True)
    (out_dir / "pseudo_label").mkdir(parents=True, exist_ok=True)

    def one(entry):
        bundle = tensor_io.load_bundle(manifest, entry)
        image = tensor_io.read_image(entry.image_path)
        refined = refine_bundle(bundle, image, cfg)
        tensor_io.save_tensor(refined.astype(np.float32),
                              out_dir / "refined_cam" / f"{entry.image_id}.npy")
        pseudo = evaluation.cam_to_pseudo_label(refined, bundle.labels, cfg.bg_thresh)
        tensor_io.save_tensor(pseudo, out_dir / "pseudo_label" / f"{entry.image_id}.npy")
        return entry.image_id

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            done = list(pool.map(one, manifest.entries))
    else:
        done = [one(e) for e in manifest.entries]
    _emit(args, {
        "schema_version": SUMMARY_SCHEMA_VERSION,
        "command": "refine",
        "out_dir": str(out_dir),
        "images": len(done),
        "config": _public_config(cfg),
    })
    return 0


def cmd_eval(args):
    cfg = _config_from(args)
    pred_dir = Path(args.pred_dir)
    gt_dir = Path(args.gt_dir)
    pred_files = sorted(pred_dir.glob("*.npy"))
    if not pred_files:
        raise tensor_io.ManifestError(f"no .npy predictions under {pred_dir}")

    def one(pf):
        gt_path = gt_dir / pf.name
        if not gt_path.exists():
            raise tensor_io.ManifestError(f"missing ground truth for {pf.name}: {gt_path}")
        pred = np.asarray(tensor_io.load_tensor(pf))
        gt = np.asarray(tensor_io.load_tensor(gt_path))
        if pred.ndim != 2:
            raise ValueError(f"{pf}: predictions must be 2-D int masks, got shape {pred.shape}")
        if pred.shape != gt.shape:
            pred = superpixel.upsample_nearest(pred, gt.shape)
        return pred, gt

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            pairs = list(pool.map(one, pred_files))
    else:
        pairs = [one(pf) for pf in pred_files]

    if args.classes:
        num_classes = args.classes
    else:
        num_classes = 0
        for pred, gt in pairs:
            observed = np.concatenate([pred.ravel(), gt.ravel()])
            observed = observed[observed != evaluation.IGNORE]
            num_classes = max(num_classes, int(observed.max()))

    acc = evaluation.ConfusionAccumulator(num_classes)
    for pred, gt in pairs:
        evaluation.accumulate(acc, pred, gt)
    report = evaluation.metrics(acc)

    payload = {
        "schema_version": SUMMARY_SCHEMA_VERSION,
        "command": "eval",
        "images": len(pred_files),
        "miou": report.miou,
        "precision": report.precision,
        "recall": report.recall,
        "confusion_ratio": report.confusion_ratio,
        "per_class_iou": [None if np.isnan(v) else float(v) for v in report.per_class_iou],
        "config": _public_config(cfg),
    }
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "iou"])
            for ci, v in enumerate(report.per_class_iou):
                writer.writerow([ci, "" if np.isnan(v) else f"{v:.6f}"])
    if args.plot:
        _plot_per_class_iou(report.per_class_iou, args.plot)
        payload["plot"] = str(args.plot)
    _emit(args, payload)
    return 0


def _plot_per_class_iou(per_class_iou, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    vals = np.nan_to_num(per_class_iou, nan=0.0)
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.bar(np.arange(len(vals)), vals, color="#4878cf")
    ax.set_xlabel("class (0 = background)")
    ax.set_ylabel("IoU")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    # strip mutable metadata so identical runs give identical bytes
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def build_parser():
    parser = argparse.ArgumentParser(prog="ssr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--json", action="store_true", help="machine-readable summary on stdout")

    p = sub.add_parser("fixture", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--blobs", type=int, default=2)
    p.add_argument("--background", type=int, default=2)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_fixture)

    p = sub.add_parser("slic", help="superpixel segmentation of one image")
    common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--superpixels", type=int, default=None)
    p.add_argument("--compactness", type=float, default=None)
    p.add_argument("--slic-iters", dest="slic_iters", type=int, default=None)
    p.add_argument("--regions", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--viz", help="write a PNG visualization")
    p.set_defaults(func=cmd_slic)

    p = sub.add_parser("prototypes", help="build prototype banks from a manifest")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clusters", dest="k_prototypes", type=int, default=None)
    p.add_argument("--checkpoint", help="trained heads to project with")
    p.set_defaults(func=cmd_prototypes)

    p = sub.add_parser("train-align", help="train the alignment heads")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--tau-init", dest="tau_init", type=float, default=None)
    p.add_argument("--refresh", dest="refresh_interval", type=int, default=None)
    p.add_argument("--clusters", dest="k_prototypes", type=int, default=None)
    p.add_argument("--bg-thresh", dest="bg_thresh", type=float, default=None)
    p.set_defaults(func=cmd_train_align)

    p = sub.add_parser("refine", help="superpixel-guided CAM refinement")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--w-clip", dest="w_clip", type=float, default=None)
    p.add_argument("--w-dino", dest="w_dino", type=float, default=None)
    p.add_argument("--prop-steps", dest="prop_steps", type=int, default=None)
    p.add_argument("--ratio-thresh", dest="ratio_thresh", type=float, default=None)
    p.add_argument("--high-conf-thresh", dest="high_conf_thresh", type=float, default=None)
    p.add_argument("--ratio-mode", dest="ratio_mode", default=None)
    p.add_argument("--superpixels", type=int, default=None)
    p.add_argument("--compactness", type=float, default=None)
    p.add_argument("--regions", type=int, default=None)
    p.add_argument("--attn-layers", dest="attn_layers", type=int, default=None)
    p.add_argument("--bg-thresh", dest="bg_thresh", type=float, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="segmentation metrics from predicted masks")
    common(p)
    p.add_argument("--pred-dir", dest="pred_dir", required=True)
    p.add_argument("--gt-dir", dest="gt_dir", required=True)
    p.add_argument("--classes", type=int, default=None, help="foreground class count")
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("--csv", help="write per-class IoU CSV here")
    p.add_argument("--plot", help="write a per-class IoU bar chart PNG here")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors; remap to 1
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"ssr: config error: {exc}", file=sys.stderr)
        return 1
    except cmpa.NumericError as exc:
        print(f"ssr: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (tensor_io.TensorFormatError, tensor_io.TensorCorruptionError,
            tensor_io.ManifestError, FileNotFoundError, ValueError) as exc:
        print(f"ssr: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
