"""Synthetic desk-scale datasets: colored blobs on textured gray background.

Everything downstream of the (out-of-scope) backbones is synthesized here so
the whole pipeline can be exercised and measured without real features:

- patch features = fixed random projection of local color histograms, so
  same-class blobs land close in feature space;
- attention stacks = row-normalized powers of the feature cosine similarity;
- CAM seeds = ground truth coverage, box-blurred and corrupted with
  background leakage (the over-activation the refinement stage must undo);
- text features = the same projection applied to idealized per-class color
  histograms, plus background rows built from gray tones.

Generation is fully determined by the seed; identical seeds give identical
bytes on disk.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor_io

_HIST_BINS = 3  # per channel -> 27-bin joint histogram


@dataclass(frozen=True)
class FixtureConfig:
    seed: int = 0
    num_images: int = 8
    image_size: int = 64
    num_classes: int = 3
    blob_count: int = 2
    num_background: int = 2
    patch_size: int = 8
    feature_dim: int = 32
    attn_layers: int = 2
    attn_heads: int = 2
    leak_spots: int = 4
    leak_strength: float = 0.58
    diffuse_floor: float = 0.15

    def validate(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.num_classes < 1 or self.num_images < 1 or self.blob_count < 1:
            raise ValueError("num_classes, num_images, blob_count must all be >= 1")
        if not 0.0 <= self.leak_strength <= 1.0:
            raise ValueError("leak_strength must be in [0, 1]")


def _class_colors(num_classes):
    colors = []
    for c in range(num_classes):
        r, g, b = colorsys.hsv_to_rgb(c / num_classes, 0.8, 0.85)
        colors.append((int(r * 255), int(g * 255), int(b * 255)))
    return np.array(colors, dtype=np.float64)


def _patch_histograms(image, patch):
    """Joint 3x3x3 color histogram per patch, normalized to sum 1."""
    h = image.shape[0] // patch
    w = image.shape[1] // patch
    bins = np.minimum(image.astype(np.int64) * _HIST_BINS // 256, _HIST_BINS - 1)
    joint = (bins[..., 0] * _HIST_BINS + bins[..., 1]) * _HIST_BINS + bins[..., 2]
    hists = np.zeros((h * w, _HIST_BINS**3))
    py = np.arange(image.shape[0]) // patch
    px = np.arange(image.shape[1]) // patch
    pid = py[:, None] * w + px[None, :]
    np.add.at(hists, (pid.ravel(), joint.ravel()), 1.0)
    return hists / (patch * patch)


def _color_histogram(color, rng, patch=16, noise=10.0):
    """Histogram of a rendered patch of one color under the blob noise model."""
    tile = np.clip(color[None, None, :] + rng.normal(0, noise, (patch, patch, 3)), 0, 255)
    return _patch_histograms(tile.astype(np.uint8), patch)[0]


def _box_blur(cam):
    """One 3x3 box-blur pass with edge clamping, per channel."""
    padded = np.pad(cam, ((0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.zeros_like(cam)
    for dy in range(3):
        for dx in range(3):
            out += padded[:, dy:dy + cam.shape[1], dx:dx + cam.shape[2]]
    return out / 9.0


def make_fixture(config, out_dir):
    """Generate the dataset under out_dir and return (images, manifest).

    Layout: images/<id>.png, gt/<id>.npy, feat/<id>.<role>.npy,
    manifest.json.
    """
    config.validate()
    out_dir = Path(out_dir)
    for sub in ("images", "gt", "feat"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(config.seed)
    size = config.image_size
    patch = config.patch_size
    grid = size // patch
    n_patches = grid * grid
    colors = _class_colors(config.num_classes)
    w_proj = rng.normal(0.0, 1.0 / np.sqrt(_HIST_BINS**3),
                        size=(config.feature_dim, _HIST_BINS**3))
    text_base = np.stack(
        [_color_histogram(colors[c], rng) for c in range(config.num_classes)]
    ) @ w_proj.T
    bg_tones = np.linspace(105, 150, max(config.num_background, 1))
    bg_base = np.stack(
        [_color_histogram(np.full(3, tone), rng) for tone in bg_tones[: config.num_background]]
    ) @ w_proj.T if config.num_background else np.zeros((0, config.feature_dim))

    images = []
    entry_dicts = []
    yy, xx = np.indices((size, size), dtype=np.float64)

    for idx in range(config.num_images):
        image_id = f"img_{idx:04d}"

        # textured gray background
        tone = rng.uniform(110, 145)
        img = np.clip(
            tone + rng.normal(0, 12, (size, size, 1)) + rng.normal(0, 4, (size, size, 3)),
            0, 255,
        )
        gt = np.zeros((size, size), dtype=np.int32)

        placed = []
        for _ in range(config.blob_count):
            cls = int(rng.integers(config.num_classes))
            for _attempt in range(40):
                ry = rng.uniform(12, 20)
                rx = rng.uniform(12, 20)
                cy = rng.uniform(ry + 2, size - ry - 2)
                cx = rng.uniform(rx + 2, size - rx - 2)
                inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
                if not (gt[inside] != 0).any():
                    jitter = rng.normal(0, 8, 3)
                    img[inside] = np.clip(
                        colors[cls] + jitter + rng.normal(0, 10, (int(inside.sum()), 3)),
                        0, 255,
                    )
                    gt[inside] = cls + 1
                    placed.append(cls)
                    break
        if not placed:  # give up on overlap avoidance rather than emit an empty image
            cls = int(rng.integers(config.num_classes))
            inside = ((yy - size / 2) / 14) ** 2 + ((xx - size / 2) / 14) ** 2 <= 1.0
            img[inside] = colors[cls]
            gt[inside] = cls + 1
            placed.append(cls)
        labels = sorted(set(placed))
        img = img.astype(np.uint8)

        feats = _patch_histograms(img, patch) @ w_proj.T
        feats += rng.normal(0, 0.005, feats.shape)

        # per-class patch coverage, blurred, plus leakage well away from blobs
        coverage = np.zeros((len(labels), grid, grid))
        for ci, cls in enumerate(labels):
            hit = (gt == cls + 1).astype(np.float64)
            coverage[ci] = hit.reshape(grid, patch, grid, patch).mean(axis=(1, 3))
        cam = _box_blur(coverage)
        # diffuse low-grade response everywhere plus a few strong leak
        # spots in the background (the over-activation to be rectified)
        cam += rng.uniform(0.0, config.diffuse_floor, cam.shape)
        near_fg = _box_blur(_box_blur((coverage.sum(axis=0, keepdims=True) > 0).astype(float)))[0] > 0
        far_bg = np.flatnonzero(~near_fg.ravel())
        for ci in range(len(labels)):
            for _ in range(config.leak_spots):
                if far_bg.size == 0:
                    break
                spot = int(rng.choice(far_bg))
                sy, sx = divmod(spot, grid)
                amp = rng.uniform(0.40, config.leak_strength)
                cam[ci, sy, sx] = max(cam[ci, sy, sx], amp)
        cam = np.clip(cam, 0.0, 1.0)
        for ci, cls in enumerate(labels):
            fy, fx = np.nonzero(gt == cls + 1)
            by0, by1 = fy.min() // patch, fy.max() // patch
            bx0, bx1 = fx.min() // patch, fx.max() // patch
            my, mx = np.unravel_index(int(np.argmax(cam[ci])), cam[ci].shape)
            assert by0 <= my <= by1 and bx0 <= mx <= bx1, (
                f"{image_id}: channel {ci} peak leaked outside blob bbox"
            )

        # attention: powers of clamped feature cosine similarity + class token
        fn = feats / np.maximum(np.sqrt((feats**2).sum(axis=1, keepdims=True)), 1e-12)
        sim = np.maximum(fn @ fn.T, 0.0)

        def attn_stack(layers_n, heads_n, base_power, step):
            stack = np.zeros((layers_n, heads_n, n_patches + 1, n_patches + 1))
            for l in range(layers_n):
                for hh in range(heads_n):
                    full = np.ones((n_patches + 1, n_patches + 1))
                    full[1:, 1:] = sim ** (base_power + step * (l * heads_n + hh))
                    stack[l, hh] = full / full.sum(axis=1, keepdims=True)
            return stack

        clip_attn = attn_stack(config.attn_layers, config.attn_heads, 1.0, 0.25)
        dino_attn = attn_stack(config.attn_layers, config.attn_heads, 2.0, 0.5)

        text_rows = np.concatenate(
            [text_base[labels], bg_base], axis=0
        ) + rng.normal(0, 0.001, (len(labels) + config.num_background, config.feature_dim))

        tensor_io.write_image(img, out_dir / "images" / f"{image_id}.png")
        tensor_io.save_tensor(gt, out_dir / "gt" / f"{image_id}.npy")
        feat_dir = out_dir / "feat"
        tensor_io.save_tensor(feats.astype(np.float32), feat_dir / f"{image_id}.clip_feat.npy")
        tensor_io.save_tensor(clip_attn, feat_dir / f"{image_id}.clip_attn.npy")
        tensor_io.save_tensor(dino_attn, feat_dir / f"{image_id}.dino_attn.npy")
        tensor_io.save_tensor(cam.astype(np.float32), feat_dir / f"{image_id}.cam_seed.npy")
        tensor_io.save_tensor(text_rows.astype(np.float32), feat_dir / f"{image_id}.text_feat.npy")

        images.append(img)
        entry_dicts.append(
            {
                "image_id": image_id,
                "image_path": f"images/{image_id}.png",
                "labels": labels,
                "paths": {
                    role: f"feat/{image_id}.{role}.npy" for role in tensor_io.FEATURE_ROLES
                },
                "gt_path": f"gt/{image_id}.npy",
            }
        )

    manifest_dict = {
        "class_names": [f"class_{c}" for c in range(config.num_classes)],
        "num_background": config.num_background,
        "entries": entry_dicts,
    }
    tensor_io.save_manifest(manifest_dict, out_dir / "manifest.json")
    return images, tensor_io.load_manifest(out_dir / "manifest.json")
