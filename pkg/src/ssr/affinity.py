"""Attention fusion, target masking, and CAM propagation.

Two backbones contribute multi-head self-attention stacks; each is averaged
over heads and a layer window, symmetrized, and clamped, then the two are
combined as a convex mix of row-normalized matrices. Target-region masks
zero the non-target columns before the CAM is propagated through the matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AffinityMatrix:
    matrix: np.ndarray  # [N, N], patch tokens only
    row_normalized: bool


@dataclass(frozen=True)
class MaskMatrix:
    """Column selector over patch tokens (rank-1: every row is column_keep)."""

    column_keep: np.ndarray  # bool [N]
    fallback_applied: bool = False

    def materialize(self):
        n = self.column_keep.shape[0]
        return np.tile(self.column_keep.astype(np.float64), (n, 1))


def average_heads(attn, layer_range):
    """Mean attention over the given layers and all heads, class token
    dropped, symmetrized as (B + B^T)/2, negatives clamped to 0."""
    attn = np.asarray(attn, dtype=np.float64)
    if attn.ndim != 4 or attn.shape[2] != attn.shape[3]:
        raise ValueError(f"expected attention [L, H, N+1, N+1], got shape {attn.shape}")
    layers = list(layer_range)
    if not layers:
        raise ValueError("layer_range is empty")
    nl = attn.shape[0]
    if any(not 0 <= l < nl for l in layers):
        raise ValueError(f"layer_range {layers} outside [0, {nl})")
    mean = attn[layers].mean(axis=(0, 1))
    b = mean[1:, 1:]
    b = (b + b.T) / 2.0
    return np.maximum(b, 0.0)


def _row_normalize(m):
    m = np.asarray(m, dtype=np.float64)
    sums = m.sum(axis=1, keepdims=True)
    zero = sums[:, 0] == 0
    if zero.any():
        log.warning("row_normalize: %d all-zero rows set to uniform", int(zero.sum()))
        m = m.copy()
        m[zero] = 1.0 / m.shape[1]
        sums = m.sum(axis=1, keepdims=True)
    return m / sums


def fuse_affinity(clip_avg, dino_avg, w_clip=0.4, w_dino=0.6):
    """A = row_normalize(w_clip * row_normalize(clip) + w_dino * row_normalize(dino)).

    Degenerate weights short-circuit so that (1, 0) reproduces the
    row-normalized clip matrix bitwise (re-normalizing an already normalized
    matrix would perturb the last bits).
    """
    if w_clip < 0 or w_dino < 0 or abs(w_clip + w_dino - 1.0) > 1e-9:
        raise ValueError(f"weights must be >= 0 and sum to 1, got {w_clip}, {w_dino}")
    clip_avg = np.asarray(clip_avg, dtype=np.float64)
    dino_avg = np.asarray(dino_avg, dtype=np.float64)
    if clip_avg.shape != dino_avg.shape or clip_avg.ndim != 2:
        raise ValueError(f"shape mismatch: {clip_avg.shape} vs {dino_avg.shape}")
    if clip_avg.min() < 0 or dino_avg.min() < 0:
        raise ValueError("attention averages must be non-negative")
    if w_dino == 0.0:
        return AffinityMatrix(matrix=_row_normalize(clip_avg), row_normalized=True)
    if w_clip == 0.0:
        return AffinityMatrix(matrix=_row_normalize(dino_avg), row_normalized=True)
    fused = w_clip * _row_normalize(clip_avg) + w_dino * _row_normalize(dino_avg)
    return AffinityMatrix(matrix=_row_normalize(fused), row_normalized=True)


def build_mask(column_keep):
    """Wrap a target-column selector; an all-false selector falls back to
    all-true (with a warning) so no image ends up with a zero CAM."""
    column_keep = np.asarray(column_keep, dtype=bool)
    if column_keep.ndim != 1:
        raise ValueError(f"column_keep must be 1-D, got shape {column_keep.shape}")
    if not column_keep.any():
        log.warning("build_mask: no target columns; falling back to all-true mask")
        return MaskMatrix(column_keep=np.ones_like(column_keep), fallback_applied=True)
    return MaskMatrix(column_keep=column_keep.copy())


def apply_mask(aff, mask, renormalize=True):
    """A*[i, j] = A[i, j] * keep[j]; optionally rescale surviving rows to
    sum 1, rows losing all mass become one-hot on the diagonal.

    An all-true mask returns the input matrix unchanged (bit-identical).
    """
    a = aff.matrix
    keep = mask.column_keep
    if keep.shape[0] != a.shape[1]:
        raise ValueError(f"mask length {keep.shape[0]} vs matrix {a.shape}")
    if keep.all():
        return AffinityMatrix(matrix=a.copy(), row_normalized=aff.row_normalized)
    masked = a * keep[None, :].astype(np.float64)
    if not renormalize:
        return AffinityMatrix(matrix=masked, row_normalized=False)
    sums = masked.sum(axis=1)
    dead = sums == 0
    if dead.any():
        masked[dead] = 0.0
        masked[np.flatnonzero(dead), np.flatnonzero(dead)] = 1.0
        sums = masked.sum(axis=1)
    return AffinityMatrix(matrix=masked / sums[:, None], row_normalized=True)


def refine_cam(aff_star, cam, t=1, normalize=True):
    """Propagate each class channel t times through the affinity matrix
    (cam_c <- A* @ cam_c), then min-max normalize each channel to [0, 1].

    normalize=False returns the raw propagated values (useful for checking
    the propagation itself). Channels that come out constant are left as-is;
    propagation through a row-(sub)stochastic matrix keeps values in [0, 1].
    """
    if t < 1:
        raise ValueError(f"propagation steps must be >= 1, got {t}")
    cam = np.asarray(cam, dtype=np.float64)
    if cam.ndim != 2 or cam.shape[1] != aff_star.matrix.shape[0]:
        raise ValueError(f"cam must be [C_f, {aff_star.matrix.shape[0]}], got {cam.shape}")
    out = cam
    for _ in range(t):
        out = out @ aff_star.matrix.T
    if not normalize:
        return out
    mn = out.min(axis=1, keepdims=True)
    mx = out.max(axis=1, keepdims=True)
    span = mx - mn
    flat = (span[:, 0] > 0)
    normalized = out.copy()
    normalized[flat] = (out[flat] - mn[flat]) / span[flat]
    return normalized
