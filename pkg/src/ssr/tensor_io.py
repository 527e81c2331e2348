"""Tensor file I/O and dataset manifests.

Tensors are plain ``numpy.ndarray`` objects. On disk they use the ``.npy``
v1.0 format (magic ``\\x93NUMPY``, version bytes ``(1, 0)``, ASCII header
dict, little-endian C-order payload). The reader/writer here is deliberately
hand-rolled so that malformed files fail with the exact byte offset of the
problem and payload/header mismatches raise a distinct corruption error;
the files themselves are bit-compatible with ``np.save``/``np.load``.

Only four element types are supported: f32, f64, i32, u8.
"""

from __future__ import annotations

import ast
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"\x93NUMPY"
HEADER_ALIGN = 64  # numpy >= 1.22 pads v1.0 headers to 64-byte boundaries

# descr strings we accept, in both byte orders where it matters
_DESCR_TO_DTYPE = {
    "<f4": np.dtype("<f4"),
    "<f8": np.dtype("<f8"),
    "<i4": np.dtype("<i4"),
    "|u1": np.dtype("u1"),
}
_SUPPORTED_KINDS = {("f", 4), ("f", 8), ("i", 4), ("u", 1)}

FEATURE_ROLES = ("clip_feat", "clip_attn", "dino_attn", "cam_seed", "text_feat")


class TensorFormatError(Exception):
    """Malformed tensor file header. Carries the byte offset of the defect."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class TensorCorruptionError(Exception):
    """Header and payload disagree (size mismatch)."""


class ManifestError(Exception):
    """Dataset manifest failed validation; nothing was loaded."""


def _descr_for(dtype):
    key = (dtype.kind, dtype.itemsize)
    if key not in _SUPPORTED_KINDS:
        raise ValueError(f"unsupported dtype {dtype}; expected one of f32, f64, i32, u8")
    if dtype.itemsize == 1:
        return "|u1"
    return f"<{dtype.kind}{dtype.itemsize}"


def save_tensor(arr, path):
    """Write *arr* to *path* in .npy v1.0 (little-endian, C-order).

    The header layout matches numpy's own writer byte for byte, so
    save/load round trips are bit-identical in both directions.
    """
    arr = np.asarray(arr)
    descr = _descr_for(arr.dtype)
    if arr.ndim > 0:  # ascontiguousarray would promote 0-d to shape (1,)
        arr = np.ascontiguousarray(arr)
    arr = arr.astype(_DESCR_TO_DTYPE[descr], copy=False)

    header = "{'descr': %r, 'fortran_order': False, 'shape': %r, }" % (
        descr,
        tuple(int(s) for s in arr.shape),
    )
    # pad with spaces + trailing newline so the payload starts 64-byte aligned
    unpadded = len(MAGIC) + 2 + 2 + len(header) + 1
    pad = (-unpadded) % HEADER_ALIGN
    header = header + " " * pad + "\n"

    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes((1, 0)))
        fh.write(struct.pack("<H", len(header)))
        fh.write(header.encode("latin1"))
        fh.write(arr.tobytes(order="C"))


def load_tensor(path):
    """Read a .npy v1.0 file, returning a read-only array.

    Raises TensorFormatError (with byte offset) for malformed headers and
    TensorCorruptionError when the payload size disagrees with the header.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        data = fh.read()

    if len(data) < 6 or data[:6] != MAGIC:
        raise TensorFormatError(f"{path}: not a .npy file (bad magic)", offset=0)
    if len(data) < 8:
        raise TensorFormatError(f"{path}: truncated before version bytes", offset=6)
    version = (data[6], data[7])
    if version != (1, 0):
        raise TensorFormatError(f"{path}: unsupported .npy version {version}", offset=6)
    if len(data) < 10:
        raise TensorFormatError(f"{path}: truncated before header length", offset=8)
    (hlen,) = struct.unpack("<H", data[8:10])
    header_end = 10 + hlen
    if len(data) < header_end:
        raise TensorFormatError(f"{path}: truncated header (want {hlen} bytes)", offset=10)

    try:
        header = ast.literal_eval(data[10:header_end].decode("latin1"))
    except (ValueError, SyntaxError) as exc:
        raise TensorFormatError(f"{path}: unparseable header dict: {exc}", offset=10) from None
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise TensorFormatError(f"{path}: header keys {sorted(header) if isinstance(header, dict) else header!r}", offset=10)
    if header["fortran_order"] is not False:
        raise TensorFormatError(f"{path}: fortran_order must be False", offset=10)
    descr = header["descr"]
    if descr not in _DESCR_TO_DTYPE:
        raise TensorFormatError(f"{path}: unsupported descr {descr!r}", offset=10)
    shape = header["shape"]
    if not isinstance(shape, tuple) or not all(isinstance(s, int) and s >= 0 for s in shape):
        raise TensorFormatError(f"{path}: bad shape {shape!r}", offset=10)

    dtype = _DESCR_TO_DTYPE[descr]
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    payload = data[header_end:]
    expected = count * dtype.itemsize
    if len(payload) != expected:
        raise TensorCorruptionError(
            f"{path}: payload is {len(payload)} bytes but header implies {expected} "
            f"(shape {shape}, descr {descr})"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    arr.flags.writeable = False
    return arr


def read_image(path):
    """Decode an 8-bit PNG/PPM into a u8 [H, W, 3] array."""
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_image(arr, path):
    from PIL import Image

    arr = np.asarray(arr, dtype=np.uint8)
    Image.fromarray(arr).save(path)


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    image_path: Path
    feature_paths: dict[str, Path]
    labels: tuple[int, ...]


@dataclass(frozen=True)
class DatasetManifest:
    entries: list[ManifestEntry]
    class_names: list[str]
    num_background: int
    root: Path = field(default_factory=Path)

    @property
    def num_foreground(self):
        return len(self.class_names)


def load_manifest(path):
    """Load and validate manifest.json.

    Validation is atomic: every entry is checked (label ranges, role set,
    file existence) before anything is returned, and the first failure
    aborts the whole load.
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON: {exc}") from None

    for key in ("class_names", "num_background", "entries"):
        if key not in raw:
            raise ManifestError(f"{path}: missing top-level key {key!r}")
    class_names = list(raw["class_names"])
    num_fg = len(class_names)
    num_bg = int(raw["num_background"])
    if num_bg < 0:
        raise ManifestError(f"{path}: num_background must be >= 0")

    root = path.parent
    entries = []
    for i, e in enumerate(raw["entries"]):
        where = f"{path}: entries[{i}]"
        for key in ("image_id", "image_path", "labels", "paths"):
            if key not in e:
                raise ManifestError(f"{where}: missing key {key!r}")
        labels = [int(v) for v in e["labels"]]
        if len(set(labels)) != len(labels):
            raise ManifestError(f"{where}: duplicate labels {labels}")
        for v in labels:
            if not 0 <= v < num_fg:
                raise ManifestError(f"{where}: label {v} outside [0, {num_fg})")
        roles = e["paths"]
        missing_roles = set(FEATURE_ROLES) - set(roles)
        if missing_roles:
            raise ManifestError(f"{where}: missing feature roles {sorted(missing_roles)}")
        image_path = root / e["image_path"]
        if not image_path.exists():
            raise ManifestError(f"{where}: image file does not exist: {image_path}")
        feature_paths = {}
        for role in FEATURE_ROLES:
            p = root / roles[role]
            if not p.exists():
                raise ManifestError(f"{where}: {role} file does not exist: {p}")
            feature_paths[role] = p
        entries.append(
            ManifestEntry(
                image_id=str(e["image_id"]),
                image_path=image_path,
                feature_paths=feature_paths,
                labels=tuple(labels),
            )
        )
    return DatasetManifest(entries=entries, class_names=class_names, num_background=num_bg, root=root)


def save_manifest(manifest_dict, path):
    """Write a manifest dict as canonical JSON (sorted keys, 2-space indent)."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest_dict, fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass(frozen=True)
class FeatureBundle:
    """One image's worth of backbone exports, shape-checked and normalized.

    cam_seed is min-max normalized per class channel at load time; a
    constant channel (max == min) normalizes to all zeros.
    """

    image_id: str
    image_path: Path
    clip_feat: np.ndarray   # [N, d1]
    clip_attn: np.ndarray   # [L_c, H_c, N+1, N+1]
    dino_attn: np.ndarray   # [L_d, H_d, N+1, N+1]
    cam_seed: np.ndarray    # [C_f, h, w], values in [0, 1]
    text_feat: np.ndarray   # [C_f + M, d1]
    labels: tuple[int, ...]
    patch_grid: tuple[int, int]


def _minmax_per_channel(cam):
    cam = cam.astype(np.float64)
    flat = cam.reshape(cam.shape[0], -1)
    mn = flat.min(axis=1)[:, None, None]
    mx = flat.max(axis=1)[:, None, None]
    span = mx - mn
    out = np.zeros_like(cam)
    ok = (span > 0).ravel()
    out[ok] = (cam[ok] - mn[ok]) / span[ok]
    return out


def load_bundle(manifest, entry):
    """Load one manifest entry into a FeatureBundle, validating shapes."""
    eid = entry.image_id
    clip_feat = np.asarray(load_tensor(entry.feature_paths["clip_feat"]), dtype=np.float64)
    clip_attn = np.asarray(load_tensor(entry.feature_paths["clip_attn"]), dtype=np.float64)
    dino_attn = np.asarray(load_tensor(entry.feature_paths["dino_attn"]), dtype=np.float64)
    cam_seed = np.asarray(load_tensor(entry.feature_paths["cam_seed"]), dtype=np.float64)
    text_feat = np.asarray(load_tensor(entry.feature_paths["text_feat"]), dtype=np.float64)

    if clip_feat.ndim != 2:
        raise ValueError(f"{eid}: clip_feat must be [N, d1], got shape {clip_feat.shape}")
    n, d1 = clip_feat.shape
    for name, attn in (("clip_attn", clip_attn), ("dino_attn", dino_attn)):
        if attn.ndim != 4 or attn.shape[2] != attn.shape[3] or attn.shape[2] != n + 1:
            raise ValueError(
                f"{eid}: {name} must be [L, H, {n + 1}, {n + 1}], got shape {attn.shape}"
            )
        if attn.min() < 0:
            raise ValueError(f"{eid}: {name} has negative entries")
    if cam_seed.ndim != 3 or cam_seed.shape[0] != len(entry.labels):
        raise ValueError(
            f"{eid}: cam_seed must be [{len(entry.labels)}, h, w], got shape {cam_seed.shape}"
        )
    h, w = cam_seed.shape[1], cam_seed.shape[2]
    if h * w != n:
        raise ValueError(f"{eid}: cam_seed grid {h}x{w} does not match {n} patch tokens")
    expected_rows = len(entry.labels) + manifest.num_background
    if text_feat.shape != (expected_rows, d1):
        raise ValueError(
            f"{eid}: text_feat must be [{expected_rows}, {d1}], got shape {text_feat.shape}"
        )

    return FeatureBundle(
        image_id=eid,
        image_path=entry.image_path,
        clip_feat=clip_feat,
        clip_attn=clip_attn,
        dino_attn=dino_attn,
        cam_seed=_minmax_per_channel(cam_seed),
        text_feat=text_feat,
        labels=entry.labels,
        patch_grid=(h, w),
    )
