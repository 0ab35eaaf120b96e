"""Procedural two-domain segmentation benchmark.

Scenes are a background plus a handful of coloured shapes. The label map is a
function of the layout only; appearance (hue, illumination, background
texture, noise) is a function of the style. The source domain renders every
scene with one fixed style, the target domain draws a fresh style per image.

On-disk layout::

    <root>/manifest.json
    <root>/<split>/images/<id>.png   8-bit RGB
    <root>/<split>/labels/<id>.png   8-bit class indices, 255 = ignore
"""

from __future__ import annotations

import colorsys
import contextlib
import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .config import ConfigError, GeneratorConfig, config_hash, from_dict, to_dict, validate

IGNORE_INDEX = 255
SHAPE_KINDS = ("circle", "square", "triangle", "bar")
CLASS_NAMES = ("background",) + SHAPE_KINDS
NUM_CLASSES = len(CLASS_NAMES)
SPLITS = ("source-train", "target-train", "target-val", "source-val")
MANIFEST_VERSION = 1

# base hue (degrees) of each shape class; spaced 90 degrees apart
_BASE_HUE = {"circle": 0.0, "square": 90.0, "triangle": 180.0, "bar": 270.0}
_SATURATION = 0.75
_VALUE = 0.85
_BACKGROUND = 0.45
_TEXTURE_AMPLITUDE = 0.15


class DatasetIntegrityError(RuntimeError):
    pass


class LabelLeakError(RuntimeError):
    """A training stage tried to read target-train ground truth."""


@dataclass(frozen=True)
class ShapeObject:
    shape_kind: str
    center: tuple[float, float]  # (row, col) in pixels
    size: float  # circumscribed diameter in pixels
    rotation: float


@dataclass(frozen=True)
class SceneLayout:
    layout_seed: int
    objects: tuple[ShapeObject, ...]
    canvas: tuple[int, int]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass(frozen=True)
class StyleParams:
    style_seed: int
    hue_shift: float  # degrees
    illumination_direction: float  # radians
    illumination_strength: float
    texture_frequency: float  # cycles per image, 0 disables the texture
    noise_sigma: float


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (H, W, 3) float32 in [-1, 1]
    labels: np.ndarray | None  # (H, W) uint8, None when withheld
    domain_tag: str
    id: str


def _split_key(split: str) -> str:
    return split.replace("-", "_")


def generate_layout(layout_seed: int, cfg: GeneratorConfig) -> SceneLayout:
    validate(cfg)
    rng = np.random.default_rng([layout_seed, 0x1A70])
    h, w = cfg.height, cfg.width
    base = min(h, w)
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects = []
    for _ in range(n):
        kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
        size = float(rng.uniform(cfg.min_size_frac, cfg.max_size_frac) * base)
        r = size / 2
        center = (float(rng.uniform(r, h - r)), float(rng.uniform(r, w - r)))
        rotation = float(rng.uniform(0, 2 * math.pi))
        objects.append(ShapeObject(kind, center, size, rotation))
    return SceneLayout(int(layout_seed), tuple(objects), (h, w))


def source_style(cfg: GeneratorConfig) -> StyleParams:
    return StyleParams(0, 0.0, 0.0, 0.0, 0.0, cfg.source_noise_sigma)


def sample_style(style_seed: int, cfg: GeneratorConfig) -> StyleParams:
    rng = np.random.default_rng([style_seed, 0x57E1])
    return StyleParams(
        style_seed=int(style_seed),
        hue_shift=float(rng.uniform(*cfg.hue_shift_range)),
        illumination_direction=float(rng.uniform(0, 2 * math.pi)),
        illumination_strength=float(rng.uniform(*cfg.illumination_strength_range)),
        texture_frequency=float(rng.uniform(*cfg.texture_frequency_range)),
        noise_sigma=float(rng.uniform(*cfg.noise_sigma_range)),
    )


def _shape_mask(obj: ShapeObject, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    dy, dx = rows - obj.center[0], cols - obj.center[1]
    c, s = math.cos(obj.rotation), math.sin(obj.rotation)
    u, v = c * dx + s * dy, -s * dx + c * dy
    r = obj.size / 2
    if obj.shape_kind == "circle":
        return u * u + v * v <= r * r
    if obj.shape_kind == "square":
        half = r / math.sqrt(2)
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    if obj.shape_kind == "bar":
        # length L, thickness L/4, circumscribed diameter = size
        half_len = r / math.sqrt(1 + 1 / 16)
        return (np.abs(u) <= half_len) & (np.abs(v) <= half_len / 4)
    if obj.shape_kind == "triangle":
        angles = [math.pi / 2 + k * 2 * math.pi / 3 for k in range(3)]
        # equilateral triangle with circumradius r: inside iff every edge normal
        # projection is below the inradius r/2
        return np.logical_and.reduce([u * math.cos(a) + v * math.sin(a) >= -r / 2 for a in angles])
    raise ValueError(f"unknown shape kind {obj.shape_kind!r}")


def render_labels(layout: SceneLayout) -> np.ndarray:
    h, w = layout.canvas
    rows, cols = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    labels = np.zeros((h, w), np.uint8)
    for obj in layout.objects:
        labels[_shape_mask(obj, rows, cols)] = CLASS_NAMES.index(obj.shape_kind)
    return labels


def _class_colors(hue_shift: float) -> np.ndarray:
    colors = np.full((NUM_CLASSES, 3), _BACKGROUND)
    for k, kind in enumerate(SHAPE_KINDS, start=1):
        hue = ((_BASE_HUE[kind] + hue_shift) % 360.0) / 360.0
        colors[k] = colorsys.hsv_to_rgb(hue, _SATURATION, _VALUE)
    return colors


def render(layout: SceneLayout, domain_tag: str, style: StyleParams, image_id: str | None = None) -> LabeledImage:
    if domain_tag not in ("source", "target"):
        raise ValueError(f"domain_tag must be 'source' or 'target', got {domain_tag!r}")
    h, w = layout.canvas
    labels = render_labels(layout)
    img = _class_colors(style.hue_shift)[labels]

    rows, cols = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    d = style.illumination_direction
    # ramp in [-1, 1] along the light direction
    ramp = 2 * ((cols - 0.5) * math.cos(d) + (rows - 0.5) * math.sin(d))
    if style.texture_frequency > 0:
        stripes = np.sin(2 * math.pi * style.texture_frequency * ((cols - 0.5) * -math.sin(d) + (rows - 0.5) * math.cos(d)))
        bg = labels == 0
        img[bg] += (_TEXTURE_AMPLITUDE * stripes[bg])[:, None]
    img = img * (1 + style.illumination_strength * ramp)[..., None]
    noise_rng = np.random.default_rng([layout.layout_seed, style.style_seed, 0x9015E])
    img = img + style.noise_sigma * noise_rng.standard_normal(img.shape)
    q = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    return LabeledImage(to_pixels(q), labels, domain_tag, image_id or f"{layout.layout_seed:07d}")


def to_pixels(q: np.ndarray) -> np.ndarray:
    return (q.astype(np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((pixels.astype(np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def split_domain(split: str) -> str:
    return split.split("-")[0]


def split_seed_ranges(cfg: GeneratorConfig) -> dict[str, tuple[int, int]]:
    ranges = {}
    for split in SPLITS:
        key = _split_key(split)
        start = getattr(cfg, f"{key}_seed_start")
        ranges[split] = (start, start + getattr(cfg, key))
    items = sorted(ranges.items(), key=lambda kv: kv[1])
    for (a, (a0, a1)), (b, (b0, b1)) in zip(items, items[1:]):
        if a1 > a0 and b1 > b0 and b0 < a1:
            raise ConfigError(f"seed ranges of splits {a} and {b} overlap")
    return ranges


def render_split_item(cfg: GeneratorConfig, split: str, layout_seed: int) -> LabeledImage:
    layout = generate_layout(layout_seed, cfg)
    domain = split_domain(split)
    if domain == "source":
        style = source_style(cfg)
    else:
        style = sample_style(layout_seed + cfg.style_seed_offset, cfg)
    return render(layout, domain, style, f"{layout_seed:07d}")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def generate_dataset(cfg: GeneratorConfig, root) -> dict:
    """Render all splits to ``root`` and write the manifest; returns the manifest."""
    validate(cfg)
    ranges = split_seed_ranges(cfg)
    root = Path(root)
    manifest = {
        "format_version": MANIFEST_VERSION,
        "config": to_dict(cfg),
        "config_hash": config_hash(cfg),
        "class_names": list(CLASS_NAMES),
        "ignore_index": IGNORE_INDEX,
        "splits": {},
    }
    for split in SPLITS:
        lo, hi = ranges[split]
        img_dir, lbl_dir = root / split / "images", root / split / "labels"
        img_dir.mkdir(parents=True, exist_ok=True)
        lbl_dir.mkdir(parents=True, exist_ok=True)
        checksums = {}
        for seed in range(lo, hi):
            item = render_split_item(cfg, split, seed)
            ip, lp = img_dir / f"{item.id}.png", lbl_dir / f"{item.id}.png"
            Image.fromarray(to_uint8(item.pixels), "RGB").save(ip)
            Image.fromarray(item.labels, "L").save(lp)
            checksums[item.id] = {"image": _sha256(ip), "label": _sha256(lp)}
        manifest["splits"][split] = {
            "count": hi - lo,
            "seed_start": lo,
            "domain": split_domain(split),
            "checksums": checksums,
        }
    # manifest is written last so a partial directory is never mistaken for a dataset
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    tmp.replace(root / "manifest.json")
    return manifest


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise DatasetIntegrityError(f"missing manifest: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetIntegrityError(f"unreadable manifest {path}: {e}") from e


def manifest_config(root) -> GeneratorConfig:
    return from_dict(GeneratorConfig, read_manifest(root)["config"])


# -- leak guard --------------------------------------------------------------

LABEL_READS: list[tuple[str, str]] = []
_guard_depth = 0


@contextlib.contextmanager
def training_guard():
    """Within this context any read of target-train ground truth raises LabelLeakError."""
    global _guard_depth
    _guard_depth += 1
    try:
        yield
    finally:
        _guard_depth -= 1


def _read_png(path: Path, expected_sha: str | None, mode: str) -> np.ndarray:
    if not path.exists():
        raise DatasetIntegrityError(f"missing file: {path}")
    if expected_sha is not None and _sha256(path) != expected_sha:
        raise DatasetIntegrityError(f"checksum mismatch: {path}")
    try:
        with Image.open(path) as im:
            if im.mode != mode:
                raise DatasetIntegrityError(f"{path}: expected mode {mode}, got {im.mode}")
            return np.array(im)
    except (OSError, SyntaxError) as e:
        raise DatasetIntegrityError(f"unreadable image {path}: {e}") from e


def _split_entry(manifest: dict, split: str) -> dict:
    if split not in manifest.get("splits", {}):
        raise DatasetIntegrityError(f"split {split!r} not in manifest")
    entry = manifest["splits"][split]
    if len(entry["checksums"]) != entry["count"]:
        raise DatasetIntegrityError(f"split {split!r}: manifest count does not match its file list")
    return entry


def read_labels(root, split: str, ids=None, *, purpose: str = "metrics") -> dict[str, np.ndarray]:
    """Read ground-truth label maps. Target-train reads are logged and refused inside training_guard()."""
    if split == "target-train":
        if _guard_depth > 0:
            raise LabelLeakError(f"target-train ground truth requested during training (purpose={purpose})")
        LABEL_READS.append((split, purpose))
    root = Path(root)
    manifest = read_manifest(root)
    entry = _split_entry(manifest, split)
    ids = sorted(entry["checksums"]) if ids is None else list(ids)
    out = {}
    for i in ids:
        if i not in entry["checksums"]:
            raise DatasetIntegrityError(f"id {i!r} not in split {split!r}")
        path = root / split / "labels" / f"{i}.png"
        lbl = _read_png(path, entry["checksums"][i]["label"], "L")
        bad = (lbl >= NUM_CLASSES) & (lbl != IGNORE_INDEX)
        if bad.any():
            raise DatasetIntegrityError(f"{path}: label values out of range")
        out[i] = lbl
    return out


def load_dataset(root, split: str, *, verify: bool = True) -> list[LabeledImage]:
    """Load one split ordered by id. Target-train is returned without labels."""
    root = Path(root)
    manifest = read_manifest(root)
    entry = _split_entry(manifest, split)
    ids = sorted(entry["checksums"])
    labels = {} if split == "target-train" else None
    if labels is None:
        labels = read_labels(root, split, ids, purpose="loader")
    items = []
    for i in ids:
        path = root / split / "images" / f"{i}.png"
        q = _read_png(path, entry["checksums"][i]["image"] if verify else None, "RGB")
        lbl = labels.get(i)
        if lbl is not None and lbl.shape != q.shape[:2]:
            raise DatasetIntegrityError(f"{path}: label/image shape mismatch")
        items.append(LabeledImage(to_pixels(q), lbl, entry["domain"], i))
    return items


def stack(items: list[LabeledImage]) -> tuple[np.ndarray, np.ndarray | None]:
    """(N, 3, H, W) float32 pixels and (N, H, W) int64 labels (None if withheld)."""
    x = np.stack([it.pixels for it in items]).transpose(0, 3, 1, 2).copy()
    if any(it.labels is None for it in items):
        return x, None
    return x, np.stack([it.labels for it in items]).astype(np.int64)


def read_directory_dataset(root, domain_tag: str = "target") -> list[LabeledImage]:
    """Read a Cityscapes-style ``images/`` + ``labels/`` directory (labels optional)."""
    root = Path(root)
    img_dir, lbl_dir = root / "images", root / "labels"
    if not img_dir.is_dir():
        raise DatasetIntegrityError(f"missing directory: {img_dir}")
    items = []
    for ip in sorted(img_dir.glob("*.png")):
        q = _read_png(ip, None, "RGB")
        lp = lbl_dir / ip.name
        lbl = _read_png(lp, None, "L") if lp.exists() else None
        if lbl is not None and lbl.shape != q.shape[:2]:
            raise DatasetIntegrityError(f"{lp}: label/image shape mismatch")
        items.append(LabeledImage(to_pixels(q), lbl, domain_tag, ip.stem))
    return items
