"""Synthetic "a <color> <shape>" images and a template-matching classifier."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
SHAPES = ("square", "circle", "triangle", "cross")
SHAPE_SIZE = 10


def _shape_mask(shape: str, size: int = SHAPE_SIZE) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "circle":
        c = size / 2
        return (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2) ** 2
    if shape == "triangle":
        # apex at the top centre, base along the bottom row
        half_width = yy / size * (size / 2)
        return np.abs(xx - size / 2) <= half_width + 0.5
    if shape == "cross":
        arm = size // 3 + (size % 3 > 0)
        lo = (size - arm) // 2
        band = (np.arange(size) >= lo) & (np.arange(size) < lo + arm)
        return band[:, None] | band[None, :]
    raise ValueError(f"unknown shape {shape!r}")


TEMPLATES = {s: _shape_mask(s) for s in SHAPES}


def class_pairs() -> list[tuple[str, str]]:
    return [(c, s) for c in COLORS for s in SHAPES]


def caption_for(color: str, shape: str) -> str:
    return f"a {color} {shape}"


def parse_caption(caption: str) -> tuple[str, str]:
    parts = caption.split()
    if len(parts) != 3 or parts[0] != "a" or parts[1] not in COLORS or parts[2] not in SHAPES:
        raise ValueError(f"not a toy caption: {caption!r}")
    return parts[1], parts[2]


def render(color: str, shape: str, offset: tuple[int, int], image_size: int = 16) -> np.ndarray:
    """Float pixels in [0, 1], shape on a black background at ``offset`` (row, col)."""
    img = np.zeros((image_size, image_size, 3), dtype=np.float64)
    mask = TEMPLATES[shape]
    r, c = offset
    img[r:r + mask.shape[0], c:c + mask.shape[1]][mask] = COLORS[color]
    return img


def offsets(image_size: int = 16, size: int = SHAPE_SIZE, margin: int = 1) -> list[tuple[int, int]]:
    span = range(margin, image_size - size - margin + 1)
    return [(r, c) for r in span for c in span]


@dataclass
class ToyDatasetSpec:
    image_size: int = 16
    num_train: int = 2048
    num_val: int = 320
    seed: int = 0

    @classmethod
    def from_json(cls, path) -> "ToyDatasetSpec":
        return cls(**json.loads(Path(path).read_text()))


@dataclass
class ToyExample:
    caption: str
    color: str
    shape: str
    pixels: np.ndarray = field(repr=False)
    split: str = "train"


def _split_rows(spec: ToyDatasetSpec) -> Iterator[tuple[str, int, str, str, tuple[int, int]]]:
    pairs = class_pairs()
    positions = offsets(spec.image_size)
    for split, count, stream in (("train", spec.num_train, 0), ("val", spec.num_val, 1)):
        if count % len(pairs):
            raise ValueError(f"{split} size {count} is not a multiple of {len(pairs)} classes")
        rng = np.random.default_rng([spec.seed, stream])
        for i in range(count):
            color, shape = pairs[i % len(pairs)]
            pos = positions[int(rng.integers(len(positions)))]
            yield split, i, color, shape, pos


def make_examples(spec: ToyDatasetSpec) -> list[ToyExample]:
    return [ToyExample(caption_for(c, s), c, s, render(c, s, pos, spec.image_size), split)
            for split, _, c, s, pos in _split_rows(spec)]


def gen_toy_dataset(spec: ToyDatasetSpec, out_dir) -> Path:
    """Write PNGs plus ``manifest.jsonl`` and ``spec.json``; returns the directory."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for split, i, color, shape, pos in _split_rows(spec):
        name = f"images/{split}_{i:05d}.png"
        pixels = render(color, shape, pos, spec.image_size)
        Image.fromarray(np.round(pixels * 255).astype(np.uint8), "RGB").save(out / name)
        rows.append({"image_path": name, "caption": caption_for(color, shape), "color": color,
                     "shape": shape, "split": split})
    (out / "manifest.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    (out / "spec.json").write_text(json.dumps(asdict(spec), indent=1, sort_keys=True))
    return out


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def load_toy_dataset(data_dir, split: str | None = None) -> list[ToyExample]:
    root = Path(data_dir)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.jsonl in {root}")
    out = []
    for line in manifest.read_text().splitlines():
        row = json.loads(line)
        if split is not None and row["split"] != split:
            continue
        out.append(ToyExample(row["caption"], row["color"], row["shape"],
                              load_png(root / row["image_path"]), row["split"]))
    return out


def dataset_hash(data_dir) -> str:
    root = Path(data_dir)
    h = hashlib.sha256((root / "manifest.jsonl").read_bytes())
    for path in sorted((root / "images").glob("*.png")):
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


# ----------------------------------------------------------------------------
# Classifier

UNRECOGNIZED = None
FOREGROUND_LEVEL = 0.5
MAX_COLOR_DISTANCE = 0.4
MIN_SHAPE_IOU = 0.6


@dataclass(frozen=True)
class Classification:
    color: str | None
    shape: str | None
    shape_iou: float = 0.0

    @property
    def recognized(self) -> bool:
        return self.color is not None and self.shape is not None

    def matches(self, color: str, shape: str) -> bool:
        return self.color == color and self.shape == shape


def _placed_templates(image_size: int) -> list[tuple[str, np.ndarray]]:
    out = []
    for shape, mask in TEMPLATES.items():
        size = mask.shape[0]
        for r in range(image_size - size + 1):
            for c in range(image_size - size + 1):
                canvas = np.zeros((image_size, image_size), dtype=bool)
                canvas[r:r + size, c:c + size] = mask
                out.append((shape, canvas))
    return out


_PLACED: dict[int, tuple[list[str], np.ndarray]] = {}


def _templates_for(image_size: int) -> tuple[list[str], np.ndarray]:
    if image_size not in _PLACED:
        placed = _placed_templates(image_size)
        _PLACED[image_size] = ([s for s, _ in placed], np.stack([m for _, m in placed]))
    return _PLACED[image_size]


def classify_image(pixels: np.ndarray, forced: bool = False) -> Classification:
    """Foreground = pixels whose brightest channel exceeds 0.5.

    Colour is the nearest prototype to the mean foreground RGB; shape is the
    best IoU against every placement of every template. Either field is None
    when its threshold fails. ``forced`` skips both thresholds, so any image
    with some foreground gets a class.
    """
    pixels = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    fg = pixels.max(-1) > FOREGROUND_LEVEL
    if not fg.any():
        return Classification(None, None)
    mean_rgb = pixels[fg].mean(0)
    names = list(COLORS)
    dists = [np.linalg.norm(mean_rgb - np.array(COLORS[n])) for n in names]
    best = int(np.argmin(dists))
    color = names[best] if forced or dists[best] <= MAX_COLOR_DISTANCE else None
    shapes, masks = _templates_for(pixels.shape[0])
    inter = (masks & fg).sum((1, 2))
    union = (masks | fg).sum((1, 2))
    iou = inter / union
    top = int(np.argmax(iou))
    shape = shapes[top] if forced or iou[top] >= MIN_SHAPE_IOU else None
    return Classification(color, shape, float(iou[top]))
