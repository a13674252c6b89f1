"""Shared domain types and the built-in procedural shapes dataset.

Images are CPU float32 tensors shaped (B, C, H, W) with values in [0, 1].
The toy dataset renders colored shapes on dark backgrounds (class =
color x shape combination) so that the full pipeline runs offline with no
external data; ``load_image_folder`` ingests real datasets laid out as one
subdirectory per class.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .archive import load_archive, save_archive

SHAPES = ("circle", "square", "triangle", "cross", "diamond", "ring")
COLORS = (
    ("red", (0.90, 0.12, 0.12)),
    ("green", (0.12, 0.85, 0.15)),
    ("blue", (0.15, 0.25, 0.92)),
    ("yellow", (0.92, 0.88, 0.10)),
    ("magenta", (0.88, 0.15, 0.85)),
    ("cyan", (0.10, 0.85, 0.88)),
    ("orange", (0.95, 0.55, 0.08)),
)
MAX_TOY_CLASSES = len(SHAPES) * len(COLORS)

# Rendering styles. "canonical" matches the target's training distribution;
# the rest are deliberately off-distribution (used by the toy generator to
# mimic a generic generator's domain spread). "outline" is the hardest shift
# (outline shapes collide with the ring classes) and is not in the default
# generator mix.
STYLES = ("canonical", "faded", "inverted", "cluttered", "tiny", "outline")


def toy_class_names(num_classes: int) -> tuple[str, ...]:
    """Class names ``"<color>-<shape>"`` in a fixed color-major order."""
    if not 2 <= num_classes <= MAX_TOY_CLASSES:
        raise ValueError(f"num_classes must be in [2, {MAX_TOY_CLASSES}], got {num_classes}")
    names = []
    for i in range(num_classes):
        color_name, _ = COLORS[i // len(SHAPES)]
        names.append(f"{color_name}-{SHAPES[i % len(SHAPES)]}")
    return tuple(names)


class OracleMode(enum.Enum):
    PROBABILITY = "probability"
    LABEL_ONLY = "label_only"


class StageTag(enum.Enum):
    STAGE1 = "stage1"
    STAGE2 = "stage2"
    EVAL = "eval"


@dataclass(frozen=True)
class ClassSpace:
    """The label space: class count plus the names used as text prompts."""

    num_classes: int
    names: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if len(self.names) != self.num_classes:
            raise ValueError(f"expected {self.num_classes} names, got {len(self.names)}")
        if any(not n for n in self.names):
            raise ValueError("class names must be non-empty")
        if len(set(self.names)) != self.num_classes:
            raise ValueError("class names must be unique")

    @classmethod
    def toy(cls, num_classes: int = 10) -> "ClassSpace":
        return cls(num_classes, toy_class_names(num_classes))


@dataclass(frozen=True)
class ImageBatch:
    """A batch of images (B, C, H, W) in [0, 1] with optional class labels."""

    pixels: torch.Tensor
    labels: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.pixels.ndim != 4:
            raise ValueError(f"pixels must be (B, C, H, W), got shape {tuple(self.pixels.shape)}")
        if self.pixels.numel() and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(int(v) for v in self.labels))
            if len(self.labels) != self.pixels.shape[0]:
                raise ValueError("labels length must match batch size")
            if any(v < 0 for v in self.labels):
                raise ValueError("labels must be non-negative class indices")

    def __len__(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def image_size(self) -> int:
        return int(self.pixels.shape[-1])

    def subset(self, indices) -> "ImageBatch":
        idx = [int(i) for i in indices]
        labels = tuple(self.labels[i] for i in idx) if self.labels is not None else None
        return ImageBatch(self.pixels[idx].clone(), labels)


def concat_batches(batches: list[ImageBatch]) -> ImageBatch:
    batches = [b for b in batches if len(b)]
    if not batches:
        raise ValueError("no images to concatenate")
    has_labels = all(b.labels is not None for b in batches)
    labels = tuple(v for b in batches for v in b.labels) if has_labels else None
    return ImageBatch(torch.cat([b.pixels for b in batches], dim=0), labels)


def validate_labels(batch: ImageBatch, class_space: ClassSpace) -> None:
    """Range-check batch labels against a class space (upper bound needs N)."""
    if batch.labels is None:
        raise ValueError("batch has no labels")
    bad = [v for v in batch.labels if v >= class_space.num_classes]
    if bad:
        raise ValueError(f"labels out of range [0, {class_space.num_classes}): {sorted(set(bad))}")


@dataclass(frozen=True)
class OracleOutput:
    """One target-model response: a probability vector or a bare label.

    PROBABILITY outputs must carry a non-negative vector summing to 1 within
    1e-6, and ``label`` must equal the argmax (lowest index on ties).
    Violations raise at construction; nothing is clamped or renormalized.
    """

    mode: OracleMode
    probs: tuple[float, ...] | None
    label: int

    def __post_init__(self) -> None:
        if self.mode is OracleMode.PROBABILITY:
            if self.probs is None:
                raise ValueError("PROBABILITY output requires probs")
            object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
            arr = np.asarray(self.probs, dtype=np.float64)
            if arr.size == 0:
                raise ValueError("probs must be non-empty")
            if (arr < 0).any():
                raise ValueError("probs must be non-negative")
            if abs(float(arr.sum()) - 1.0) > 1e-6:
                raise ValueError(f"probs must sum to 1 within 1e-6, got {arr.sum()!r}")
            if self.label != int(arr.argmax()):
                raise ValueError("label must be the argmax of probs (lowest index on ties)")
        else:
            if self.probs is not None:
                raise ValueError("LABEL_ONLY output must not carry probs")
            if self.label < 0:
                raise ValueError("label must be a non-negative class index")

    @classmethod
    def from_probs(cls, probs) -> "OracleOutput":
        arr = np.asarray(probs, dtype=np.float64)
        return cls(OracleMode.PROBABILITY, tuple(float(p) for p in arr), int(arr.argmax()))

    @classmethod
    def label_only(cls, label: int) -> "OracleOutput":
        return cls(OracleMode.LABEL_ONLY, None, int(label))


@dataclass(frozen=True)
class ToyDatasetSpec:
    """Procedural dataset parameters; rendering is a pure function of these."""

    num_classes: int
    image_size: int
    samples_per_class: int
    seed: int

    def __post_init__(self) -> None:
        if self.image_size < 8:
            raise ValueError(f"image_size must be >= 8 px, got {self.image_size}")
        if not 2 <= self.num_classes <= MAX_TOY_CLASSES:
            raise ValueError(f"num_classes must be in [2, {MAX_TOY_CLASSES}]")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")

    def class_space(self) -> ClassSpace:
        return ClassSpace.toy(self.num_classes)


def _shape_mask(shape: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= r * 0.85
    if shape == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) * 0.55)
    if shape == "cross":
        arm = r * 0.34
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= r * 1.2
    if shape == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(f"unknown shape: {shape}")


def _erode(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    for axis, shift in ((0, 1), (0, -1), (1, 1), (1, -1)):
        out &= np.roll(mask, shift, axis=axis)
    return out


def render_toy_image(
    rng: np.random.Generator,
    class_index: int,
    num_classes: int,
    image_size: int,
    style: str = "canonical",
) -> np.ndarray:
    """Render one (3, H, W) float32 image of the given class in a style.

    Only "canonical" matches the distribution produced by
    ``generate_toy_dataset``; the other styles are intentionally
    off-distribution variants of the same class.
    """
    if style not in STYLES:
        raise ValueError(f"unknown style {style!r}; expected one of {STYLES}")
    if not 0 <= class_index < num_classes:
        raise ValueError(f"class_index {class_index} out of range [0, {num_classes})")
    color_name, rgb = COLORS[class_index // len(SHAPES)]
    shape = SHAPES[class_index % len(SHAPES)]
    size = image_size

    cy = size / 2 + rng.uniform(-0.12, 0.12) * size
    cx = size / 2 + rng.uniform(-0.12, 0.12) * size
    r = rng.uniform(0.26, 0.38) * size
    if style == "tiny":
        r = rng.uniform(0.12, 0.18) * size
        cy = rng.uniform(0.3, 0.7) * size
        cx = rng.uniform(0.3, 0.7) * size
    mask = _shape_mask(shape, size, cy, cx, r)
    if style == "outline":
        inner = mask
        for _ in range(max(2, size // 12)):
            inner = _erode(inner)
        mask = mask & ~inner

    img = np.empty((3, size, size), dtype=np.float64)
    if style == "inverted":
        bg = rng.uniform(0.65, 0.85, size=3)
        fg = np.asarray(rgb)
    else:
        bg = rng.uniform(0.05, 0.20, size=3)
        fg = np.clip(np.asarray(rgb) + rng.uniform(-0.06, 0.06, size=3), 0.0, 1.0)
    if style == "faded":
        fg = 0.45 * fg + 0.55 * bg
    for c in range(3):
        img[c] = bg[c]
        img[c][mask] = fg[c]

    noise_std = 0.02
    if style == "cluttered":
        noise_std = 0.12
        for _ in range(2):
            if rng.random() < 0.4:
                row = rng.integers(0, size)
                img[:, row : row + max(1, size // 16), :] = rng.uniform(0, 1, size=3)[:, None, None]
            else:
                col = rng.integers(0, size)
                img[:, :, col : col + max(1, size // 16)] = rng.uniform(0, 1, size=3)[:, None, None]
    img += rng.normal(0.0, noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_toy_dataset(spec: ToyDatasetSpec) -> ImageBatch:
    """Render the class-balanced canonical dataset; deterministic per seed."""
    rng = np.random.default_rng(spec.seed)
    images, labels = [], []
    for cls in range(spec.num_classes):
        for _ in range(spec.samples_per_class):
            images.append(render_toy_image(rng, cls, spec.num_classes, spec.image_size))
            labels.append(cls)
    pixels = torch.from_numpy(np.stack(images))
    return ImageBatch(pixels, tuple(labels))


def load_image_folder(path: str | Path, class_space: ClassSpace, image_size: int | None = None) -> ImageBatch:
    """Load ``<root>/<class_name>/*.png`` into a labeled batch.

    Images are decoded, optionally resized (bilinear) to ``image_size``, and
    scaled to [0, 1]. Unknown class directories and unreadable files are hard
    errors naming the offender; an empty class directory is rejected too.
    """
    from PIL import Image

    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"image folder not found: {root}")
    by_name = {name: idx for idx, name in enumerate(class_space.names)}
    subdirs = sorted(p for p in root.iterdir() if p.is_dir())
    unknown = [p.name for p in subdirs if p.name not in by_name]
    if unknown:
        raise ValueError(f"unknown class directories under {root}: {unknown}")
    images, labels = [], []
    for sub in subdirs:
        files = sorted(p for p in sub.iterdir() if p.is_file())
        if not files:
            raise ValueError(f"class directory {sub.name!r} is empty")
        for fp in files:
            try:
                with Image.open(fp) as im:
                    im = im.convert("RGB")
                    if image_size is not None and im.size != (image_size, image_size):
                        im = im.resize((image_size, image_size), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except Exception as exc:
                raise ValueError(f"unreadable image file {fp}: {exc}") from exc
            images.append(arr.transpose(2, 0, 1))
            labels.append(by_name[sub.name])
    shapes = {img.shape for img in images}
    if len(shapes) > 1:
        raise ValueError(f"inconsistent image sizes {sorted(shapes)}; pass image_size to resize")
    return ImageBatch(torch.from_numpy(np.stack(images)), tuple(labels))


def save_image_batch(path: str | Path, batch: ImageBatch) -> Path:
    """Persist a batch bit-exactly (float32 raw + JSON manifest)."""
    meta = {"labels": list(batch.labels) if batch.labels is not None else None}
    return save_archive(path, {"pixels": batch.pixels.numpy().astype(np.float32, copy=False)}, meta)


def load_image_batch(path: str | Path) -> ImageBatch:
    tensors, meta = load_archive(path)
    labels = meta.get("labels")
    return ImageBatch(torch.from_numpy(tensors["pixels"]), tuple(labels) if labels is not None else None)
