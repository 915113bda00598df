"""Procedural part-based image dataset and on-the-fly augmentation."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

SHAPES = ("square", "disk", "triangle", "cross", "ring")
COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.1),
    "magenta": (0.9, 0.15, 0.85),
    "cyan": (0.1, 0.85, 0.9),
}
# where the class-defining part may appear (top-left corner of its region)
ANCHORS = ((6, 6), (6, 34), (34, 6), (34, 34))

MANIFEST_FIELDS = ("filename", "class", "split", "corrupted", "box_y0", "box_y1", "box_x0", "box_x1")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    classes: int = 10
    train_per_class: int = 160
    test_per_class: int = 40
    image_size: int = 64
    part_size: int = 14
    part_jitter: int = 10
    background_noise: float = 0.08
    seed: int = 0


@dataclass(frozen=True)
class AugmentConfig:
    horizontal_flip_prob: float = 0.5
    rotation_degrees: float = 15.0
    jpeg_prob: float = 0.0
    jpeg_quality: int = 20

    def __post_init__(self):
        for name in ("horizontal_flip_prob", "jpeg_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass
class Split:
    images: np.ndarray  # [N, 3, H, W]
    labels: np.ndarray  # [N]
    boxes: np.ndarray  # [N, 4] part box (y0, y1, x0, x1), half-open
    ids: list[str]
    corrupted: np.ndarray = None  # [N] bool

    def __post_init__(self):
        if self.corrupted is None:
            self.corrupted = np.zeros(len(self.labels), dtype=bool)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "Split":
        index = np.asarray(index)
        return Split(self.images[index], self.labels[index], self.boxes[index],
                     [self.ids[i] for i in np.arange(len(self.ids))[index]], self.corrupted[index])


@dataclass
class Dataset:
    train: Split
    test: Split
    num_classes: int
    corrupted_classes: list[int] = field(default_factory=list)

    def split(self, name: str) -> Split:
        if name not in ("train", "test"):
            raise ValueError(f"unknown split {name!r}")
        return self.train if name == "train" else self.test


def motif_palette() -> list[tuple[str, str]]:
    """All (shape, color) combinations, diagonally ordered so neighbours differ in both."""
    names = list(COLORS)
    return [(SHAPES[s], names[(s + d) % len(names)]) for d in range(len(names)) for s in range(len(SHAPES))]


def _glyph_mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c = size / 2.0
    r = np.hypot(yy - c, xx - c)
    if shape == "square":
        return np.pad(np.ones((size - 4, size - 4), bool), 2)
    if shape == "disk":
        return r <= size / 2.0 - 1
    if shape == "ring":
        return (r <= size / 2.0 - 1) & (r >= size / 2.0 - 4)
    if shape == "triangle":
        return (yy >= 1) & (yy <= size - 1) & (np.abs(xx - c) <= (yy - 1) / 2.0)
    if shape == "cross":
        band = size / 6.0
        return (np.abs(yy - c) <= band) | (np.abs(xx - c) <= band)
    raise ValueError(f"unknown shape {shape!r}")


def _render(config: SynthConfig, label: int, rng: np.random.Generator):
    s = config.image_size
    # smooth background: upsampled coarse noise plus fine pixel noise
    coarse = rng.random((3, 4, 4)) * 0.4 + 0.3
    bg = ndimage.zoom(coarse, (1, s / 4, s / 4), order=1, mode="nearest")
    img = bg + rng.normal(0.0, config.background_noise, (3, s, s))

    # class-uninformative body blob
    yy, xx = np.mgrid[0:s, 0:s]
    cy, cx = rng.uniform(s * 0.3, s * 0.7, 2)
    ry, rx = rng.uniform(s * 0.15, s * 0.3, 2)
    body = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    tone = rng.uniform(0.25, 0.6, 3)
    img[:, body] = tone[:, None] + rng.normal(0.0, config.background_noise, (3, int(body.sum())))

    shape, color = motif_palette()[label]
    mask = _glyph_mask(shape, config.part_size)
    ay, ax = ANCHORS[label % len(ANCHORS)]
    y0 = int(ay + rng.integers(0, config.part_jitter + 1))
    x0 = int(ax + rng.integers(0, config.part_jitter + 1))
    y0 = min(y0, s - config.part_size)
    x0 = min(x0, s - config.part_size)
    rgb = np.asarray(COLORS[color])[:, None] * rng.uniform(0.85, 1.0)
    region = img[:, y0 : y0 + config.part_size, x0 : x0 + config.part_size]
    region[:, mask] = rgb + rng.normal(0.0, 0.03, (3, int(mask.sum())))
    box = (y0, y0 + config.part_size, x0, x0 + config.part_size)
    return np.clip(img, 0.0, 1.0), box


def generate(config: SynthConfig) -> Dataset:
    """Deterministic train/test dataset; one independent child RNG per image."""
    palette = motif_palette()
    if config.classes > len(palette):
        raise DatasetError(f"{config.classes} classes requested but only {len(palette)} motifs available")
    if min(config.classes, config.train_per_class, config.test_per_class, config.image_size) < 1:
        raise DatasetError("dataset sizes must be positive")
    root = np.random.SeedSequence(config.seed)
    splits = {}
    for split_name, per_class, child in zip(("train", "test"), (config.train_per_class, config.test_per_class),
                                            root.spawn(2)):
        seeds = child.spawn(config.classes * per_class)
        images, labels, boxes, ids = [], [], [], []
        for k, seq in enumerate(seeds):
            label = k // per_class
            img, box = _render(config, label, np.random.default_rng(seq))
            images.append(img)
            labels.append(label)
            boxes.append(box)
            ids.append(f"{split_name}_{label:03d}_{k % per_class:04d}")
        splits[split_name] = Split(np.stack(images), np.array(labels, dtype=np.int64),
                                   np.array(boxes, dtype=np.int64), ids)
    return Dataset(splits["train"], splits["test"], config.classes)


def content_hash(image: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(image, dtype=np.float64).tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# augmentation


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image centre; bilinear, edges replicated, same canvas."""
    if degrees == 0.0:
        return image.copy()
    theta = np.deg2rad(degrees)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    centre = (np.array(image.shape[1:]) - 1) / 2.0
    offset = centre - rot @ centre
    out = np.stack([
        ndimage.affine_transform(ch, rot, offset=offset, order=1, mode="nearest") for ch in image
    ])
    return np.clip(out, 0.0, 1.0)


def augment(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    # draw every random number unconditionally so the stream does not depend on outcomes
    flip = rng.random() < config.horizontal_flip_prob
    angle = rng.uniform(-config.rotation_degrees, config.rotation_degrees)
    jpeg = rng.random() < config.jpeg_prob
    out = image[:, :, ::-1] if flip else image
    out = rotate(out, angle) if config.rotation_degrees else out.copy()
    if jpeg:
        from .codec import CodecConfig, compress_decompress

        out = compress_decompress(out, CodecConfig(quality=config.jpeg_quality))
    return out


# ---------------------------------------------------------------------------
# disk format


def write_ppm(path, image: np.ndarray) -> None:
    """Binary PPM (P6, maxval 255) from a [3, H, W] array in [0, 1]."""
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    _, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise DatasetError(f"{path}: only P6 PPM with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(raw[pos : pos + 3 * w * h], dtype=np.uint8)
    if pixels.size != 3 * w * h:
        raise DatasetError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def save_dataset(dataset: Dataset, path) -> Path:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for split_name in ("train", "test"):
            split = dataset.split(split_name)
            for i in range(len(split)):
                name = f"images/{split.ids[i]}.ppm"
                write_ppm(root / name, split.images[i])
                writer.writerow([name, int(split.labels[i]), split_name, int(split.corrupted[i]),
                                 *map(int, split.boxes[i])])
    (root / "corrupted_classes.txt").write_text("".join(f"{c}\n" for c in dataset.corrupted_classes))
    return root


def load_dataset(path) -> Dataset:
    root = Path(path)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise DatasetError(f"missing manifest: {manifest}")
    rows = {"train": [], "test": []}
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise DatasetError(f"{manifest}: unexpected header {reader.fieldnames}")
        for line, row in enumerate(reader, start=2):
            if row["split"] not in rows:
                raise DatasetError(f"{manifest}:{line}: unknown split {row['split']!r}")
            file = root / row["filename"]
            if not file.exists():
                raise DatasetError(f"missing image file: {row['filename']}")
            rows[row["split"]].append((row, read_ppm(file)))
    splits = {}
    for name, items in rows.items():
        if not items:
            shape = (0, 3, 1, 1)
            splits[name] = Split(np.zeros(shape), np.zeros(0, np.int64), np.zeros((0, 4), np.int64), [])
            continue
        splits[name] = Split(
            np.stack([img for _, img in items]),
            np.array([int(r["class"]) for r, _ in items], dtype=np.int64),
            np.array([[int(r[k]) for k in MANIFEST_FIELDS[4:]] for r, _ in items], dtype=np.int64),
            [Path(r["filename"]).stem for r, _ in items],
            np.array([bool(int(r["corrupted"])) for r, _ in items]),
        )
    labels = np.concatenate([splits["train"].labels, splits["test"].labels])
    num_classes = int(labels.max()) + 1 if labels.size else 0
    corrupted_file = root / "corrupted_classes.txt"
    corrupted = [int(t) for t in corrupted_file.read_text().split()] if corrupted_file.exists() else []
    return Dataset(splits["train"], splits["test"], num_classes, corrupted)


def with_images(split: Split, images: np.ndarray, corrupted: np.ndarray | None = None) -> Split:
    return replace(split, images=images, corrupted=split.corrupted if corrupted is None else corrupted)
