"""Half-class JPEG corruption and the compressed-vs-clean consistency study."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields

import numpy as np

from .codec import CodecConfig, compress_decompress
from .data import Dataset, Split, with_images
from .model import ProtoPNet


def corrupt_dataset(dataset: Dataset, fraction_of_classes: float = 0.5, quality: int = 20, seed: int = 0,
                    chroma_subsampling: bool = True) -> Dataset:
    """Compress every train and test image of a random subset of classes.

    The returned dataset records the chosen class ids in ``corrupted_classes``.
    """
    if dataset.num_classes < 2:
        raise ValueError("corrupt_dataset needs at least two classes")
    if not 0.0 <= fraction_of_classes <= 1.0:
        raise ValueError(f"fraction_of_classes must lie in [0, 1], got {fraction_of_classes}")
    rng = np.random.default_rng(seed)
    count = int(round(fraction_of_classes * dataset.num_classes))
    chosen = sorted(int(c) for c in rng.choice(dataset.num_classes, size=count, replace=False))
    codec = CodecConfig(quality=quality, chroma_subsampling=chroma_subsampling)

    def apply(split: Split) -> Split:
        hit = np.isin(split.labels, chosen)
        images = split.images.copy()
        for i in np.flatnonzero(hit):
            images[i] = compress_decompress(split.images[i], codec)
        return with_images(split, images, split.corrupted | hit)

    return Dataset(apply(dataset.train), apply(dataset.test), dataset.num_classes, chosen)


@dataclass
class ConsistencyRecord:
    image_id: str
    label: int
    prototype: int
    score_compressed: float
    score_clean: float
    rank_clean: int  # 1-based rank of the prototype among all prototypes on the clean image
    top_clean: int
    predicted_compressed: int
    predicted_clean: int

    @property
    def relative_drop(self) -> float:
        return (self.score_compressed - self.score_clean) / self.score_compressed


def _rank_of(scores: np.ndarray, proto: int) -> int:
    order = np.argsort(-scores, kind="stable")
    return int(np.flatnonzero(order == proto)[0]) + 1


def consistency_experiment(model: ProtoPNet, clean_test: Split, corrupted_classes, codec: CodecConfig = CodecConfig(),
                           compressed_images: np.ndarray | None = None) -> list[ConsistencyRecord]:
    """Track the top prototype of each correctly classified compressed image on its clean original.

    Only test images of corrupted classes enter; of those, only images whose
    compressed version is classified correctly produce a record.
    """
    idx = np.flatnonzero(np.isin(clean_test.labels, list(corrupted_classes)))
    if idx.size == 0:
        return []
    clean = clean_test.images[idx]
    if compressed_images is None:
        compressed = np.stack([compress_decompress(img, codec) for img in clean])
    else:
        compressed = np.asarray(compressed_images)[idx]
    s_comp = model.pooled_scores(compressed)
    s_clean = model.pooled_scores(clean)
    w = model.last_layer.data
    pred_comp = np.argmax(s_comp @ w.T, axis=1)
    pred_clean = np.argmax(s_clean @ w.T, axis=1)
    records = []
    for j, i in enumerate(idx):
        label = int(clean_test.labels[i])
        if pred_comp[j] != label:
            continue
        top = int(np.argmax(s_comp[j]))
        records.append(ConsistencyRecord(
            clean_test.ids[i], label, top, float(s_comp[j, top]), float(s_clean[j, top]),
            _rank_of(s_clean[j], top), int(np.argmax(s_clean[j])), int(pred_comp[j]), int(pred_clean[j]),
        ))
    return records


def summarize(records: list[ConsistencyRecord]) -> dict:
    if not records:
        return {"n": 0, "median_relative_drop": float("nan"), "top1_change_fraction": float("nan"),
                "median_rank_clean": float("nan")}
    drops = np.array([r.relative_drop for r in records])
    changed = np.array([r.rank_clean != 1 for r in records])
    return {"n": len(records), "median_relative_drop": float(np.median(drops)),
            "mean_relative_drop": float(np.mean(drops)), "top1_change_fraction": float(np.mean(changed)),
            "median_rank_clean": float(np.median([r.rank_clean for r in records]))}


def top_similarity_histogram(model: ProtoPNet, compressed: np.ndarray, clean: np.ndarray, n: int = 75) -> dict:
    """Top-n prototypes on each image with their scores on both images."""
    s_comp = model.pooled_scores(compressed)
    s_clean = model.pooled_scores(clean)
    n = min(n, len(s_comp))
    top_comp = np.argsort(-s_comp, kind="stable")[:n]
    top_clean = np.argsort(-s_clean, kind="stable")[:n]
    return {
        "compressed_first": [(int(p), float(s_comp[p]), float(s_clean[p])) for p in top_comp],
        "clean_first": [(int(p), float(s_clean[p]), float(s_comp[p])) for p in top_clean],
    }


def write_records_csv(path, records: list[ConsistencyRecord]) -> None:
    names = [f.name for f in fields(ConsistencyRecord)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names + ["relative_drop"])
        for r in records:
            row = asdict(r)
            writer.writerow([row[k] for k in names] + [repr(r.relative_drop)])


def write_histogram_csv(path, histogram: dict) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["direction", "rank", "prototype", "score_ranked_image", "score_other_image"])
        for direction in ("compressed_first", "clean_first"):
            for rank, (proto, a, b) in enumerate(histogram[direction], start=1):
                writer.writerow([direction, rank, proto, repr(a), repr(b)])
