"""ProtoPNet head on a small fixed CNN backbone.

Layout conventions: images are ``[3, H, W]`` (or batched ``[N, 3, H, W]``)
with values in ``[0, 1]``; latent volumes are ``[D, H, W]`` / ``[N, D, H, W]``;
similarity maps are ``[m, H, W]`` / ``[N, m, H, W]``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor

# (kind, kernel, stride, padding) for every spatial layer of the backbone, in order
BACKBONE_LAYERS: tuple[tuple[str, int, int, int], ...] = (
    ("conv", 3, 1, 1),
    ("pool", 2, 2, 0),
    ("conv", 3, 1, 1),
    ("pool", 2, 2, 0),
    ("conv", 3, 1, 1),
    ("pool", 2, 2, 0),
    ("conv", 1, 1, 0),
    ("conv", 1, 1, 0),
)

BASE_PARAMS = ("conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "conv3.weight", "conv3.bias")
ADDON_PARAMS = ("addon1.weight", "addon1.bias", "addon2.weight", "addon2.bias")

CHECKPOINT_MAGIC = b"PROTOLAB"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_height: int = 64
    image_width: int = 64
    num_classes: int = 10
    prototypes_per_class: int = 10
    latent_dim: int = 32
    channels: tuple[int, int, int] = (16, 32, 32)
    epsilon_stab: float = 1e-4
    distance_mode: str = "squared"

    def __post_init__(self):
        if not 0.0 < self.epsilon_stab < 1.0:
            raise ValueError(f"epsilon_stab must lie in (0, 1), got {self.epsilon_stab}")
        if self.distance_mode not in ("squared", "euclidean"):
            raise ValueError(f"distance_mode must be 'squared' or 'euclidean', got {self.distance_mode!r}")
        if self.num_classes < 1 or self.prototypes_per_class < 1:
            raise ValueError("num_classes and prototypes_per_class must be positive")
        h, w = self.latent_hw
        if h < 1 or w < 1:
            raise ValueError(f"image {self.image_height}x{self.image_width} too small for the backbone")

    @property
    def num_prototypes(self) -> int:
        return self.num_classes * self.prototypes_per_class

    @property
    def latent_hw(self) -> tuple[int, int]:
        h, w = self.image_height, self.image_width
        for _, k, s, p in BACKBONE_LAYERS:
            h = (h + 2 * p - k) // s + 1
            w = (w + 2 * p - k) // s + 1
        return h, w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


@dataclass
class Provenance:
    image_id: str
    row: int
    col: int


@dataclass
class PrototypeBank:
    """Prototype vectors (shared with the parameter store) and their classes."""

    vectors: Tensor
    class_of: np.ndarray
    provenance: list[Provenance | None] = field(default_factory=list)

    def __post_init__(self):
        if not self.provenance:
            self.provenance = [None] * len(self.class_of)

    @property
    def num_prototypes(self) -> int:
        return len(self.class_of)

    def identity(self, num_classes: int) -> np.ndarray:
        """One-hot class membership, shape [m, C]."""
        onehot = np.zeros((self.num_prototypes, num_classes))
        onehot[np.arange(self.num_prototypes), self.class_of] = 1.0
        return onehot


def similarity(distance, epsilon_stab: float):
    """``log((d + 1) / (d + epsilon_stab))`` for non-negative distance terms."""
    d = np.asarray(distance, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("similarity: distance term must be non-negative")
    if not 0.0 < epsilon_stab < 1.0:
        raise ValueError(f"similarity: epsilon_stab must lie in (0, 1), got {epsilon_stab}")
    out = np.log1p((1.0 - epsilon_stab) / (d + epsilon_stab))  # same ratio, no cancellation for large d
    return float(out) if out.ndim == 0 else out


def distance_term(latent: Tensor, prototypes: Tensor, mode: str) -> Tensor:
    sq = ad.squared_distances(latent, prototypes)
    return sq if mode == "squared" else ad.sqrt(sq)


def similarity_map(latent: Tensor, bank: PrototypeBank, config: ModelConfig) -> Tensor:
    """Similarity of every prototype to every latent pixel."""
    d = distance_term(latent, bank.vectors, config.distance_mode)
    return ad.log_similarity(d, config.epsilon_stab)


@dataclass
class PooledScores:
    scores: Tensor
    locations: np.ndarray  # [..., m, 2] (row, col) of the first maximiser


def pool_scores(sim_map: Tensor) -> PooledScores:
    """Spatial max per prototype; ties resolve to the first cell in row-major order."""
    scores = ad.amax(sim_map, axis=(-2, -1))
    w = sim_map.shape[-1]
    flat = sim_map.data.reshape(sim_map.shape[:-2] + (-1,))
    idx = flat.argmax(axis=-1)
    return PooledScores(scores, np.stack([idx // w, idx % w], axis=-1))


def classify(scores: Tensor, last_layer: Tensor) -> tuple[Tensor, np.ndarray]:
    logits = ad.dense(scores, last_layer)
    return logits, np.argmax(logits.data, axis=-1)


class ProtoPNet:
    """Backbone parameters, prototype bank and last layer of one model."""

    def __init__(self, config: ModelConfig, params: ParameterStore, class_of: np.ndarray | None = None):
        self.config = config
        self.params = params
        if class_of is None:
            class_of = np.repeat(np.arange(config.num_classes), config.prototypes_per_class)
        self.bank = PrototypeBank(params["prototypes"], np.asarray(class_of, dtype=np.int64))

    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator) -> "ProtoPNet":
        params = ParameterStore()
        c_in = 3
        for i, c_out in enumerate(config.channels, start=1):
            params.add(f"conv{i}.weight", rng.normal(0.0, np.sqrt(2.0 / (c_in * 9)), (c_out, c_in, 3, 3)))
            params.add(f"conv{i}.bias", np.zeros(c_out))
            c_in = c_out
        d = config.latent_dim
        params.add("addon1.weight", rng.normal(0.0, np.sqrt(2.0 / c_in), (d, c_in, 1, 1)))
        params.add("addon1.bias", np.zeros(d))
        params.add("addon2.weight", rng.normal(0.0, np.sqrt(1.0 / d), (d, d, 1, 1)))
        params.add("addon2.bias", np.zeros(d))
        params.add("prototypes", rng.random((config.num_prototypes, d)))
        model = cls(config, params)
        own = model.bank.identity(config.num_classes).T
        params.add("last_layer", np.where(own > 0, 1.0, -0.5))
        model.bank.vectors = params["prototypes"]
        return model

    # -- pieces -----------------------------------------------------------

    @property
    def last_layer(self) -> Tensor:
        return self.params["last_layer"]

    def embed(self, images) -> Tensor:
        images = ad.as_tensor(images)
        expected = (3, self.config.image_height, self.config.image_width)
        if images.shape[-3:] != expected or images.ndim not in (3, 4):
            raise ad.ShapeError(f"embed: expected image shape {expected} (optionally batched), got {images.shape}")
        p = self.params
        h = images
        for i in (1, 2, 3):
            h = ad.conv2d(h, p[f"conv{i}.weight"], 1, 1)
            h = ad.relu(h + _channel_bias(p[f"conv{i}.bias"], h.ndim))
            h = ad.maxpool2d(h, 2, 2)
        h = ad.relu(ad.conv2d(h, p["addon1.weight"]) + _channel_bias(p["addon1.bias"], h.ndim))
        return ad.sigmoid(ad.conv2d(h, p["addon2.weight"]) + _channel_bias(p["addon2.bias"], h.ndim))

    def similarity_map(self, latent: Tensor) -> Tensor:
        return similarity_map(latent, self.bank, self.config)

    def distances(self, latent: Tensor) -> Tensor:
        return distance_term(latent, self.bank.vectors, self.config.distance_mode)

    # -- whole model ------------------------------------------------------

    def forward(self, images) -> dict:
        """Single pass: min-pool distances first, then map through the similarity.

        Equivalent to max-pooling the similarity map because the similarity
        is strictly decreasing in the distance.
        """
        latent = self.embed(images)
        dist = self.distances(latent)
        min_dist = ad.amin(dist, axis=(-2, -1))
        scores = ad.log_similarity(min_dist, self.config.epsilon_stab)
        logits = ad.dense(scores, self.last_layer)
        return {"latent": latent, "distances": dist, "min_distances": min_dist, "scores": scores, "logits": logits}

    def predict(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        return np.argmax(self.logits(images, batch_size), axis=-1)

    def logits(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        return self._batched(images, batch_size, lambda out: out["logits"].data)

    def pooled_scores(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        return self._batched(images, batch_size, lambda out: out["scores"].data)

    def _batched(self, images: np.ndarray, batch_size: int, pick) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            return pick(self.forward(images))
        parts = [pick(self.forward(images[i : i + batch_size])) for i in range(0, len(images), batch_size)]
        return np.concatenate(parts) if parts else np.zeros((0, self.config.num_classes))

    def latents(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        return np.concatenate([self.embed(images[i : i + batch_size]).data for i in range(0, len(images), batch_size)])

    def copy(self) -> "ProtoPNet":
        clone = ProtoPNet(self.config, self.params.copy(), self.bank.class_of.copy())
        clone.bank.provenance = list(self.bank.provenance)
        return clone

    # -- checkpoint -------------------------------------------------------

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ProtoPNet":
        return cls.from_bytes(Path(path).read_bytes())

    def to_bytes(self) -> bytes:
        names = self.params.names()
        header = {
            "config": self.config.to_dict(),
            "tensors": [{"name": n, "shape": list(self.params[n].shape)} for n in names],
            "class_of": self.bank.class_of.tolist(),
            "provenance": [None if p is None else asdict(p) for p in self.bank.provenance],
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        body = b"".join(self.params[n].data.astype("<f8").tobytes() for n in names)
        return CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(blob)) + blob + body

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ProtoPNet":
        if raw[:8] != CHECKPOINT_MAGIC:
            raise CheckpointError("not a protolab checkpoint (bad magic)")
        version, hlen = struct.unpack("<II", raw[8:16])
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
        offset = 16 + hlen
        params = ParameterStore()
        for entry in header["tensors"]:
            count = int(np.prod(entry["shape"], dtype=np.int64))
            chunk = raw[offset : offset + 8 * count]
            if len(chunk) != 8 * count:
                raise CheckpointError(f"truncated checkpoint while reading {entry['name']!r}")
            params.add(entry["name"], np.frombuffer(chunk, dtype="<f8").reshape(entry["shape"]).astype(np.float64))
            offset += 8 * count
        if offset != len(raw):
            raise CheckpointError(f"{len(raw) - offset} trailing bytes in checkpoint")
        model = cls(ModelConfig.from_dict(header["config"]), params, np.array(header["class_of"]))
        model.bank.provenance = [None if p is None else Provenance(**p) for p in header["provenance"]]
        return model


def _channel_bias(bias: Tensor, ndim: int) -> Tensor:
    shape = (-1, 1, 1) if ndim == 3 else (1, -1, 1, 1)
    return ad.reshape(bias, shape)


def push_prototypes(
    model: ProtoPNet,
    images: np.ndarray,
    labels: np.ndarray,
    image_ids: Sequence[str] | None = None,
    batch_size: int = 64,
) -> PrototypeBank:
    """Project every prototype onto its nearest same-class training latent patch.

    Ties go to the first (image, row, col) in iteration order. Updates the
    bank in place and returns it.

    Raises:
        ValueError: if some class owning prototypes has no training image.
    """
    labels = np.asarray(labels)
    bank = model.bank
    missing = sorted(set(bank.class_of.tolist()) - set(labels.tolist()))
    if missing:
        raise ValueError(f"push_prototypes: no training images for class {missing[0]}")
    if image_ids is None:
        image_ids = [str(i) for i in range(len(images))]
    m = bank.num_prototypes
    best = np.full(m, np.inf)
    where = np.zeros((m, 3), dtype=np.int64)
    best_vec = bank.vectors.data.copy()
    owner = bank.class_of[None, :]
    for start in range(0, len(images), batch_size):
        z = model.embed(np.asarray(images[start : start + batch_size], dtype=np.float64)).data
        d = ad.squared_distances(Tensor(z), Tensor(bank.vectors.data)).data  # [n, m, H, W]
        same = labels[start : start + len(z), None] == owner  # [n, m]
        d = np.where(same[:, :, None, None], d, np.inf)
        n, _, hh, ww = d.shape
        flat = d.transpose(1, 0, 2, 3).reshape(m, -1)
        idx = flat.argmin(axis=1)
        val = flat[np.arange(m), idx]
        better = val < best
        for l in np.flatnonzero(better):
            i, rem = divmod(int(idx[l]), hh * ww)
            r, c = divmod(rem, ww)
            best[l] = val[l]
            where[l] = (start + i, r, c)
            best_vec[l] = z[i, :, r, c]
    bank.vectors.data[...] = best_vec
    bank.provenance = [Provenance(str(image_ids[i]), int(r), int(c)) for i, r, c in where]
    return bank


def upsample_activation(map_slice: np.ndarray, image_dims: tuple[int, int], percentile: float = 95.0):
    """Bilinear (corner-aligned) upsampling plus the high-activation bounding box.

    Returns ``(heatmap, (y0, y1, x0, x1))`` with half-open box bounds covering
    every pixel at or above the given percentile of the heatmap.
    """
    src = np.asarray(map_slice, dtype=np.float64)
    h, w = src.shape
    out_h, out_w = image_dims
    ys = np.linspace(0.0, h - 1, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(xs).astype(int), 0, max(w - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bottom = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    heat = top * (1 - wy) + bottom * wy
    threshold = np.percentile(heat, percentile)
    rows = np.flatnonzero((heat >= threshold).any(axis=1))
    cols = np.flatnonzero((heat >= threshold).any(axis=0))
    box = (int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1)
    return heat, box
