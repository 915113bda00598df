"""JPEG-style lossy codec: colour transform, chroma subsampling, 8x8 DCT and
quantisation. The entropy-coding stage is lossless and therefore omitted."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# ITU-T T.81 Annex K, tables K.1 (luminance) and K.2 (chrominance)
BASE_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.int64)

BASE_CHROMA = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.int64)

BLOCK = 8


@dataclass(frozen=True)
class CodecConfig:
    quality: int = 20
    chroma_subsampling: bool = True

    def __post_init__(self):
        if int(self.quality) != self.quality or not 1 <= self.quality <= 100:
            raise ValueError(f"quality must be an integer in [1, 100], got {self.quality}")


@dataclass(frozen=True)
class QuantTables:
    luma: np.ndarray
    chroma: np.ndarray


def scaled_quant_tables(quality: int) -> QuantTables:
    """Base tables scaled with the conventional IJG quality formula."""
    if int(quality) != quality or not 1 <= quality <= 100:
        raise ValueError(f"quality must be an integer in [1, 100], got {quality}")
    scale = 5000 // quality if quality < 50 else 200 - 2 * quality

    def scaled(base):
        return np.clip((base * scale + 50) // 100, 1, 255)

    return QuantTables(scaled(BASE_LUMA), scaled(BASE_CHROMA))


def _dct_matrix(n: int = BLOCK) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    mat = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    mat[0] /= np.sqrt(2.0)
    return mat


_DCT = _dct_matrix()


def dct8x8(block: np.ndarray, direction: str = "forward") -> np.ndarray:
    """Orthonormal 2-D DCT-II (forward) or DCT-III (inverse).

    Works on ``[..., 8, 8]`` stacks of blocks.
    """
    if direction == "forward":
        return _DCT @ block @ _DCT.T
    if direction == "inverse":
        return _DCT.T @ block @ _DCT
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")


# BT.601 full-range; the inverse is the exact matrix inverse, not the rounded textbook constants
_RGB_TO_YCC = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
])
_YCC_TO_RGB = np.linalg.inv(_RGB_TO_YCC)
_CHROMA_OFFSET = np.array([0.0, 128.0, 128.0])[:, None, None]


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    return np.einsum("ij,j...->i...", _RGB_TO_YCC, np.asarray(rgb, dtype=np.float64)) + _CHROMA_OFFSET


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    return np.einsum("ij,j...->i...", _YCC_TO_RGB, np.asarray(ycc, dtype=np.float64) - _CHROMA_OFFSET)


def _pad_to(plane: np.ndarray, multiple: int) -> np.ndarray:
    h, w = plane.shape
    return np.pad(plane, ((0, -h % multiple), (0, -w % multiple)), mode="edge")


def _quantize_plane(plane: np.ndarray, table: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    padded = _pad_to(plane, BLOCK) - 128.0
    ph, pw = padded.shape
    blocks = padded.reshape(ph // BLOCK, BLOCK, pw // BLOCK, BLOCK).transpose(0, 2, 1, 3)
    coeffs = dct8x8(blocks, "forward")
    restored = dct8x8(np.round(coeffs / table) * table, "inverse")
    out = restored.transpose(0, 2, 1, 3).reshape(ph, pw) + 128.0
    return np.clip(out[:h, :w], 0.0, 255.0)


def compress_decompress(image: np.ndarray, config: CodecConfig = CodecConfig()) -> np.ndarray:
    """Round-trip a ``[3, H, W]`` image in ``[0, 1]`` through the lossy stages."""
    image = np.asarray(image, dtype=np.float64)
    _, h, w = image.shape
    tables = scaled_quant_tables(config.quality)
    ycc = rgb_to_ycbcr(np.rint(np.clip(image, 0.0, 1.0) * 255.0))
    planes = [_quantize_plane(ycc[0], tables.luma)]
    for chroma in ycc[1:]:
        if config.chroma_subsampling:
            even = _pad_to(chroma, 2)
            small = even.reshape(even.shape[0] // 2, 2, even.shape[1] // 2, 2).mean(axis=(1, 3))
            small = _quantize_plane(small, tables.chroma)
            chroma = np.repeat(np.repeat(small, 2, axis=0), 2, axis=1)[:h, :w]
        else:
            chroma = _quantize_plane(chroma, tables.chroma)
        planes.append(chroma)
    rgb = np.clip(ycbcr_to_rgb(np.stack(planes)), 0.0, 255.0)
    return np.rint(rgb) / 255.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    return float("inf") if mse == 0.0 else 10.0 * np.log10(1.0 / mse)
