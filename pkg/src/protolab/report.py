"""Raster overlays (PPM) and bar charts (SVG) without plotting libraries."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .data import write_ppm

GREEN = (0.0, 1.0, 0.0)
YELLOW = (1.0, 1.0, 0.0)


def colormap(values: np.ndarray) -> np.ndarray:
    """Jet-like colours for values in [0, 1]; returns [3, H, W]."""
    v = np.clip(values, 0.0, 1.0)
    r = np.clip(1.5 - np.abs(4 * v - 3), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4 * v - 2), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4 * v - 1), 0.0, 1.0)
    return np.stack([r, g, b])


def blend_heatmap(image: np.ndarray, heat: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    lo, hi = float(heat.min()), float(heat.max())
    norm = (heat - lo) / (hi - lo) if hi > lo else np.zeros_like(heat)
    return (1 - alpha) * np.asarray(image) + alpha * colormap(norm)


def draw_box(image: np.ndarray, box, color=YELLOW) -> np.ndarray:
    """One-pixel outline of a half-open box ``(y0, y1, x0, x1)``."""
    out = np.array(image, copy=True)
    y0, y1, x0, x1 = box
    c = np.asarray(color)[:, None]
    out[:, y0, x0:x1] = c
    out[:, y1 - 1, x0:x1] = c
    out[:, y0:y1, x0] = c
    out[:, y0:y1, x1 - 1] = c
    return out


def mask_box(mask: np.ndarray):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1


def save_overlay(path, image, heat, boxes) -> None:
    """``boxes`` is a list of ``(box, color)`` pairs drawn in order."""
    out = blend_heatmap(image, heat) if heat is not None else np.asarray(image)
    for box, color in boxes:
        out = draw_box(out, box, color)
    write_ppm(path, np.clip(out, 0.0, 1.0))


def paired_bar_svg(path, title: str, ranked: list[tuple[int, float, float]], ranked_label: str,
                   other_label: str, width: int = 900, height: int = 260) -> None:
    """Bars of the ranked image's top scores with the other image's scores overlaid."""
    pad = 40
    n = max(len(ranked), 1)
    top = max([max(a, b) for _, a, b in ranked] + [1e-9])
    bw = (width - 2 * pad) / n
    scale = (height - 2 * pad) / top
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{pad}" y="20" font-size="13">{escape(title)}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
    ]
    for i, (proto, a, b) in enumerate(ranked):
        x = pad + i * bw
        parts.append(f'<rect x="{x:.2f}" y="{height - pad - a * scale:.2f}" width="{bw * 0.9:.2f}" '
                     f'height="{a * scale:.2f}" fill="#4477aa"><title>p{proto}: {a:.4f}</title></rect>')
        parts.append(f'<rect x="{x + bw * 0.2:.2f}" y="{height - pad - b * scale:.2f}" width="{bw * 0.5:.2f}" '
                     f'height="{b * scale:.2f}" fill="#ee6677" fill-opacity="0.8"><title>p{proto}: {b:.4f}</title></rect>')
    parts.append(f'<text x="{pad}" y="{height - 10}" font-size="11" fill="#4477aa">{escape(ranked_label)}</text>')
    parts.append(f'<text x="{width / 2:.0f}" y="{height - 10}" font-size="11" fill="#ee6677">{escape(other_label)}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
