"""Plain-text float matrices and binary PGM/PPM images for debugging output."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ParseError


def save_matrix(path, values):
    """Header line ``rows cols`` then one row per line, values in ``repr`` precision."""
    m = np.asarray(values, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        m = m.reshape(m.shape[0], -1)
    with open(path, "w") as fh:
        fh.write(f"{m.shape[0]} {m.shape[1]}\n")
        for row in m:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_matrix(path) -> np.ndarray:
    lines = Path(path).read_text().split("\n", 1)
    try:
        rows, cols = (int(v) for v in lines[0].split())
        values = np.array(lines[1].split() if len(lines) > 1 else [], dtype=np.float64)
    except ValueError as exc:
        raise ParseError(f"malformed matrix file ({exc})", path=str(path)) from None
    if values.size != rows * cols:
        raise ParseError(f"header says {rows}x{cols} but found {values.size} values", path=str(path))
    return values.reshape(rows, cols)


def _to_uint8(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    lo, hi = np.nanmin(m), np.nanmax(m)
    scaled = np.zeros_like(m) if hi <= lo else (m - lo) / (hi - lo)
    return np.round(np.nan_to_num(scaled) * 255).astype(np.uint8)


def write_pgm(path, image, scale: int = 1):
    img = _to_uint8(image)
    if scale > 1:
        img = np.kron(img, np.ones((scale, scale), dtype=np.uint8))
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def write_ppm(path, rgb):
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def confusion_heatmap(path, cm, cell: int = 40):
    """Row-normalised confusion matrix as a grey-scale PGM, dark = frequent."""
    cm = np.asarray(cm, dtype=np.float64)
    rows = cm.sum(axis=1, keepdims=True)
    frac = np.divide(cm, rows, out=np.zeros_like(cm), where=rows > 0)
    write_pgm(path, 1.0 - frac, scale=cell)


def loss_curve(path, losses, width: int = 400, height: int = 200):
    """Polyline of ``losses`` on a white canvas, written as PPM."""
    y = np.asarray(losses, dtype=np.float64)
    canvas = np.full((height, width, 3), 255, dtype=np.uint8)
    if y.size == 0:
        write_ppm(path, canvas)
        return
    lo, hi = float(y.min()), float(y.max())
    span = hi - lo if hi > lo else 1.0
    xs = np.linspace(0, width - 1, max(y.size, 2))
    ys = (height - 1) - (np.resize(y, xs.size) - lo) / span * (height - 1)
    for i in range(xs.size - 1):
        n = int(max(abs(xs[i + 1] - xs[i]), abs(ys[i + 1] - ys[i]))) + 2
        px = np.round(np.linspace(xs[i], xs[i + 1], n)).astype(int)
        py = np.round(np.linspace(ys[i], ys[i + 1], n)).astype(int)
        canvas[py, px] = (200, 30, 30)
    write_ppm(path, canvas)
