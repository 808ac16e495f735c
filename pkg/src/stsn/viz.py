"""Offset-tracking export: one PPM per supporting frame plus a CSV."""

import csv
import re
from pathlib import Path

import numpy as np

from .evaluate import center_cells, mean_kernel_offset
from .model import stsn_forward

__all__ = ["write_ppm", "read_ppm", "viz_offsets"]

GREEN = (0, 255, 0)
RED = (255, 0, 0)


def write_ppm(path, rgb):
    """Binary P6 pixmap from a uint8 ``[H, W, 3]`` array."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def read_ppm(path):
    data = Path(path).read_bytes()
    # exactly one whitespace byte separates maxval from the pixels
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+255\s", data)
    if m is None:
        raise ValueError("not an 8-bit P6 pixmap")
    w, h = int(m.group(1)), int(m.group(2))
    pixels = data[m.end() : m.end() + w * h * 3]
    if len(pixels) != w * h * 3:
        raise ValueError("truncated pixmap")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)


def _mark(rgb, y, x, color, half=1):
    h, w = rgb.shape[:2]
    yi, xi = int(round(y)), int(round(x))
    rgb[max(yi - half, 0) : min(yi + half + 1, h), max(xi - half, 0) : min(xi + half + 1, w)] = color


def viz_offsets(params, config, clip, t, out_dir, K=None, temporal_stride=None, obj=0):
    """Mark the gt centre (green) and centre + mean o4 offset (red) per supporting frame.

    Writes ``support_<e>_k<k>.ppm`` and ``offsets.csv`` with rows
    ``k,ref_y,ref_x,mean_dy,mean_dx`` (pixels). Returns the CSV rows.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = stsn_forward(clip.frames, t, config, params, K=K, temporal_stride=temporal_stride)
    i, j = center_cells(clip, t, config)[obj]
    ref_y, ref_x = clip.centers(t)[obj]
    rows = []
    for e, idx in enumerate(res.indices):
        k = idx - t
        dy, dx = mean_kernel_offset(res.offsets[e], i, j) * config.head_stride
        gray = np.clip(np.asarray(clip.frames[idx, 0], dtype=np.float64) * 255.0, 0, 255).astype(np.uint8)
        rgb = np.repeat(gray[:, :, None], 3, axis=2)
        _mark(rgb, ref_y, ref_x, GREEN)
        _mark(rgb, ref_y + dy, ref_x + dx, RED)
        write_ppm(out / f"support_{e}_k{k:+d}.ppm", rgb)
        rows.append((k, float(ref_y), float(ref_x), float(dy), float(dx)))
    with open(out / "offsets.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["k", "ref_y", "ref_x", "mean_dy", "mean_dx"])
        wr.writerows(rows)
    return rows
