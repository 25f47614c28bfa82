"""Seeded synthetic scenes for desk-scale runs and tests."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import cv2
import numpy as np

from .host.dataset import Dataset, FrameRecord, to_coco
from .metrics import PowerSample
from .vision import Box, GroundTruthBox

_PALETTE = [(40, 40, 220), (40, 200, 40), (220, 120, 30), (200, 40, 200), (30, 200, 220), (120, 120, 120)]


def make_dataset(
    n_frames: int = 50,
    n_classes: int = 3,
    width: int = 96,
    height: int = 64,
    max_boxes: int = 4,
    seed: int = 0,
    first_id: int = 1,
) -> Dataset:
    """In-memory dataset of coloured rectangles on noise.

    Boxes sit in disjoint grid cells, so no two ground-truth boxes overlap
    and NMS never removes a perfect detection.
    """
    if n_classes < 1 or max_boxes < 1:
        raise ValueError("need at least one class and one box per frame")
    rng = np.random.default_rng(seed)
    grid_cols, grid_rows = 3, 2
    cell_w, cell_h = width // grid_cols, height // grid_rows
    if cell_w < 6 or cell_h < 6:
        raise ValueError("image too small for the box grid")
    frames, annotations = [], {}
    for k in range(n_frames):
        frame_id = first_id + k
        image = rng.integers(0, 60, size=(height, width, 3), dtype=np.uint8)
        n = int(rng.integers(1, min(max_boxes, grid_cols * grid_rows) + 1))
        cells = rng.choice(grid_cols * grid_rows, size=n, replace=False)
        gts = []
        for j, cell in enumerate(cells):
            # round-robin classes so every class appears across the set
            cls = int((k + j) % n_classes) + 1
            cx, cy = (cell % grid_cols) * cell_w, (cell // grid_cols) * cell_h
            w = int(rng.integers(cell_w // 2, cell_w - 1))
            h = int(rng.integers(cell_h // 2, cell_h - 1))
            x0 = cx + int(rng.integers(0, cell_w - w))
            y0 = cy + int(rng.integers(0, cell_h - h))
            box = Box(x0, y0, x0 + w, y0 + h)
            cv2.rectangle(image, (x0, y0), (x0 + w - 1, y0 + h - 1), _PALETTE[(cls - 1) % len(_PALETTE)], -1)
            gts.append(GroundTruthBox(box, cls, frame_id))
        frames.append(FrameRecord(frame_id, None, width, height, pixels=image))
        annotations[frame_id] = gts
    classes = {c: f"class{c}" for c in range(1, n_classes + 1)}
    return Dataset(frames, annotations, classes)


def write_dataset(dataset: Dataset, out_dir, annotation_name: str = "annotations.json") -> tuple[Path, Path]:
    """Write frames as PNG files plus a COCO annotation file.

    Returns:
        ``(image_dir, annotation_file)``.
    """
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    names = {}
    for f in dataset.frames:
        name = f"{f.frame_id:06d}.png"
        if not cv2.imwrite(str(image_dir / name), f.load()):
            raise OSError(f"could not write {image_dir / name}")
        names[f.frame_id] = name
    ann = out_dir / annotation_name
    ann.write_text(json.dumps(to_coco(dataset, names), indent=1))
    return image_dir, ann


def constant_power_log(watts: float, duration_s: float = 120.0, period_s: float = 0.001, jitter_w: float = 0.0, seed: Optional[int] = None):
    """Evenly spaced power samples starting at t=0."""
    rng = np.random.default_rng(seed)
    n = int(round(duration_s / period_s)) + 1
    t = np.arange(n) * period_s
    w = np.full(n, float(watts))
    if jitter_w > 0:
        w = np.maximum(w + rng.uniform(-jitter_w, jitter_w, size=n), 0.0)
    return [PowerSample(float(a), float(b)) for a, b in zip(t, w)]
