"""Benchmark datasets: frames on disk (or in memory) plus ground truth.

Annotations use the COCO JSON subset: ``images[id, file_name, width,
height]``, ``annotations[image_id, category_id, bbox]`` with ``bbox`` as
``[x, y, w, h]``, and ``categories[id, name]``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import cv2
import numpy as np

from ..vision import Box, GroundTruthBox

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


@dataclass
class FrameRecord:
    frame_id: int
    path: Optional[Path]
    width: int
    height: int
    pixels: Optional[np.ndarray] = None

    def load(self) -> np.ndarray:
        """BGR ``uint8`` image of shape ``(height, width, 3)``."""
        if self.pixels is not None:
            return self.pixels
        image = cv2.imread(str(self.path), cv2.IMREAD_COLOR)
        if image is None:
            raise DatasetError(f"cannot decode image {self.path}")
        return image


@dataclass
class Dataset:
    frames: list[FrameRecord]
    annotations: dict[int, list[GroundTruthBox]] = field(default_factory=dict)
    classes: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        ids = [f.frame_id for f in self.frames]
        if len(set(ids)) != len(ids):
            raise DatasetError("frame ids must be unique")
        known = set(ids)
        for frame_id in self.annotations:
            if frame_id not in known:
                raise DatasetError(f"annotations reference unknown frame {frame_id}")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def frame_ids(self) -> list[int]:
        return [f.frame_id for f in self.frames]

    def ground_truth(self) -> dict[int, list[GroundTruthBox]]:
        return {f.frame_id: list(self.annotations.get(f.frame_id, ())) for f in self.frames}

    def gt_count(self) -> int:
        return sum(len(v) for v in self.annotations.values())


def _clip(box: Box, width: int, height: int, where: str) -> Box:
    clipped = box.clipped(width, height)
    if clipped != box:
        log.warning("%s: box %s exceeds %dx%d image; clipped", where, box.as_tuple(), width, height)
    return clipped


def _read_doc(annotation_file: Path) -> dict:
    try:
        doc = json.loads(annotation_file.read_text())
    except FileNotFoundError:
        raise DatasetError(f"annotation file {annotation_file} not found") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot parse {annotation_file}: {exc}") from exc
    if not isinstance(doc, dict) or "images" not in doc:
        raise DatasetError(f"{annotation_file}: not a COCO annotation document")
    return doc


def _parse(doc: dict, image_dir: Optional[Path], source) -> Dataset:
    frames = []
    try:
        for img in sorted(doc["images"], key=lambda i: int(i["id"])):
            path = None
            if image_dir is not None:
                path = image_dir / img["file_name"]
                if not path.is_file():
                    raise DatasetError(f"image file {path} for image id {img['id']} is missing")
            frames.append(FrameRecord(int(img["id"]), path, int(img["width"]), int(img["height"])))
        by_id = {f.frame_id: f for f in frames}
        classes = {int(c["id"]): str(c.get("name", c["id"])) for c in doc.get("categories", [])}
        annotations: dict[int, list[GroundTruthBox]] = {}
        for i, ann in enumerate(doc.get("annotations", [])):
            image_id = int(ann["image_id"])
            frame = by_id.get(image_id)
            if frame is None:
                raise DatasetError(f"annotation {ann.get('id', i)} references unknown image id {image_id}")
            x, y, w, h = (float(v) for v in ann["bbox"])
            if w < 0 or h < 0:
                raise DatasetError(f"annotation {ann.get('id', i)} has negative box size")
            box = _clip(Box(x, y, x + w, y + h), frame.width, frame.height, f"annotation {ann.get('id', i)}")
            annotations.setdefault(image_id, []).append(GroundTruthBox(box, int(ann["category_id"]), image_id))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DatasetError):
            raise
        raise DatasetError(f"{source}: malformed annotation entry ({exc})") from exc
    return Dataset(frames, annotations, classes)


def load_dataset(image_dir, annotation_file) -> Dataset:
    """Read a COCO-style annotation file and check its images exist.

    Frames are ordered by ascending image id; frame ids are image ids.
    Boxes are converted from ``[x, y, w, h]`` to corner form and clipped to
    the image.
    """
    annotation_file = Path(annotation_file)
    return _parse(_read_doc(annotation_file), Path(image_dir), annotation_file)


def load_annotations(annotation_file) -> dict[int, list[GroundTruthBox]]:
    """Ground truth only, without touching image files (for replay mocks)."""
    annotation_file = Path(annotation_file)
    return _parse(_read_doc(annotation_file), None, annotation_file).annotations


def to_coco(dataset: Dataset, file_names: Optional[dict[int, str]] = None) -> dict:
    """COCO-style document for ``dataset`` (inverse of :func:`load_dataset`)."""
    images = []
    for f in dataset.frames:
        name = (file_names or {}).get(f.frame_id) or (f.path.name if f.path else f"{f.frame_id:06d}.png")
        images.append({"id": f.frame_id, "file_name": name, "width": f.width, "height": f.height})
    annotations = []
    next_id = 1
    for frame_id in sorted(dataset.annotations):
        for gt in dataset.annotations[frame_id]:
            b = gt.box
            annotations.append(
                {
                    "id": next_id,
                    "image_id": frame_id,
                    "category_id": gt.class_id,
                    "bbox": [b.x0, b.y0, b.x1 - b.x0, b.y1 - b.y0],
                }
            )
            next_id += 1
    categories = [{"id": c, "name": n} for c, n in sorted(dataset.classes.items())]
    return {"images": images, "annotations": annotations, "categories": categories}
