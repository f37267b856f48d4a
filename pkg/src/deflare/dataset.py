"""On-disk paired dataset.

Layout::

    <root>/input/NNNNNN.png        flare-damaged image
    <root>/gt/NNNNNN.png           clean reference
    <root>/flare/NNNNNN.png        flare layer
    <root>/mask_glare/NNNNNN.png   0/255 masks
    <root>/mask_streak/NNNNNN.png
    <root>/mask_light/NNNNNN.png
    <root>/meta/NNNNNN.json        seed, flare kind and augmentation parameters

Images are 8-bit sRGB-encoded PNGs (display gamma already applied).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .synthesis import CompositeSample

IMAGE_DIRS = ("input", "gt", "flare")
MASK_DIRS = {"glare": "mask_glare", "streak": "mask_streak", "light_source": "mask_light"}
ALL_DIRS = IMAGE_DIRS + tuple(MASK_DIRS.values())


class DatasetError(ValueError):
    pass


def _name(index: int) -> str:
    return f"{index:06d}"


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    return arr.astype(np.float32) / 255.0


def write_sample(root, index: int, sample: CompositeSample) -> list[Path]:
    root = Path(root)
    name = _name(index)
    written = []
    for d in ALL_DIRS + ("meta",):
        (root / d).mkdir(parents=True, exist_ok=True)
    for d, img in zip(IMAGE_DIRS, (sample.input, sample.reference, sample.flare)):
        path = root / d / f"{name}.png"
        write_png(path, img)
        written.append(path)
    for key, d in MASK_DIRS.items():
        path = root / d / f"{name}.png"
        write_png(path, sample.masks[key].astype(np.float64))
        written.append(path)
    meta = {"index": index, "seed": sample.seed, "kind": sample.kind, "params": sample.params.to_dict()}
    path = root / "meta" / f"{name}.json"
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    written.append(path)
    return written


def validate(root) -> list[str]:
    """Sample names present in every directory; raises listing what is missing."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    names = sorted(p.stem for p in (root / "input").glob("*.png")) if (root / "input").is_dir() else []
    if not names:
        raise DatasetError(f"no samples found under {root / 'input'}")
    missing = []
    for name in names:
        for d in ALL_DIRS:
            if not (root / d / f"{name}.png").is_file():
                missing.append(f"{d}/{name}.png")
        if not (root / "meta" / f"{name}.json").is_file():
            missing.append(f"meta/{name}.json")
    if missing:
        raise DatasetError(f"dataset {root} is missing {len(missing)} file(s): " + ", ".join(missing))
    return names


@dataclass
class PairedData:
    """All samples of a dataset as (N, C, H, W) tensors."""

    names: list[str]
    input: torch.Tensor
    gt: torch.Tensor
    flare: torch.Tensor
    masks: dict[str, torch.Tensor]  # (N, H, W) bool

    def __len__(self):
        return len(self.names)

    @property
    def size(self) -> tuple[int, int]:
        return tuple(self.input.shape[-2:])


def load(root) -> PairedData:
    root = Path(root)
    names = validate(root)

    def stack(d):
        arrs = [read_png(root / d / f"{n}.png") for n in names]
        shapes = {a.shape for a in arrs}
        if len(shapes) != 1:
            raise DatasetError(f"{d}: images have differing shapes {sorted(shapes)}")
        return np.stack(arrs)

    images = {d: torch.from_numpy(stack(d)).permute(0, 3, 1, 2).contiguous() for d in IMAGE_DIRS}
    masks = {k: torch.from_numpy(stack(d) > 0.5) for k, d in MASK_DIRS.items()}
    return PairedData(names, images["input"], images["gt"], images["flare"], masks)
