"""Fixed-position background patch extraction and derived crop datasets."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .data import (
    CROP_REGIONS,
    LABEL_NAMES,
    ORIGINAL,
    ImageTensor,
    Item,
    LabeledDataset,
    decode_image,
    encode_png,
    write_manifest_csv,
)
from .errors import ImageTooSmall, IoFailure, UnsupportedChannelCount


@dataclass(frozen=True)
class CropSpec:
    patch_height: int = 20
    patch_width: int = 20

    def __post_init__(self):
        if self.patch_height < 1 or self.patch_width < 1:
            raise ValueError("patch dimensions must be >= 1")


def region_offset(region: str, image_h: int, image_w: int, spec: CropSpec = CropSpec()) -> tuple[int, int]:
    """Top-left corner (y, x) of ``region``; corners sit flush with the borders."""
    ph, pw = spec.patch_height, spec.patch_width
    if image_h < ph or image_w < pw:
        raise ImageTooSmall(f"{image_h}x{image_w} image is smaller than the {ph}x{pw} patch")
    dy, dx = image_h - ph, image_w - pw
    offsets = {
        "upper_left": (0, 0),
        "upper_right": (0, dx),
        "center": (dy // 2, dx // 2),
        "bottom_left": (dy, 0),
        "bottom_right": (dy, dx),
    }
    try:
        return offsets[region]
    except KeyError:
        raise ValueError(f"unknown crop region {region!r}; expected one of {CROP_REGIONS}") from None


def extract_patch(image: ImageTensor, region: str, spec: CropSpec = CropSpec()) -> ImageTensor:
    y, x = region_offset(region, image.height, image.width, spec)
    patch = image.data[:, y : y + spec.patch_height, x : x + spec.patch_width]
    return ImageTensor(patch.copy())


def derive_crop_dataset(
    dataset: LabeledDataset,
    region: str,
    spec: CropSpec,
    out_dir: str | Path,
    *,
    overwrite: bool = False,
    workers: int = 1,
    load: Callable[[Item], ImageTensor] | None = None,
) -> LabeledDataset:
    """Write one PNG patch per image to ``<out_dir>/<region>/`` plus a manifest.

    The returned dataset keeps the input's ids, labels and order. Existing
    files are never replaced unless ``overwrite`` is set.
    """
    if dataset.region_tag != ORIGINAL:
        raise ValueError(f"crops are derived from original images, got region {dataset.region_tag!r}")
    if region not in CROP_REGIONS:
        raise ValueError(f"unknown crop region {region!r}")
    load = load or (lambda item: decode_image(item.source))
    region_dir = Path(out_dir) / region
    manifest_path = region_dir / "manifest.csv"
    targets = [region_dir / f"{it.image_id}.png" for it in dataset.items]
    if not overwrite:
        clashes = [p for p in [manifest_path, *targets] if p.exists()]
        if clashes:
            raise IoFailure(f"{len(clashes)} output file(s) already exist, e.g. {clashes[0]}; pass overwrite=True")
    try:
        region_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {region_dir}: {exc}") from exc

    def work(pair: tuple[Item, Path]) -> None:
        item, target = pair
        image = load(item)
        try:
            patch = extract_patch(image, region, spec)
        except ImageTooSmall as exc:
            raise ImageTooSmall(f"image {item.image_id!r}: {exc}") from exc
        try:
            target.write_bytes(encode_png(patch))
        except OSError as exc:
            raise IoFailure(f"cannot write {target}: {exc}") from exc

    pairs = list(zip(dataset.items, targets))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, pairs))
    else:
        for pair in pairs:
            work(pair)

    rows = [(t.name, LABEL_NAMES[it.label]) for it, t in pairs]
    try:
        write_manifest_csv(rows, manifest_path)
    except OSError as exc:
        raise IoFailure(f"cannot write {manifest_path}: {exc}") from exc
    items = tuple(Item(it.image_id, t, it.label) for it, t in pairs)
    return LabeledDataset(items, dataset.name, region)


def _axis_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(image: ImageTensor, out_h: int, out_w: int) -> ImageTensor:
    """Bilinear resize with half-pixel centres (no antialiasing)."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be >= 1")
    if (out_h, out_w) == (image.height, image.width):
        return ImageTensor(image.data.copy())
    data = image.data.astype(np.float64)
    y0, y1, wy = _axis_weights(image.height, out_h)
    x0, x1, wx = _axis_weights(image.width, out_w)
    rows = data[:, y0, :] * (1.0 - wy)[None, :, None] + data[:, y1, :] * wy[None, :, None]
    out = rows[:, :, x0] * (1.0 - wx) + rows[:, :, x1] * wx
    # convex weights can overshoot by an ulp
    out = np.clip(out, data.min(), data.max())
    return ImageTensor(out.astype(image.data.dtype))


def to_probe_input(image: ImageTensor) -> ImageTensor:
    if image.channels == 3:
        return image
    if image.channels == 1:
        return ImageTensor(np.repeat(image.data, 3, axis=0))
    raise UnsupportedChannelCount(f"expected 1 or 3 channels, got {image.channels}")
