"""Dataset ingestion, image decoding and binary class remapping."""

from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    CorruptImage,
    EmptyDataset,
    InvalidMapping,
    MalformedManifestRow,
    MissingPath,
    UnmappedClass,
    UnsupportedFormat,
)

ABSENT = 0
PRESENT = 1
LABEL_NAMES = {ABSENT: "absent", PRESENT: "present"}

ORIGINAL = "original"
CROP_REGIONS = ("upper_left", "upper_right", "center", "bottom_left", "bottom_right")
REGION_TAGS = (ORIGINAL,) + CROP_REGIONS

CSV_MANIFEST = "csv_manifest"
DIRECTORY_PER_CLASS = "directory_per_class"
_FORMAT_ALIASES = {
    "csv": CSV_MANIFEST,
    CSV_MANIFEST: CSV_MANIFEST,
    "dirs": DIRECTORY_PER_CLASS,
    DIRECTORY_PER_CLASS: DIRECTORY_PER_CLASS,
}
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """Decoded raster, shape (channels, height, width), values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"expected (C, H, W) array, got shape {self.data.shape}")
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other):
        if not isinstance(other, ImageTensor):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))


@dataclass(frozen=True)
class ClassMapping:
    """Maps source class names to cancer present / absent."""

    source_classes: tuple[str, ...]
    positive_set: frozenset[str]
    negative_set: frozenset[str]

    def __post_init__(self):
        if not self.positive_set or not self.negative_set:
            raise InvalidMapping("both the present and absent sets must be non-empty")
        overlap = self.positive_set & self.negative_set
        if overlap:
            raise InvalidMapping(f"classes mapped to both labels: {sorted(overlap)}")
        if self.positive_set | self.negative_set != set(self.source_classes):
            raise InvalidMapping("present and absent sets must cover source_classes exactly")

    @classmethod
    def from_sets(cls, present: Iterable[str], absent: Iterable[str]) -> "ClassMapping":
        present, absent = list(present), list(absent)
        return cls(tuple(present + absent), frozenset(present), frozenset(absent))

    @classmethod
    def from_json(cls, text: str) -> "ClassMapping":
        try:
            obj = json.loads(text)
            return cls.from_sets(obj["present"], obj["absent"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise InvalidMapping(f"mapping JSON needs 'present' and 'absent' lists: {exc}") from exc

    def to_dict(self) -> dict:
        return {"present": sorted(self.positive_set), "absent": sorted(self.negative_set)}

    def label_of(self, class_name: str) -> int:
        if class_name in self.positive_set:
            return PRESENT
        if class_name in self.negative_set:
            return ABSENT
        raise UnmappedClass(f"class {class_name!r} is not in the mapping")


@dataclass(frozen=True)
class Item:
    image_id: str
    source: Path
    label: int


@dataclass(frozen=True)
class LabeledDataset:
    items: tuple[Item, ...]
    name: str = "dataset"
    region_tag: str = ORIGINAL

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        if self.region_tag not in REGION_TAGS:
            raise ValueError(f"unknown region tag {self.region_tag!r}")
        ids = [it.image_id for it in self.items]
        if len(set(ids)) != len(ids):
            dupes = sorted(k for k, v in Counter(ids).items() if v > 1)
            raise ValueError(f"duplicate image ids: {dupes[:5]}")
        for it in self.items:
            if it.label not in (ABSENT, PRESENT):
                raise ValueError(f"label must be 0 or 1, got {it.label!r}")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def labels(self) -> np.ndarray:
        return np.array([it.label for it in self.items], dtype=np.int64)

    @property
    def ids(self) -> list[str]:
        return [it.image_id for it in self.items]

    def label_counts(self) -> dict[int, int]:
        counts = Counter(it.label for it in self.items)
        return {ABSENT: counts.get(ABSENT, 0), PRESENT: counts.get(PRESENT, 0)}

    @property
    def is_degenerate(self) -> bool:
        return min(self.label_counts().values()) == 0

    def subset(self, items: Sequence[Item], name: str | None = None) -> "LabeledDataset":
        return LabeledDataset(tuple(items), name or self.name, self.region_tag)


@dataclass(frozen=True)
class DatasetManifest:
    rows: tuple[tuple[str, str], ...]
    root: Path
    format: str

    @property
    def classes(self) -> list[str]:
        return sorted({cls for _, cls in self.rows})


def normalize_format(fmt: str) -> str:
    try:
        return _FORMAT_ALIASES[fmt]
    except KeyError:
        raise UnsupportedFormat(f"unknown manifest format {fmt!r}") from None


def _is_image_file(path: Path) -> bool:
    return path.is_file() and not path.name.startswith(".") and path.suffix.lower() in IMAGE_SUFFIXES


def load_manifest(path: str | Path, format: str) -> DatasetManifest:
    """Enumerate a dataset on disk.

    ``format`` is ``csv_manifest`` (a two-column ``path,class`` file whose
    paths are relative to the CSV's directory) or ``directory_per_class``
    (``<root>/<class>/<images>``). Rows come back sorted by relative path.
    """
    fmt = normalize_format(format)
    path = Path(path)
    if not path.exists():
        raise MissingPath(f"{path} does not exist")

    rows: list[tuple[str, str]] = []
    if fmt == CSV_MANIFEST:
        if path.is_dir():
            path = path / "manifest.csv"
            if not path.exists():
                raise MissingPath(f"{path} does not exist")
        root = path.parent
        with open(path, newline="", encoding="utf-8") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row or (len(row) == 1 and not row[0].strip()):
                    continue
                if len(row) != 2:
                    raise MalformedManifestRow(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
                rel, cls = row[0].strip(), row[1].strip()
                if not (root / rel).is_file():
                    raise MissingPath(f"{path}:{lineno}: {root / rel} does not exist")
                rows.append((rel, cls))
    else:
        if not path.is_dir():
            raise MissingPath(f"{path} is not a directory")
        root = path
        for class_dir in sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith(".")):
            for f in class_dir.iterdir():
                if _is_image_file(f):
                    rows.append((f"{class_dir.name}/{f.name}", class_dir.name))

    if not rows:
        raise EmptyDataset(f"no images found under {path}")
    rows.sort(key=lambda r: r[0])
    return DatasetManifest(tuple(rows), root, fmt)


def image_id_for(rel_path: str) -> str:
    stem = rel_path.replace("\\", "/").rsplit(".", 1)[0]
    return stem.strip("/").replace("/", "__")


def remap_labels(manifest: DatasetManifest, mapping: ClassMapping, name: str = "dataset") -> LabeledDataset:
    items = []
    seen: set[str] = set()
    for rel, cls in manifest.rows:
        label = mapping.label_of(cls)
        image_id = image_id_for(rel)
        if image_id in seen:
            raise MalformedManifestRow(f"two files map to image id {image_id!r}")
        seen.add(image_id)
        items.append(Item(image_id, manifest.root / rel, label))
    return LabeledDataset(tuple(items), name, ORIGINAL)


def decode_image(locator: str | Path) -> ImageTensor:
    """Decode a PNG or JPEG file; alpha is dropped, 8-bit samples scaled by 1/255."""
    locator = Path(locator)
    if not locator.is_file():
        raise MissingPath(f"{locator} does not exist")
    try:
        with Image.open(locator) as img:
            if img.format not in ("PNG", "JPEG"):
                raise UnsupportedFormat(f"{locator}: {img.format} images are not supported")
            img.load()
            arr = _to_array(img, locator)
    except UnidentifiedImageError as exc:
        raise CorruptImage(f"{locator}: cannot identify image") from exc
    except (OSError, SyntaxError, ValueError) as exc:
        raise CorruptImage(f"{locator}: {exc}") from exc
    return ImageTensor(arr)


def _to_array(img: Image.Image, locator: Path) -> np.ndarray:
    mode = img.mode
    if mode in ("L", "LA", "1"):
        img = img.convert("L")
    elif mode in ("RGB", "RGBA", "P", "PA", "CMYK", "YCbCr", "RGBX"):
        if mode in ("P", "PA") and _palette_is_gray(img):
            img = img.convert("L")
        else:
            img = img.convert("RGB")
    else:
        raise UnsupportedFormat(f"{locator}: pixel mode {mode} (only 8-bit gray/RGB supported)")
    arr = np.asarray(img, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr.astype(np.float32) / np.float32(255.0)


def _palette_is_gray(img: Image.Image) -> bool:
    pal = np.asarray(img.convert("RGB"))
    return bool((pal[..., 0] == pal[..., 1]).all() and (pal[..., 1] == pal[..., 2]).all())


def to_uint8(image: ImageTensor | np.ndarray) -> np.ndarray:
    data = image.data if isinstance(image, ImageTensor) else image
    return np.rint(np.asarray(data, dtype=np.float64) * 255.0).astype(np.uint8)


def encode_png(image: ImageTensor | np.ndarray) -> bytes:
    """PNG bytes of a (C, H, W) tensor, quantized to 8 bits."""
    arr = to_uint8(image)
    if arr.shape[0] == 1:
        pil = Image.fromarray(arr[0], mode="L")
    elif arr.shape[0] == 3:
        pil = Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")
    else:
        raise UnsupportedFormat(f"cannot encode {arr.shape[0]}-channel image as PNG")
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return buf.getvalue()


def write_png(image: ImageTensor | np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(encode_png(image))


def write_manifest_csv(rows: Iterable[tuple[str, str]], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for rel, cls in rows:
            writer.writerow([rel, cls])


def dataset_from_dir(root: str | Path, fmt: str, mapping: ClassMapping, name: str | None = None) -> LabeledDataset:
    root = Path(root)
    return remap_labels(load_manifest(root, fmt), mapping, name=name or root.name)
