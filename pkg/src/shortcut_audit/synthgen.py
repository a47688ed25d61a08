"""Synthetic two-class images with planted, ground-truth-known acquisition biases.

Each image is a mid-gray background with optional class-dependent
brightness shift, Gaussian noise, vignette and corner marker, plus an
elliptical "lesion" confined to the central zone so that the four corner
patches never contain lesion pixels.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import ABSENT, LABEL_NAMES, PRESENT, ClassMapping, Item, LabeledDataset, encode_png, image_id_for, write_manifest_csv
from .errors import ConfigError, InfeasibleScene, IoFailure
from .sampling import SeededRng

BACKGROUND_LEVEL = 128 / 255
MARKER_SIZE = 3
SYNTH_MAPPING = ClassMapping.from_sets(["present"], ["absent"])

Pair = tuple[float, float]


def _pair(value) -> Pair:
    if isinstance(value, (int, float)):
        return (float(value), float(value))
    a, b = value
    return (float(a), float(b))


@dataclass(frozen=True)
class LesionSpec:
    center_jitter: float = 2.0
    radius_range: Pair = (4.0, 8.0)
    intensity_range: Pair = (0.15, 0.35)

    def __post_init__(self):
        object.__setattr__(self, "radius_range", _pair(self.radius_range))
        object.__setattr__(self, "intensity_range", _pair(self.intensity_range))
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ConfigError(f"radius_range must satisfy 0 < lo <= hi, got {self.radius_range}")
        a, b = self.intensity_range
        if not 0 <= a <= b <= 1:
            raise ConfigError(f"intensity_range must lie in [0, 1], got {self.intensity_range}")
        if self.center_jitter < 0:
            raise ConfigError("center_jitter must be >= 0")


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    n_per_class: int = 500
    lesion: tuple[LesionSpec, LesionSpec] = (LesionSpec(), LesionSpec())
    lesion_zone_margin: int = 20

    def __post_init__(self):
        if isinstance(self.lesion, LesionSpec):
            object.__setattr__(self, "lesion", (self.lesion, self.lesion))
        if self.n_per_class < 1:
            raise ConfigError("n_per_class must be >= 1")

    def check_feasible(self) -> None:
        s, margin = self.image_size, self.lesion_zone_margin
        if s < 2 * margin + 1:
            raise InfeasibleScene(f"image_size {s} leaves no central zone outside {margin}px corners")
        c = s / 2
        for label, les in zip((ABSENT, PRESENT), self.lesion):
            reach = les.center_jitter + les.radius_range[1]
            if c - reach < margin or c + reach > s - margin:
                raise InfeasibleScene(
                    f"{LABEL_NAMES[label]} lesion (jitter {les.center_jitter} + radius {les.radius_range[1]}) "
                    f"does not fit in [{margin}, {s - margin})"
                )

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        lesion = d.pop("lesion", None)
        if lesion is None:
            les = (LesionSpec(), LesionSpec())
        elif isinstance(lesion, dict):
            les = (LesionSpec(**lesion),) * 2
        else:
            les = tuple(LesionSpec(**x) for x in lesion)
        return cls(lesion=les, **d)

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "n_per_class": self.n_per_class,
            "lesion_zone_margin": self.lesion_zone_margin,
            "lesion": [
                {"center_jitter": l.center_jitter, "radius_range": list(l.radius_range),
                 "intensity_range": list(l.intensity_range)}
                for l in self.lesion
            ],
        }


@dataclass(frozen=True)
class BiasSpec:
    """Per-class (absent, present) acquisition artifacts, in [0, 1] pixel units."""

    background_brightness_delta: Pair = (0.0, 0.0)
    noise_sigma: Pair = (0.0, 0.0)
    vignette_strength: Pair = (0.0, 0.0)
    corner_marker_probability: Pair = (0.0, 0.0)

    def __post_init__(self):
        for name in ("background_brightness_delta", "noise_sigma", "vignette_strength", "corner_marker_probability"):
            object.__setattr__(self, name, _pair(getattr(self, name)))
        if min(self.noise_sigma) < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not all(0.0 <= p <= 1.0 for p in self.corner_marker_probability):
            raise ConfigError("corner_marker_probability must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "BiasSpec":
        return cls(**d)


def load_synth_config(path: str | Path) -> tuple[SceneSpec, BiasSpec]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        return SceneSpec.from_dict(obj.get("scene", {})), BiasSpec.from_dict(obj.get("bias", {}))
    except TypeError as exc:
        raise ConfigError(f"bad synth config {path}: {exc}") from exc


def dump_synth_config(scene: SceneSpec, bias: BiasSpec) -> str:
    return json.dumps({"scene": scene.to_dict(), "bias": bias.to_dict()}, indent=2, sort_keys=True) + "\n"


def render_image(scene: SceneSpec, bias: BiasSpec, label: int, rng: SeededRng) -> tuple[np.ndarray, np.ndarray]:
    """One RGB image (float, clamped to [0, 1]) and its boolean lesion mask."""
    s = scene.image_size
    img = np.full((3, s, s), BACKGROUND_LEVEL + bias.background_brightness_delta[label])
    sigma = bias.noise_sigma[label]
    if sigma > 0:
        img += sigma * rng.child("noise").normal((3, s, s))
    np.clip(img, 0.0, 1.0, out=img)

    coords = np.arange(s) + 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    strength = bias.vignette_strength[label]
    if strength:
        r2 = ((yy - s / 2) ** 2 + (xx - s / 2) ** 2) / (2 * (s / 2) ** 2)
        img -= strength * r2

    marker = rng.child("marker")
    if marker.uniform() < bias.corner_marker_probability[label]:
        corner = marker.integers(0, 4)
        y0 = 0 if corner < 2 else s - MARKER_SIZE
        x0 = 0 if corner % 2 == 0 else s - MARKER_SIZE
        img[:, y0 : y0 + MARKER_SIZE, x0 : x0 + MARKER_SIZE] = 1.0

    les = scene.lesion[label]
    u = rng.child("lesion").uniform(5)
    cy = s / 2 + les.center_jitter * (2 * u[0] - 1)
    cx = s / 2 + les.center_jitter * (2 * u[1] - 1)
    lo, hi = les.radius_range
    ry, rx = lo + (hi - lo) * u[2], lo + (hi - lo) * u[3]
    a, b = les.intensity_range
    mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    img[:, mask] = a + (b - a) * u[4]
    np.clip(img, 0.0, 1.0, out=img)
    return img, mask


def _image_rng(rng: SeededRng, label: int, index: int) -> SeededRng:
    return rng.child("image", LABEL_NAMES[label], index)


def generate_arrays(scene: SceneSpec, bias: BiasSpec, rng: SeededRng):
    """All images as uint8 (N, 3, S, S), labels and lesion masks; absent first."""
    scene.check_feasible()
    images, labels, masks = [], [], []
    for label in (ABSENT, PRESENT):
        for i in range(scene.n_per_class):
            img, mask = render_image(scene, bias, label, _image_rng(rng, label, i))
            images.append(np.rint(img * 255.0).astype(np.uint8))
            labels.append(label)
            masks.append(mask)
    return np.stack(images), np.array(labels), np.stack(masks)


def generate(
    scene: SceneSpec, bias: BiasSpec, rng: SeededRng, out_dir: str | Path, *, overwrite: bool = False
) -> LabeledDataset:
    """Write ``<out_dir>/<class>/<class>_NNNNN.png``, ``manifest.csv`` and ``mapping.json``."""
    scene.check_feasible()
    out_dir = Path(out_dir)
    manifest_path = out_dir / "manifest.csv"
    if manifest_path.exists() and not overwrite:
        raise IoFailure(f"{manifest_path} already exists; pass overwrite=True")
    rows, items = [], []
    try:
        for label in (ABSENT, PRESENT):
            name = LABEL_NAMES[label]
            (out_dir / name).mkdir(parents=True, exist_ok=True)
            for i in range(scene.n_per_class):
                img, _ = render_image(scene, bias, label, _image_rng(rng, label, i))
                rel = f"{name}/{name}_{i:05d}.png"
                (out_dir / rel).write_bytes(encode_png(img))
                rows.append((rel, name))
                items.append(Item(image_id_for(rel), out_dir / rel, label))
        write_manifest_csv(rows, manifest_path)
        (out_dir / "mapping.json").write_text(json.dumps(SYNTH_MAPPING.to_dict(), sort_keys=True) + "\n", encoding="utf-8")
        (out_dir / "synth_config.json").write_text(dump_synth_config(scene, bias), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write synthetic dataset to {out_dir}: {exc}") from exc
    return LabeledDataset(tuple(items), out_dir.name or "synthetic")
