"""End-to-end audit: original + five crop arms, probe training, significance, verdict."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .cropper import CropSpec, derive_crop_dataset, extract_patch, resize_bilinear, to_probe_input
from .data import (
    ORIGINAL,
    REGION_TAGS,
    ClassMapping,
    ImageTensor,
    LabeledDataset,
    decode_image,
    load_manifest,
    remap_labels,
)
from .errors import AuditError, ConfigError, DegenerateDataset
from .metrics import (
    ChanceBaselines,
    ConfusionMatrix,
    MetricSet,
    binomial_exceedance,
    chance_baselines,
    metric_set,
)
from .optim import TrainConfig, evaluate, train
from .probe import ProbeConfig, save_params
from .sampling import RNG_VERSION, DatasetSplit, SeededRng, SplitSpec, balance_classes, stratified_split

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
BIASED = "biased"
NOT_FLAGGED = "not_flagged"


@dataclass(frozen=True)
class AuditConfig:
    data: str
    format: str
    mapping: ClassMapping
    crop: CropSpec = CropSpec()
    split: SplitSpec = SplitSpec()
    train: TrainConfig = TrainConfig()
    probe: ProbeConfig = ProbeConfig()
    balance: bool = False
    balance_before_split: bool = True
    alpha: float = 0.01
    bonferroni: bool = False
    seeds: tuple[int, ...] = (42,)
    regions: tuple[str, ...] = REGION_TAGS
    original_size: int = 64
    name: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "regions", tuple(self.regions))
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not self.regions:
            raise ConfigError("at least one region is required")
        unknown = [r for r in self.regions if r not in REGION_TAGS]
        if unknown or len(set(self.regions)) != len(self.regions):
            raise ConfigError(f"bad region list {list(self.regions)}; choose from {list(REGION_TAGS)}")
        if self.original_size < 1:
            raise ConfigError("original_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "data": str(self.data),
            "format": self.format,
            "name": self.name,
            "mapping": self.mapping.to_dict(),
            "crop": {"patch_height": self.crop.patch_height, "patch_width": self.crop.patch_width},
            "split": {
                "train_fraction": self.split.train_fraction,
                "val_fraction": self.split.val_fraction,
                "test_fraction": self.split.test_fraction,
            },
            "train": self.train.to_dict(),
            "probe": self.probe.to_dict(),
            "balance": self.balance,
            "balance_before_split": self.balance_before_split,
            "alpha": self.alpha,
            "bonferroni": self.bonferroni,
            "seeds": list(self.seeds),
            "regions": list(self.regions),
            "original_size": self.original_size,
            "rng_version": RNG_VERSION,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AuditConfig":
        d = dict(d)
        rng_version = d.pop("rng_version", RNG_VERSION)
        if rng_version != RNG_VERSION:
            raise ConfigError(f"report was produced with rng {rng_version}, this build has {RNG_VERSION}")
        try:
            return cls(
                data=d["data"],
                format=d["format"],
                name=d.get("name"),
                mapping=ClassMapping.from_sets(d["mapping"]["present"], d["mapping"]["absent"]),
                crop=CropSpec(**d.get("crop", {})),
                split=SplitSpec(**d.get("split", {})),
                train=TrainConfig(**d.get("train", {})),
                probe=ProbeConfig.from_dict(d.get("probe", {})),
                balance=d.get("balance", False),
                balance_before_split=d.get("balance_before_split", True),
                alpha=d.get("alpha", 0.01),
                bonferroni=d.get("bonferroni", False),
                seeds=tuple(d.get("seeds", (42,))),
                regions=tuple(d.get("regions", REGION_TAGS)),
                original_size=d.get("original_size", 64),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"invalid audit config: {exc}") from exc


@dataclass
class RegionResult:
    region: str
    seed: int
    sizes: dict
    test_confusion: ConfusionMatrix
    test_metrics: MetricSet
    val_confusion: ConfusionMatrix | None
    val_metrics: MetricSet | None
    baselines: ChanceBaselines
    p_value_majority: float
    p_value_fixed: float
    flagged: bool
    learning_curve: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "region": self.region,
            "seed": self.seed,
            "sizes": dict(self.sizes),
            "test": {"confusion": self.test_confusion.to_dict(), "metrics": self.test_metrics.to_dict()},
            "val": None
            if self.val_confusion is None
            else {"confusion": self.val_confusion.to_dict(), "metrics": self.val_metrics.to_dict()},
            "baselines": self.baselines.to_dict(),
            "p_value_majority": self.p_value_majority,
            "p_value_fixed": self.p_value_fixed,
            "flagged": self.flagged,
            "learning_curve": self.learning_curve,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegionResult":
        val = d.get("val")
        return cls(
            region=d["region"],
            seed=d["seed"],
            sizes=dict(d["sizes"]),
            test_confusion=ConfusionMatrix(**d["test"]["confusion"]),
            test_metrics=MetricSet(**d["test"]["metrics"]),
            val_confusion=None if val is None else ConfusionMatrix(**val["confusion"]),
            val_metrics=None if val is None else MetricSet(**val["metrics"]),
            baselines=ChanceBaselines(**d["baselines"]),
            p_value_majority=d["p_value_majority"],
            p_value_fixed=d["p_value_fixed"],
            flagged=d["flagged"],
            learning_curve=list(d.get("learning_curve", [])),
        )


@dataclass
class AuditReport:
    config: dict
    results: list[RegionResult]
    region_flags: dict[str, bool]
    verdict: str
    accuracy_deltas: list[dict]
    dataset: dict
    toolkit_version: str = __version__
    rng_version: str = RNG_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "toolkit_version": self.toolkit_version,
            "rng_version": self.rng_version,
            "metric_units": "fraction",
            "verdict_source": "test",
            "config": self.config,
            "dataset": self.dataset,
            "results": [r.to_dict() for r in self.results],
            "region_flags": dict(self.region_flags),
            "verdict": self.verdict,
            "accuracy_deltas": self.accuracy_deltas,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AuditReport":
        return cls(
            config=d["config"],
            results=[RegionResult.from_dict(r) for r in d["results"]],
            region_flags=dict(d["region_flags"]),
            verdict=d["verdict"],
            accuracy_deltas=list(d["accuracy_deltas"]),
            dataset=dict(d["dataset"]),
            toolkit_version=d["toolkit_version"],
            rng_version=d["rng_version"],
        )

    def result(self, region: str, seed: int | None = None) -> RegionResult:
        for r in self.results:
            if r.region == region and (seed is None or r.seed == seed):
                return r
        raise KeyError((region, seed))


def is_flagged(test_accuracy: float, majority_rate: float, p_value_majority: float, alpha: float) -> bool:
    return test_accuracy > majority_rate and p_value_majority < alpha


def verdict_from_flags(region_flags: dict[str, bool]) -> str:
    return BIASED if any(flag for region, flag in region_flags.items() if region != ORIGINAL) else NOT_FLAGGED


def dataset_digest(dataset: LabeledDataset) -> str:
    h = hashlib.sha256()
    for it in dataset.items:
        h.update(f"{it.image_id}\t{it.label}\t".encode())
        h.update(hashlib.sha256(Path(it.source).read_bytes()).digest())
    return h.hexdigest()


class _ArmTensors:
    """Probe-ready arrays of one arm, addressable by image id."""

    def __init__(self, ids: list[str], array: np.ndarray):
        self.index = {k: i for i, k in enumerate(ids)}
        self.array = array

    def __call__(self, dataset: LabeledDataset) -> np.ndarray:
        return self.array[[self.index[i] for i in dataset.ids]]


def _load_region_arrays(
    dataset: LabeledDataset, regions: tuple[str, ...], config: AuditConfig, cache_dir: Path | None
) -> dict[str, _ArmTensors]:
    images: dict[str, ImageTensor] = {it.image_id: decode_image(it.source) for it in dataset.items}
    ids = dataset.ids
    arms = {}
    if ORIGINAL in regions:
        s = config.original_size
        arms[ORIGINAL] = np.stack([to_probe_input(resize_bilinear(images[i], s, s)).data for i in ids])
    crop_regions = [r for r in regions if r != ORIGINAL]
    if crop_regions and cache_dir is not None:
        spec = config.crop
        key = hashlib.sha256(
            f"{dataset_digest(dataset)}|{spec.patch_height}x{spec.patch_width}".encode()
        ).hexdigest()[:20]
        root = Path(cache_dir) / key
        for region in crop_regions:
            manifest = root / region / "manifest.csv"
            if manifest.exists() and _cache_complete(root / region, ids):
                log.info("reusing cached %s crops in %s", region, root / region)
                derived = [root / region / f"{i}.png" for i in ids]
            else:
                try:
                    derived_ds = derive_crop_dataset(
                        dataset, region, spec, root, overwrite=True, load=lambda it: images[it.image_id]
                    )
                except AuditError as exc:
                    raise type(exc)(f"[region {region}] {exc}") from exc
                derived = [it.source for it in derived_ds.items]
            arms[region] = np.stack([to_probe_input(decode_image(p)).data for p in derived])
    else:
        for region in crop_regions:
            arms[region] = np.stack(
                [to_probe_input(_patch(images[i], region, config.crop, i)).data for i in ids]
            )
    return {k: _ArmTensors(ids, v.astype(np.float32)) for k, v in arms.items()}


def _patch(image: ImageTensor, region: str, spec: CropSpec, image_id: str) -> ImageTensor:
    try:
        return extract_patch(image, region, spec)
    except AuditError as exc:
        raise type(exc)(f"[region {region}] image {image_id!r}: {exc}") from exc


def _cache_complete(region_dir: Path, ids: list[str]) -> bool:
    lines = (region_dir / "manifest.csv").read_text(encoding="utf-8").splitlines()
    return len(lines) == len(ids) and all((region_dir / f"{i}.png").exists() for i in ids)


def _make_split(dataset: LabeledDataset, config: AuditConfig, base: SeededRng) -> DatasetSplit:
    if config.balance and config.balance_before_split:
        dataset = balance_classes(dataset, base.child("balance"))
    split = stratified_split(dataset, config.split, base.child("split"))
    if config.balance and not config.balance_before_split:
        split = DatasetSplit(
            *(balance_classes(part, base.child("balance", name)) for name, part in
              (("train", split.train), ("val", split.val), ("test", split.test)))
        )
    return split


def _with_region(ds: LabeledDataset, region: str) -> LabeledDataset:
    return LabeledDataset(ds.items, ds.name, region)


def _run_arm(
    region: str,
    seed: int,
    split: DatasetSplit,
    loader: _ArmTensors,
    config: AuditConfig,
    alpha: float,
    params_dir: Path | None,
) -> RegionResult:
    split = DatasetSplit(*(_with_region(p, region) for p in (split.train, split.val, split.test)))
    h, w = loader.array.shape[2:]
    probe_cfg = replace(config.probe, input_size=(h, w))
    train_cfg = replace(config.train, seed=seed)
    rng = SeededRng(seed).child("region", region)
    params, curve = train(train_cfg, probe_cfg, split, load=loader, rng=rng)
    if params_dir is not None:
        params_dir.mkdir(parents=True, exist_ok=True)
        save_params(params, params_dir / f"{region}_seed{seed}.bin")

    test_cm = evaluate(params, split.test, load=loader)
    val_cm = evaluate(params, split.val, load=loader) if len(split.val) else None
    test_m = metric_set(test_cm)
    baselines = chance_baselines(split.test)
    n, k = test_cm.total, test_cm.correct
    p_major = binomial_exceedance(k, n, baselines.majority_rate) if baselines.majority_rate < 1.0 else 1.0
    p_fixed = binomial_exceedance(k, n, baselines.fixed)
    return RegionResult(
        region=region,
        seed=seed,
        sizes=split.sizes(),
        test_confusion=test_cm,
        test_metrics=test_m,
        val_confusion=val_cm,
        val_metrics=metric_set(val_cm) if val_cm is not None else None,
        baselines=baselines,
        p_value_majority=p_major,
        p_value_fixed=p_fixed,
        flagged=is_flagged(test_m.accuracy, baselines.majority_rate, p_major, alpha),
        learning_curve=curve.to_list(),
    )


def run_audit(
    config: AuditConfig,
    *,
    cache_dir: str | Path | None = None,
    params_dir: str | Path | None = None,
    progress: Callable[[str], None] | None = None,
) -> AuditReport:
    """Run every (seed, region) arm with identical hyperparameters.

    Randomness for balancing/splitting is keyed by seed only, so all arms
    share the same train/val/test ids; initialization and batch order are
    keyed by (seed, region), so region order never changes results.
    """
    manifest = load_manifest(config.data, config.format)
    dataset = remap_labels(manifest, config.mapping, name=config.name or Path(config.data).name)
    if dataset.is_degenerate:
        raise DegenerateDataset(f"{dataset.name}: both labels must be present after mapping, got {dataset.label_counts()}")

    arms = _load_region_arrays(dataset, config.regions, config, Path(cache_dir) if cache_dir else None)
    n_crop = sum(r != ORIGINAL for r in config.regions)
    alpha = config.alpha / n_crop if config.bonferroni and n_crop else config.alpha

    results: list[RegionResult] = []
    for seed in config.seeds:
        split = _make_split(dataset, config, SeededRng(seed))
        for region in config.regions:
            if progress:
                progress(f"seed {seed}: training {region} probe")
            try:
                results.append(
                    _run_arm(region, seed, split, arms[region], config, alpha, Path(params_dir) if params_dir else None)
                )
            except AuditError as exc:
                raise type(exc)(f"[region {region}, seed {seed}] {exc}") from exc

    region_flags = {
        region: sum(r.flagged for r in results if r.region == region) * 2 > len(config.seeds)
        for region in config.regions
    }
    deltas = []
    if ORIGINAL in config.regions:
        for seed in config.seeds:
            orig = next(r for r in results if r.region == ORIGINAL and r.seed == seed)
            for r in results:
                if r.seed == seed and r.region != ORIGINAL:
                    deltas.append({
                        "seed": seed,
                        "region": r.region,
                        "original_minus_crop_test_accuracy": orig.test_metrics.accuracy - r.test_metrics.accuracy,
                    })
    counts = dataset.label_counts()
    return AuditReport(
        config=config.to_dict(),
        results=results,
        region_flags=region_flags,
        verdict=verdict_from_flags(region_flags),
        accuracy_deltas=deltas,
        dataset={"name": dataset.name, "n_items": len(dataset), "n_present": counts[1], "n_absent": counts[0],
                 "effective_alpha": alpha},
    )


def _canonical(obj):
    if isinstance(obj, bool) or obj is None or isinstance(obj, (str, int)) and not isinstance(obj, float):
        return obj
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise ValueError(f"non-finite value {x} in report")
        return float(f"{x:.6g}")
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def render_report_json(report: AuditReport | dict) -> bytes:
    """Canonical JSON: sorted keys, floats at 6 significant digits, LF endings."""
    obj = report.to_dict() if isinstance(report, AuditReport) else report
    return (json.dumps(_canonical(obj), sort_keys=True, indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def parse_report_json(data: bytes | str) -> AuditReport:
    return AuditReport.from_dict(json.loads(data))


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def render_report_markdown(report: AuditReport) -> str:
    cfg = report.config
    multi_seed = len({r.seed for r in report.results}) > 1
    lines = [
        f"# Shortcut audit: {report.dataset.get('name', 'dataset')}",
        "",
        f"- Verdict: **{report.verdict}**",
        f"- Items: {report.dataset.get('n_items')} "
        f"(present {report.dataset.get('n_present')}, absent {report.dataset.get('n_absent')})",
        f"- Probe: {cfg['probe']['variant']}, epochs {cfg['train']['epochs']}, batch {cfg['train']['batch_size']}, "
        f"lr {cfg['train']['learning_rate']:g}",
        f"- Patch: {cfg['crop']['patch_height']}x{cfg['crop']['patch_width']}, original arm resized to "
        f"{cfg['original_size']}x{cfg['original_size']}",
        f"- Seeds: {', '.join(map(str, cfg['seeds']))}; alpha {report.dataset.get('effective_alpha', cfg['alpha']):g}"
        f"{' (Bonferroni)' if cfg.get('bonferroni') else ''}; balance {cfg['balance']}",
        f"- Toolkit {report.toolkit_version}, rng {report.rng_version}",
        "- Metrics are fractions in [0, 1] on the test split; p-values are one-sided exact binomial tails.",
        "",
    ]
    header = ["Region"] + (["Seed"] if multi_seed else []) + [
        "Accuracy", "Precision", "Recall", "F1", "Majority", "p (majority)", "p (0.5)", "Flag"]
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "|".join("---" for _ in header) + "|")
    for r in report.results:
        m = r.test_metrics
        row = [r.region] + ([str(r.seed)] if multi_seed else []) + [
            _fmt(m.accuracy), _fmt(m.precision), _fmt(m.recall), _fmt(m.f1),
            _fmt(r.baselines.majority_rate), f"{r.p_value_majority:.3g}", f"{r.p_value_fixed:.3g}",
            "✔" if r.flagged else "",
        ]
        lines.append("| " + " | ".join(row) + " |")
    if report.accuracy_deltas:
        lines += ["", "Original minus crop test accuracy:", ""]
        for d in report.accuracy_deltas:
            seed = f" (seed {d['seed']})" if multi_seed else ""
            lines.append(f"- {d['region']}{seed}: {d['original_minus_crop_test_accuracy']:+.4f}")
    return "\n".join(lines) + "\n"
