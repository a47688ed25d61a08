"""Command-line interface.

Exit codes: 0 success, 2 invalid config, 3 data error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .audit import AuditConfig, render_report_json, render_report_markdown, run_audit
from .cropper import CropSpec, derive_crop_dataset
from .data import CROP_REGIONS, REGION_TAGS, ClassMapping, load_manifest, remap_labels
from .errors import AuditError, ConfigError, DataError, MalformedManifestRow
from .metrics import ConfusionMatrix, metric_set
from .optim import TrainConfig
from .probe import ProbeConfig
from .sampling import SeededRng
from .synthgen import generate, load_synth_config

log = logging.getLogger("shortcut_audit")


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {text!r}") from None


def _parse_regions(text: str, allowed: tuple[str, ...]) -> tuple[str, ...]:
    if text == "all":
        return allowed
    regions = tuple(r.strip() for r in text.split(",") if r.strip())
    bad = [r for r in regions if r not in allowed]
    if bad or not regions:
        raise ConfigError(f"unknown region(s) {bad}; choose from {', '.join(allowed)} or 'all'")
    return regions


def _load_mapping(path: str | None, data: Path) -> ClassMapping:
    if path is None:
        guess = (data if data.is_dir() else data.parent) / "mapping.json"
        if not guess.exists():
            raise ConfigError("--mapping is required (no mapping.json next to the data)")
        path = str(guess)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read mapping {path}: {exc}") from exc
    return ClassMapping.from_json(text)


def cmd_audit(args) -> int:
    data = Path(args.data)
    config = AuditConfig(
        data=args.data,
        format=args.format,
        mapping=_load_mapping(args.mapping, data),
        crop=CropSpec(args.patch, args.patch),
        train=TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs),
        probe=ProbeConfig(variant=args.probe),
        balance=args.balance,
        balance_before_split=not args.balance_after_split,
        alpha=args.alpha,
        bonferroni=args.bonferroni,
        seeds=_parse_seeds(args.seeds),
        regions=_parse_regions(args.regions, REGION_TAGS),
        original_size=args.original_size,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = run_audit(
        config,
        cache_dir=None if args.no_cache else out / "cache",
        params_dir=out / "params",
        progress=log.info,
    )
    (out / "report.json").write_bytes(render_report_json(report))
    (out / "report.md").write_text(render_report_markdown(report), encoding="utf-8")
    print(f"verdict: {report.verdict} -> {out / 'report.json'}")
    return 0


def cmd_crop(args) -> int:
    data = Path(args.data)
    mapping = _load_mapping(args.mapping, data)
    dataset = remap_labels(load_manifest(data, args.format), mapping, name=data.name)
    spec = CropSpec(args.patch, args.patch)
    for region in _parse_regions(args.region, CROP_REGIONS):
        derived = derive_crop_dataset(dataset, region, spec, args.out, overwrite=args.overwrite)
        print(f"{region}: {len(derived)} patches -> {Path(args.out) / region}")
    return 0


def cmd_synth(args) -> int:
    scene, bias = load_synth_config(args.config)
    dataset = generate(scene, bias, SeededRng(args.seed), args.out, overwrite=args.overwrite)
    print(f"wrote {len(dataset)} images to {args.out}")
    return 0


_LABEL_TOKENS = {"0": 0, "1": 1, "absent": 0, "present": 1}


def _read_label_csv(path: str) -> dict[str, int]:
    """Rows of ``id,label`` with label in {0, 1, absent, present}; a header row is skipped."""
    out: dict[str, int] = {}
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != 2:
                raise MalformedManifestRow(f"{path}:{lineno}: expected 'id,label'")
            key, token = row[0].strip(), row[1].strip().lower()
            if token not in _LABEL_TOKENS:
                if lineno == 1:
                    continue
                raise MalformedManifestRow(f"{path}:{lineno}: unknown label {row[1]!r}")
            out[key] = _LABEL_TOKENS[token]
    return out


def cmd_metrics(args) -> int:
    preds = _read_label_csv(args.predictions)
    labels = _read_label_csv(args.labels)
    if set(preds) != set(labels):
        raise DataError("prediction and label files cover different ids")
    ids = sorted(labels)
    cm = ConfusionMatrix.from_predictions([labels[i] for i in ids], [preds[i] for i in ids])
    out = {"confusion": cm.to_dict(), "metrics": metric_set(cm).to_dict(), "units": "fraction"}
    print(render_report_json(out).decode("utf-8"), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shortcut-audit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    a = sub.add_parser("audit", help="run the full background-patch audit")
    a.add_argument("--data", required=True, help="dataset root (dirs) or manifest CSV")
    a.add_argument("--format", default="dirs", choices=["csv", "dirs", "csv_manifest", "directory_per_class"])
    a.add_argument("--mapping", help="JSON file {\"present\": [...], \"absent\": [...]}")
    a.add_argument("--balance", action="store_true", help="subsample classes to the minority count")
    a.add_argument("--balance-after-split", action="store_true")
    a.add_argument("--seeds", default="42")
    a.add_argument("--epochs", type=int, default=30)
    a.add_argument("--batch-size", type=int, default=32)
    a.add_argument("--lr", type=float, default=1e-4)
    a.add_argument("--alpha", type=float, default=0.01)
    a.add_argument("--bonferroni", action="store_true")
    a.add_argument("--regions", default="all", help="'all' or a comma list of " + ", ".join(REGION_TAGS))
    a.add_argument("--probe", default="patch_cnn", choices=["patch_cnn", "linear"])
    a.add_argument("--patch", type=int, default=20)
    a.add_argument("--original-size", type=int, default=64)
    a.add_argument("--no-cache", action="store_true", help="crop in memory instead of writing patch PNGs")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_audit)

    c = sub.add_parser("crop", help="write the five derived crop datasets")
    c.add_argument("--data", required=True)
    c.add_argument("--format", default="dirs", choices=["csv", "dirs", "csv_manifest", "directory_per_class"])
    c.add_argument("--mapping")
    c.add_argument("--region", default="all")
    c.add_argument("--patch", type=int, default=20)
    c.add_argument("--overwrite", action="store_true")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_crop)

    s = sub.add_parser("synth", help="generate a synthetic biased dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--overwrite", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    m = sub.add_parser("metrics", help="confusion metrics from prediction/label CSVs")
    m.add_argument("--predictions", required=True)
    m.add_argument("--labels", required=True)
    m.set_defaults(func=cmd_metrics)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except AuditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
