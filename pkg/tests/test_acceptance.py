"""Acceptance gate: one pass/fail line per criterion in the terminal summary.

The slow end-to-end criteria (planted bias, null control, signal control)
train full-size probes and take several minutes each on one CPU core.
"""

import json
import os
import time
from dataclasses import replace
from pathlib import Path

import mpmath
import numpy as np
import pytest

from oracles import brute_metrics, loop_crop
from shortcut_audit.audit import NOT_FLAGGED, AuditConfig, render_report_json, run_audit
from shortcut_audit.cli import main
from shortcut_audit.cropper import CropSpec, extract_patch, region_offset
from shortcut_audit.data import CROP_REGIONS, ClassMapping, ImageTensor
from shortcut_audit.metrics import ConfusionMatrix, binomial_exceedance, binomial_interval, metric_set
from shortcut_audit.probe import ProbeConfig, init_params, loss_and_grad
from shortcut_audit.sampling import SeededRng
from shortcut_audit.synthgen import SYNTH_MAPPING, BiasSpec, LesionSpec, SceneSpec, generate

CORNERS = tuple(r for r in CROP_REGIONS if r != "center")


def test_c1_gradient_correctness(acceptance_log):
    t0 = time.time()
    # pooled_grid 3 keeps the net under 2,000 parameters (1,610)
    cfg = ProbeConfig(conv_widths=(4, 8), fc_width=16, pooled_grid=3)
    params = init_params(cfg, SeededRng(1), np.float64)
    rng = np.random.default_rng(1)
    x, y = rng.random((8, 3, 20, 20)), rng.integers(0, 2, 8)
    _, grad = loss_and_grad(params, x, y)
    h, worst = 1e-5, 0.0
    for i in rng.choice(len(params), 200, replace=False):
        v = params.vector.copy()
        v[i] += h
        lp, _ = loss_and_grad(params.with_vector(v), x, y)
        v[i] -= 2 * h
        lm, _ = loss_and_grad(params.with_vector(v), x, y)
        num = (lp - lm) / (2 * h)
        worst = max(worst, abs(num - grad[i]) / max(abs(num), abs(grad[i]), 1e-8))
    elapsed = time.time() - t0
    ok = len(params) <= 2000 and worst < 1e-4 and elapsed < 60
    acceptance_log("C1 gradient correctness", ok, f"params={len(params)} max_rel_err={worst:.2e} time={elapsed:.1f}s")
    assert ok


def _synth(out, scene, bias, seed=42):
    generate(scene, bias, SeededRng(seed), out)
    return AuditConfig(data=str(out), format="dirs", mapping=SYNTH_MAPPING)


def test_c2_planted_bias_detection(tmp_path, acceptance_log):
    t0 = time.time()
    cfg = _synth(tmp_path, SceneSpec(n_per_class=1000), BiasSpec(background_brightness_delta=(0.0, 16 / 255)))
    report = run_audit(cfg)
    elapsed = time.time() - t0
    crops = [report.result(r) for r in CROP_REGIONS]
    ok = (
        report.verdict == "biased"
        and all(r.flagged for r in crops)
        and all(r.test_metrics.accuracy >= 0.90 for r in crops)
        and all(r.p_value_majority < 1e-6 for r in crops)
        and elapsed < 600
    )
    detail = " ".join(f"{r.region}={r.test_metrics.accuracy:.3f}/p={r.p_value_majority:.1e}" for r in crops)
    acceptance_log("C2 planted-bias detection", ok, f"{detail} time={elapsed:.0f}s")
    assert ok


NULL_SEEDS = tuple(range(42, 52))


def test_c3_null_control(tmp_path, acceptance_log):
    # the verdict only depends on crop regions, so the original arm is not trained here
    not_flagged, outside = 0, []
    for seed in NULL_SEEDS:
        cfg = _synth(tmp_path / str(seed), SceneSpec(n_per_class=1000), BiasSpec(), seed=seed)
        cfg = replace(cfg, seeds=(seed,), regions=CROP_REGIONS)
        report = run_audit(cfg)
        not_flagged += report.verdict == NOT_FLAGGED
        for r in report.results:
            lo, hi = binomial_interval(r.test_confusion.total, r.baselines.majority_rate)
            if not lo <= r.test_metrics.accuracy <= hi:
                outside.append(f"{seed}:{r.region}={r.test_metrics.accuracy:.3f}")
    ok = not_flagged >= 9 and not outside
    acceptance_log("C3 null control", ok, f"not_flagged={not_flagged}/10 outside_95%={outside or 'none'}")
    assert ok


def test_c4_signal_without_shortcut(tmp_path, acceptance_log):
    lesions = (LesionSpec(radius_range=(3, 5)), LesionSpec(radius_range=(7, 10)))
    cfg = _synth(tmp_path, SceneSpec(n_per_class=1000, lesion=lesions), BiasSpec())
    cfg = replace(cfg, regions=("original",) + CORNERS)
    report = run_audit(cfg)
    orig = report.result("original").test_metrics.accuracy
    corner_flags = {r: report.result(r).flagged for r in CORNERS}
    ok = orig >= 0.85 and not any(corner_flags.values())
    acceptance_log("C4 signal without shortcut", ok, f"original={orig:.3f} corner_flags={corner_flags}")
    assert ok


def _mp_tails(n, p0):
    """All upper tails P[X >= k], k = 0..n, summed at 50 digits."""
    with mpmath.workdps(50):
        p = mpmath.mpf(p0)
        pmf = [mpmath.binomial(n, j) * p**j * (1 - p) ** (n - j) for j in range(n + 1)]
        tails, acc = [0] * (n + 1), mpmath.mpf(0)
        for k in range(n, -1, -1):
            acc += pmf[k]
            tails[k] = acc
        return tails


def test_c5_oracle_equivalence(acceptance_log):
    mismatches = 0
    for total in range(1, 51):
        for tp in range(total + 1):
            for fp in range(total - tp + 1):
                for fn in range(total - tp - fp + 1):
                    tn = total - tp - fp - fn
                    m = metric_set(ConfusionMatrix(tp, fp, fn, tn))
                    if (m.accuracy, m.precision, m.recall, m.f1) != tuple(map(float, brute_metrics(tp, fp, fn, tn))):
                        mismatches += 1

    worst = 0.0
    for p0 in (0.5, 0.6286):
        for n in range(1, 201):
            tails = _mp_tails(n, p0)
            for k in range(n + 1):
                exact = tails[k]
                worst = max(worst, float(abs(mpmath.mpf(binomial_exceedance(k, n, p0)) - exact) / exact))

    rng = np.random.default_rng(5)
    crop_bad = 0
    for _ in range(100):
        h, w = rng.integers(20, 90, 2)
        img = ImageTensor(rng.random((3, h, w)).astype(np.float32))
        for region in CROP_REGIONS:
            y0, x0 = region_offset(region, h, w)
            expected = np.array(loop_crop(img.data, y0, x0, 20, 20), dtype=np.float32)
            crop_bad += not np.array_equal(extract_patch(img, region, CropSpec()).data, expected)

    ok = mismatches == 0 and worst < 1e-10 and crop_bad == 0
    acceptance_log("C5 oracle equivalence", ok,
                   f"metric_mismatches={mismatches} binomial_max_rel={worst:.1e} crop_mismatches={crop_bad}")
    assert ok


def test_c6_cli_determinism(tmp_path, acceptance_log):
    (tmp_path / "synth.json").write_text(json.dumps({"scene": {"n_per_class": 60},
                                                      "bias": {"background_brightness_delta": [0.0, 0.0625]}}))
    assert main(["synth", "--config", str(tmp_path / "synth.json"), "--out", str(tmp_path / "data")]) == 0
    flags = ["audit", "--data", str(tmp_path / "data"), "--epochs", "3", "--seeds", "42,43"]
    regions = ["original", "upper_left", "center", "bottom_right"]
    codes = [
        main(flags + ["--regions", ",".join(regions), "--out", str(tmp_path / "a")]),
        main(flags + ["--regions", ",".join(regions), "--out", str(tmp_path / "b")]),
        main(flags + ["--regions", ",".join(reversed(regions)), "--out", str(tmp_path / "c")]),
    ]
    a, b, c = (tmp_path / n / "report.json" for n in "abc")
    identical = a.read_bytes() == b.read_bytes()

    def numeric(path):
        obj = json.loads(path.read_text())
        by_key = {(r["seed"], r["region"]): r for r in obj["results"]}
        deltas = {(d["seed"], d["region"]): d for d in obj["accuracy_deltas"]}
        return by_key, deltas, obj["region_flags"], obj["verdict"]

    same_numbers = numeric(a) == numeric(c)
    ok = codes == [0, 0, 0] and identical and same_numbers
    acceptance_log("C6 determinism", ok, f"byte_identical={identical} permuted_regions_equal={same_numbers}")
    assert ok


BREASTMNIST = os.environ.get("SHORTCUT_AUDIT_BREASTMNIST")


def test_c7_breastmnist_qualitative(tmp_path, acceptance_log):
    if not BREASTMNIST:
        acceptance_log("C7 BreastMNIST qualitative", None,
                       "set SHORTCUT_AUDIT_BREASTMNIST to a class-per-directory export to run")
        pytest.skip("BreastMNIST not supplied")
    root = Path(BREASTMNIST)
    mapping_file = root / "mapping.json"
    mapping = (ClassMapping.from_json(mapping_file.read_text()) if mapping_file.exists()
               else ClassMapping.from_sets(["malignant"], ["benign", "normal"]))
    report = run_audit(AuditConfig(data=str(root), format="dirs", mapping=mapping), cache_dir=tmp_path)
    (tmp_path / "report.json").write_bytes(render_report_json(report))
    flagged = [r.region for r in report.results if r.region in CROP_REGIONS and r.flagged]
    best = max(report.result(r).test_metrics.accuracy for r in CROP_REGIONS)
    ok = bool(flagged)
    acceptance_log("C7 BreastMNIST qualitative", ok,
                   f"n={report.dataset['n_items']} flagged={flagged} best_crop_accuracy={best:.4f}")
    assert ok
