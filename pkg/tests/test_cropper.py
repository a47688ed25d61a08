import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import loop_crop
from shortcut_audit.cropper import (
    CropSpec,
    derive_crop_dataset,
    extract_patch,
    region_offset,
    resize_bilinear,
    to_probe_input,
)
from shortcut_audit.data import CROP_REGIONS, ImageTensor, Item, LabeledDataset, decode_image, encode_png, load_manifest
from shortcut_audit.errors import ImageTooSmall, IoFailure, UnsupportedChannelCount

from conftest import make_dataset


@pytest.mark.parametrize(
    "region,h,w,expected",
    [
        ("center", 28, 28, (4, 4)),
        ("bottom_right", 224, 224, (204, 204)),
        ("upper_left", 50, 60, (0, 0)),
        ("upper_right", 50, 60, (0, 40)),
        ("bottom_left", 50, 60, (30, 0)),
        ("center", 51, 60, (15, 20)),
    ],
)
def test_region_offset(region, h, w, expected):
    assert region_offset(region, h, w, CropSpec()) == expected


def test_region_offset_too_small():
    with pytest.raises(ImageTooSmall):
        region_offset("upper_left", 16, 64, CropSpec())


def test_crop_spec_validation():
    with pytest.raises(ValueError):
        CropSpec(0, 20)


def test_constant_image_gives_constant_patch():
    img = ImageTensor(np.full((3, 30, 40), 0.25, dtype=np.float32))
    for region in CROP_REGIONS:
        patch = extract_patch(img, region, CropSpec())
        assert patch.data.shape == (3, 20, 20)
        assert np.all(patch.data == np.float32(0.25))


def test_ramp_center_patch():
    y, x = np.mgrid[0:28, 0:28]
    img = ImageTensor(((28 * y + x) / 1024.0)[None].astype(np.float64))
    patch = extract_patch(img, "center", CropSpec())
    assert patch.data[0, 0, 0] == (28 * 4 + 4) / 1024.0


def test_patch_matches_nested_loop_copy():
    rng = np.random.default_rng(0)
    img = ImageTensor(rng.random((3, 64, 64)))
    spec = CropSpec()
    for region in CROP_REGIONS:
        y0, x0 = region_offset(region, 64, 64, spec)
        expected = np.array(loop_crop(img.data, y0, x0, 20, 20))
        assert np.array_equal(extract_patch(img, region, spec).data, expected)


def test_patch_size_image_collapses_all_regions():
    img = ImageTensor(np.random.default_rng(1).random((1, 20, 20)))
    for region in CROP_REGIONS:
        assert extract_patch(img, region, CropSpec()) == img


def test_derive_crop_dataset_round_trip(tmp_path):
    ds = make_dataset(tmp_path / "src", [0, 1, 0, 1, 1], size=33)
    out = tmp_path / "crops"
    for region in CROP_REGIONS:
        derived = derive_crop_dataset(ds, region, CropSpec(), out)
        assert derived.region_tag == region
        assert [(i.image_id, i.label) for i in derived.items] == [(i.image_id, i.label) for i in ds.items]
        for src, dst in zip(ds.items, derived.items):
            expected = encode_png(extract_patch(decode_image(src.source), region, CropSpec()))
            assert dst.source.read_bytes() == expected
        m = load_manifest(out / region / "manifest.csv", "csv")
        assert len(m.rows) == 5
    assert len(list(out.glob("*/*.png"))) == 25


def test_derive_refuses_to_overwrite(tmp_path):
    ds = make_dataset(tmp_path / "src", [0, 1], size=20)
    (tmp_path / "out" / "center").mkdir(parents=True)
    (tmp_path / "out" / "center" / "img000.png").write_bytes(b"old")
    with pytest.raises(IoFailure):
        derive_crop_dataset(ds, "center", CropSpec(), tmp_path / "out")
    derived = derive_crop_dataset(ds, "center", CropSpec(), tmp_path / "out", overwrite=True)
    assert decode_image(derived.items[0].source).data.shape == (3, 20, 20)


def test_derive_reports_small_image(tmp_path):
    ds = make_dataset(tmp_path / "src", [0, 1], size=12)
    with pytest.raises(ImageTooSmall, match="img000"):
        derive_crop_dataset(ds, "upper_left", CropSpec(), tmp_path / "out")


def test_derive_780_items_keeps_histogram(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    png = encode_png(np.full((1, 20, 20), 0.5))
    items = []
    for i in range(780):
        (src / f"{i}.png").write_bytes(png)
        items.append(Item(f"b{i:03d}", src / f"{i}.png", int(i < 210)))
    ds = LabeledDataset(tuple(items), "breast")
    derived = derive_crop_dataset(ds, "bottom_left", CropSpec(), tmp_path / "out", workers=4)
    assert len(derived) == 780
    assert derived.label_counts() == ds.label_counts()
    assert derived.ids == ds.ids


def test_resize_identity_and_constant():
    img = ImageTensor(np.random.default_rng(2).random((3, 7, 9)))
    assert resize_bilinear(img, 7, 9) == img
    const = ImageTensor(np.full((1, 5, 5), 0.3))
    for size in [(1, 1), (3, 8), (17, 4)]:
        out = resize_bilinear(const, *size)
        np.testing.assert_allclose(out.data, 0.3, rtol=0, atol=1e-15)


def test_resize_checkerboard_block_means():
    board = (np.indices((4, 4)).sum(axis=0) % 2).astype(np.float64)
    board[2:, 2:] *= 0.5
    out = resize_bilinear(ImageTensor(board[None]), 2, 2)
    # half-pixel centres: output (i, j) samples input (2i + 0.5, 2j + 0.5), equal weights on its 2x2 block
    expected = np.array([[board[2 * i : 2 * i + 2, 2 * j : 2 * j + 2].mean() for j in range(2)] for i in range(2)])
    np.testing.assert_allclose(out.data[0], expected, rtol=0, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 30), st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_resize_stays_within_input_range(h, w, oh, ow, seed):
    img = ImageTensor(np.random.default_rng(seed).random((2, h, w)))
    out = resize_bilinear(img, oh, ow)
    assert out.data.shape == (2, oh, ow)
    assert out.data.min() >= img.data.min()
    assert out.data.max() <= img.data.max()


def test_to_probe_input():
    gray = ImageTensor(np.random.default_rng(3).random((1, 20, 20)))
    rgb = to_probe_input(gray)
    assert rgb.data.shape == (3, 20, 20)
    assert all(np.array_equal(rgb.data[c], gray.data[0]) for c in range(3))
    three = ImageTensor(np.zeros((3, 20, 20)))
    assert to_probe_input(three) is three
    with pytest.raises(UnsupportedChannelCount):
        to_probe_input(ImageTensor(np.zeros((4, 20, 20))))
