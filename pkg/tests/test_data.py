import json

import numpy as np
import pytest
from PIL import Image

from fgin import ops
from fgin.data import (Cube, NormRecord, PatchSet, degrade, denormalize, export_band_png, extract_patches,
                       header_path, holdout_rect, normalize, read_cube, read_raw, write_cube)
from fgin.errors import ConfigError, DataError
from fgin.synthetic import synthetic_cube


def test_roundtrip_2x2x1(tmp_path):
    cube = Cube(np.array([[[0.0], [0.25]], [[0.5], [1.0]]], dtype=np.float32), NormRecord(-3.0, 7.5))
    write_cube(cube, tmp_path / "c")
    back = read_cube(tmp_path / "c")
    np.testing.assert_array_equal(back.values, cube.values)
    assert back.norm == cube.norm


def test_roundtrip_bitwise(tmp_path):
    cube = synthetic_cube(9, 7, 5, seed=2)
    write_cube(cube, tmp_path / "c")
    back = read_cube(tmp_path / "c")
    assert back.values.tobytes() == cube.values.tobytes()


def test_payload_is_band_sequential(tmp_path):
    vals = np.random.default_rng(0).random((2, 3, 4)).astype(np.float32)
    write_cube(Cube(vals), tmp_path / "c")
    raw = np.frombuffer((tmp_path / "c").read_bytes(), dtype="<f4")
    np.testing.assert_array_equal(raw[:6], vals[:, :, 0].ravel())


def test_truncated_payload(tmp_path):
    write_cube(synthetic_cube(4, 4, 3), tmp_path / "c")
    data = (tmp_path / "c").read_bytes()
    (tmp_path / "c").write_bytes(data[:-4])
    with pytest.raises(DataError, match="expected 192 bytes, got 188"):
        read_cube(tmp_path / "c")


def test_header_band_mismatch(tmp_path):
    write_cube(synthetic_cube(3, 3, 102), tmp_path / "c")
    hp = header_path(tmp_path / "c")
    h = json.loads(hp.read_text())
    h["bands"] = 103
    hp.write_text(json.dumps(h))
    with pytest.raises(DataError, match="length mismatch"):
        read_cube(tmp_path / "c")


@pytest.mark.parametrize("field,value", [("dtype", "f64"), ("interleave", "bip")])
def test_header_bad_fields(tmp_path, field, value):
    write_cube(synthetic_cube(3, 3, 2), tmp_path / "c")
    hp = header_path(tmp_path / "c")
    h = json.loads(hp.read_text())
    h[field] = value
    hp.write_text(json.dumps(h))
    with pytest.raises(DataError):
        read_cube(tmp_path / "c")


def test_header_missing_field(tmp_path):
    write_cube(synthetic_cube(3, 3, 2), tmp_path / "c")
    hp = header_path(tmp_path / "c")
    h = json.loads(hp.read_text())
    del h["norm"]
    hp.write_text(json.dumps(h))
    with pytest.raises(DataError, match="norm"):
        read_cube(tmp_path / "c")


def test_normalize_endpoints():
    raw = np.arange(256.0).reshape(16, 16, 1)
    cube = normalize(raw)
    assert cube.values.min() == 0.0 and cube.values.max() == 1.0
    assert cube.norm == NormRecord(0.0, 255.0)


def test_normalize_identity_on_unit_range():
    x = np.random.default_rng(0).random((4, 4, 3))
    x[0, 0, 0], x[1, 1, 1] = 0.0, 1.0
    np.testing.assert_allclose(normalize(x).values, x, atol=1e-7)


def test_denormalize_inverse():
    raw = np.random.default_rng(1).uniform(200, 9000, (5, 5, 4))
    np.testing.assert_allclose(denormalize(normalize(raw)), raw, rtol=1e-6)


def test_normalize_is_global():
    raw = np.stack([np.full((2, 2), 10.0), np.full((2, 2), 20.0)], axis=-1)
    raw[0, 0, 0] = 0.0
    v = normalize(raw).values
    assert v[1, 1, 0] == pytest.approx(0.5) and v[1, 1, 1] == pytest.approx(1.0)


def test_degenerate_range():
    with pytest.raises(DataError, match="degenerate dynamic range"):
        normalize(np.full((3, 3, 2), 4.0))


def test_read_raw_layouts(tmp_path):
    vals = np.random.default_rng(0).random((3, 4, 5)).astype("<f4")
    vals.transpose(2, 0, 1).tofile(tmp_path / "bsq")
    vals.tofile(tmp_path / "bip")
    np.testing.assert_array_equal(read_raw(tmp_path / "bsq", 3, 4, 5, "bsq"), vals)
    np.testing.assert_array_equal(read_raw(tmp_path / "bip", 3, 4, 5, "bip"), vals)
    with pytest.raises(DataError):
        read_raw(tmp_path / "bip", 3, 4, 6, "bip")
    with pytest.raises(DataError):
        read_raw(tmp_path / "bip", 3, 4, 5, "bil")


# ---------------------------------------------------------------- patches

def test_288_tiling_top_left():
    ps = extract_patches(np.zeros((288, 288, 2), dtype=np.float32), 2, "top-left", val_fraction=0.0)
    assert [p.rect for p in ps.by_role("test")] == [(0, 0, 144, 144)]
    assert sorted(p.rect[:2] for p in ps.by_role("train")) == [(0, 144), (144, 0), (144, 144)]


def test_bottom_center_anchor():
    assert holdout_rect(1096, 715, "bottom-center") == (952, 285, 144, 144)
    assert holdout_rect(1096, 715, "paviac") == holdout_rect(1096, 715, "bottom-center")
    assert holdout_rect(300, 300, (10, 20)) == (10, 20, 144, 144)
    with pytest.raises(ConfigError):
        holdout_rect(300, 300, (200, 0))
    with pytest.raises(ConfigError):
        holdout_rect(300, 300, "middle")


@pytest.mark.parametrize("s", [2, 4, 8])
def test_lr_is_area_downsample_bitwise(s):
    cube = synthetic_cube(300, 290, 3, seed=4)
    ps = extract_patches(cube, s, "bottom-center")
    for p in ps.patches:
        assert p.hr.shape == (144, 144, 3)
        assert p.lr.shape == (144 // s, 144 // s, 3)
        assert p.lr.tobytes() == ops.area_downsample(p.hr[None], s)[0].tobytes()
        assert p.scale == s


def test_validation_split():
    ps = extract_patches(np.zeros((144 * 5, 144 * 4, 1), dtype=np.float32), 2, val_fraction=0.1, seed=3)
    assert len(ps.by_role("train")) + len(ps.by_role("validation")) == 19
    assert len(ps.by_role("validation")) == 2


def test_extract_errors():
    with pytest.raises(DataError):
        extract_patches(np.zeros((143, 300, 1), dtype=np.float32), 2)
    with pytest.raises(ConfigError):
        extract_patches(np.zeros((200, 200, 1), dtype=np.float32), 3)


def test_degrade_protocol():
    hr = np.random.default_rng(0).random((144, 144, 2))
    assert degrade(hr, 8).shape == (18, 18, 2)
    np.testing.assert_allclose(degrade(degrade(hr, 2), 2), degrade(hr, 4), rtol=1e-12)
    np.testing.assert_allclose(degrade(np.full((16, 16, 1), 0.7), 4), 0.7)


def test_patchset_from_pairs():
    hr = np.random.default_rng(0).random((8, 8, 2))
    ps = PatchSet.from_pairs([hr], 2)
    assert ps.lr("train")[0].shape == (4, 4, 2)
    with pytest.raises(ValueError):
        ps.by_role("holdout")


# ---------------------------------------------------------------- png

@pytest.mark.parametrize("value,pixel", [(1.0, 255), (0.0, 0), (0.5, 128)])
def test_png_quantization(tmp_path, value, pixel):
    export_band_png(np.full((3, 3, 2), value), 1, tmp_path / "b.png")
    img = np.asarray(Image.open(tmp_path / "b.png"))
    assert img.shape == (3, 3) and np.all(img == pixel)


def test_png_rgb_and_range(tmp_path):
    vals = np.zeros((2, 2, 4))
    vals[..., 3] = 1.0
    export_band_png(vals, [3, 0, 3], tmp_path / "rgb.png")
    img = np.asarray(Image.open(tmp_path / "rgb.png"))
    assert img.shape == (2, 2, 3)
    assert list(img[0, 0]) == [255, 0, 255]
    with pytest.raises(DataError):
        export_band_png(vals, 4, tmp_path / "x.png")
