import numpy as np
import pytest

from trifield import io


def test_pfm_round_trip_gray(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.normal(size=(7, 5)).astype(np.float32)
    path = tmp_path / "map.pfm"
    io.write_pfm(path, data)
    back = io.read_pfm(path)
    assert back.shape == (7, 5)
    assert np.array_equal(back, data.astype(np.float64))


def test_pfm_round_trip_color(tmp_path):
    rng = np.random.default_rng(1)
    data = rng.normal(size=(4, 6, 3)).astype(np.float32)
    path = tmp_path / "map.pfm"
    io.write_pfm(path, data)
    assert np.array_equal(io.read_pfm(path), data.astype(np.float64))


def test_depth_pfm_inf_sentinel(tmp_path):
    depth = np.array([[1.0, np.inf], [2.5, 3.0]])
    path = tmp_path / "depth.pfm"
    io.write_depth_pfm(path, depth)
    raw = io.read_pfm(path)
    assert raw[0, 1] == pytest.approx(io.DEPTH_INF_SENTINEL, rel=1e-6)
    back = io.read_depth_pfm(path)
    assert np.isinf(back[0, 1])
    assert back[1, 0] == pytest.approx(2.5)


def test_pfm_rejects_bad_shapes(tmp_path):
    with pytest.raises(ValueError):
        io.write_pfm(tmp_path / "x.pfm", np.zeros((2, 2, 4)))


def test_pfm_rejects_non_pfm(tmp_path):
    path = tmp_path / "bad.pfm"
    path.write_bytes(b"hello world")
    with pytest.raises(ValueError):
        io.read_pfm(path)


def test_png_image_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    image = rng.uniform(size=(9, 11, 3))
    path = tmp_path / "img.png"
    io.write_image_png(path, image)
    back = io.read_image_png(path)
    assert back.shape == image.shape
    assert np.abs(back - image).max() <= 0.5 / 255 + 1e-9  # 8-bit quantization


def test_png_mask_round_trip(tmp_path):
    mask = np.array([[True, False], [False, True]])
    path = tmp_path / "mask.png"
    io.write_mask_png(path, mask)
    assert np.array_equal(io.read_mask_png(path), mask)


def test_kv_parse_and_format():
    text = "# comment\nalpha = 1.5\nname = hello there\nflag = true  # trailing\n\n"
    kv = io.parse_kv_text(text)
    assert kv == {"alpha": "1.5", "name": "hello there", "flag": "true"}
    round_tripped = io.parse_kv_text(io.format_kv({"a": 1, "b": 2.5, "c": True, "d": "x y"}))
    assert round_tripped == {"a": "1", "b": "2.5", "c": "true", "d": "x y"}


def test_kv_rejects_garbage():
    with pytest.raises(ValueError):
        io.parse_kv_text("this is not a pair\n")


def test_kv_helpers():
    assert io.kv_bool("TRUE") and not io.kv_bool("0")
    with pytest.raises(ValueError):
        io.kv_bool("maybe")
    assert io.kv_floats("1 2.5 -3") == (1.0, 2.5, -3.0)
