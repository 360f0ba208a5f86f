import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tcae import _kernels, data
from tcae.metrics import fit_linear_probe
from tcae.rng import Stream


def record(label, fill=0):
    return bytes([label]) + bytes([fill]) * 3072


def test_single_white_record(tmp_path):
    p = tmp_path / "one.bin"
    p.write_bytes(record(7, 255))
    ds = data.load_cifar_binary(p)
    assert len(ds) == 1 and ds.labels[0] == 7
    assert ds.images.shape == (1, 3, 32, 32) and (ds.images == 255).all()


def test_record_count_and_planar_order():
    blob = bytearray()
    for i in range(10_000):
        blob += record(i % 10)
    ds = data.parse_cifar_bytes(bytes(blob))
    assert len(ds) == 10_000
    # planar layout: bytes 1..1024 red, next 1024 green, last 1024 blue
    rec = bytes([3]) + bytes(range(256)) * 12
    img = data.parse_cifar_bytes(rec).images[0]
    flat = np.frombuffer(rec[1:], np.uint8)
    np.testing.assert_array_equal(img[0].reshape(-1), flat[:1024])
    np.testing.assert_array_equal(img[2].reshape(-1), flat[2048:])


def test_bad_label_rejected():
    with pytest.raises(data.DataError):
        data.parse_cifar_bytes(record(11))


def test_truncated_file_rejected():
    with pytest.raises(data.DataError):
        data.parse_cifar_bytes(record(1)[:-1])


def test_cifar_split_layout(tmp_path):
    root = tmp_path / "cifar-10-batches-bin"
    root.mkdir()
    for i in range(1, 6):
        (root / f"data_batch_{i}.bin").write_bytes(record(i) * 2)
    (root / "test_batch.bin").write_bytes(record(0) * 3)
    assert len(data.load_cifar_split(tmp_path, "train")) == 10
    assert len(data.load_cifar_split(tmp_path, "test")) == 3


def test_cifar_needs_data_dir(monkeypatch):
    monkeypatch.delenv("TCAE_DATA_DIR", raising=False)
    with pytest.raises(data.DataError):
        data.load_dataset("cifar10", "train")


def test_model_space_endpoints_and_round_trip():
    b = np.arange(256, dtype=np.uint8)
    x = data.to_model_space(b)
    assert x[0] == -1.0 and x[255] == 1.0
    back = data.from_model_space(x)
    assert np.abs(back.astype(int) - b).max() * (1 / 255) <= 1 / 255
    assert np.abs((x + 1) * 127.5 - b).max() <= 1 / 255 * 127.5


# -- crops -------------------------------------------------------------------------

def test_full_frame_crop_is_identity():
    img = Stream(0).standard_normal((3, 12, 12)).astype(np.float32)
    out, box = data.random_resized_crop(img, (1.0, 1.0), 12, Stream(1), ratio=(1.0, 1.0))
    assert box == (0.0, 0.0, 12.0, 12.0)
    np.testing.assert_allclose(out, img, atol=1e-6)


def test_crop_deterministic():
    img = Stream(0).standard_normal((3, 16, 16)).astype(np.float32)
    a, _ = data.random_resized_crop(img, (0.2, 0.8), 8, Stream(5))
    b, _ = data.random_resized_crop(img, (0.2, 0.8), 8, Stream(5))
    np.testing.assert_array_equal(a, b)


def test_constant_image_resizes_to_constant():
    img = np.full((3, 10, 10), 0.37, np.float32)
    out, _ = data.random_resized_crop(img, (0.1, 0.9), 7, Stream(2))
    np.testing.assert_allclose(out, 0.37, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_crop_box_within_image(seed, a, b):
    lo, hi = sorted((a, b))
    top, left, ch, cw = data.sample_crop_box(20, 24, (lo, hi), Stream(seed))
    assert top >= 0 and left >= 0 and top + ch <= 20 + 1e-9 and left + cw <= 24 + 1e-9


def _bilinear_oracle(img, top, left, ch, cw, oh, ow):
    c, h, w = img.shape
    out = np.zeros((c, oh, ow))
    for i in range(oh):
        for j in range(ow):
            y = top + (i + 0.5) * ch / oh - 0.5
            x = left + (j + 0.5) * cw / ow - 0.5
            y = min(max(y, 0.0), h - 1.0)
            x = min(max(x, 0.0), w - 1.0)
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = y - y0, x - x0
            out[:, i, j] = ((1 - fy) * (1 - fx) * img[:, y0, x0] + (1 - fy) * fx * img[:, y0, x1]
                            + fy * (1 - fx) * img[:, y1, x0] + fy * fx * img[:, y1, x1])
    return out


@pytest.mark.parametrize("seed", range(5))
def test_bilinear_matches_direct_oracle(seed):
    rng = Stream(seed)
    img = rng.standard_normal((3, 8, 8)).astype(np.float32)
    top, left = rng.uniform(0, 2, size=2)
    ch, cw = rng.uniform(4, 6, size=2)
    out = _kernels.bilinear_sample(img, top, left, ch, cw, 5, 5)
    ref = _bilinear_oracle(img.astype(np.float64), top, left, ch, cw, 5, 5)
    np.testing.assert_allclose(out, ref, atol=1e-5)


def test_jitter_bounds():
    img = Stream(0).uniform(-1, 1, (3, 8, 8)).astype(np.float32)
    out = data.color_jitter(img, 0.2, Stream(1))
    assert out.dtype == np.float32 and out.min() >= -1 and out.max() <= 1
    assert data.color_jitter(img, 0.0, Stream(1)) is img


# -- synthetic / iteration --------------------------------------------------------------

def test_synthetic_is_deterministic_and_balanced():
    a = data.make_synthetic(50)
    b = data.make_synthetic(50)
    np.testing.assert_array_equal(a.images, b.images)
    assert np.bincount(a.labels, minlength=10).tolist() == [5] * 10
    c = data.make_synthetic(50, split="val")
    assert not np.array_equal(a.images, c.images)


def test_epoch_order_reproducible():
    np.testing.assert_array_equal(data.epoch_order(100, 3, 2), data.epoch_order(100, 3, 2))
    assert not np.array_equal(data.epoch_order(100, 3, 2), data.epoch_order(100, 3, 3))
    ds = data.make_synthetic(20)
    got = [lab.tolist() for _, lab in data.batches(ds, 8, 1, 0)]
    again = [lab.tolist() for _, lab in data.batches(ds, 8, 1, 0)]
    assert got == again and len(got) == 2


def test_synthetic_pooled_pixels_separable():
    tr = data.make_synthetic(2000, data.SyntheticSpec(seed=0), "train")
    va = data.make_synthetic(500, data.SyntheticSpec(seed=0), "val")
    acc = fit_linear_probe(data.pooled_pixels(tr.images), tr.labels,
                           (data.pooled_pixels(va.images), va.labels))
    assert acc >= 0.95
