"""Motion kernels, synthetic pairs, and PGM/PPM round trips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdeblur.data_synth import (
    Dataset,
    DatasetConfig,
    ImageFormatError,
    blur,
    generate_dataset,
    load_dataset,
    make_motion_kernel,
    read_image,
    save_dataset,
    write_image,
)


def test_horizontal_length3_kernel_is_uniform():
    k = make_motion_kernel(3.0, 0.0)
    row = k.taps[k.radius]
    np.testing.assert_allclose(
        row[k.radius - 1:k.radius + 2], [1 / 3, 1 / 3, 1 / 3], rtol=1e-12)
    assert k.taps.sum() == pytest.approx(1.0)


def test_length_one_kernel_is_identity():
    k = make_motion_kernel(1.0, 1.2)
    assert k.taps.shape == (1, 1)
    assert k.taps[0, 0] == pytest.approx(1.0)


def test_vertical_kernel_transposes_horizontal():
    kh = make_motion_kernel(5.0, 0.0)
    kv = make_motion_kernel(5.0, np.pi / 2)
    np.testing.assert_allclose(kv.taps, kh.taps.T, atol=1e-12)


def test_kernel_rejects_sub_unit_length():
    with pytest.raises(ValueError):
        make_motion_kernel(0.5, 0.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(1.0, 15.0), st.floats(0.0, np.pi))
def test_kernel_properties(length, angle):
    k = make_motion_kernel(length, angle)
    assert (k.taps >= 0.0).all()
    assert k.taps.sum() == pytest.approx(1.0, rel=1e-12)
    assert k.taps.shape[0] == k.taps.shape[1] == 2 * k.radius + 1


def test_blur_preserves_constant_images():
    k = make_motion_kernel(5.0, 0.7)
    img = np.full((3, 16, 16), 0.42)
    out = blur(img, k)
    np.testing.assert_allclose(out, img, atol=1e-12)


def test_blur_identity_kernel_is_noop():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (3, 8, 8))
    out = blur(img, make_motion_kernel(1.0, 0.0))
    np.testing.assert_allclose(out, img, atol=1e-15)


def test_blur_reduces_variance():
    rng = np.random.default_rng(1)
    img = rng.uniform(0, 1, (1, 32, 32))
    out = blur(img, make_motion_kernel(7.0, 0.3))
    assert out.var() < img.var()


def test_write_read_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(2)
    for c in (1, 3):
        img = rng.uniform(0, 1, (c, 9, 7))
        quantized = np.clip(np.floor(img * 255.0 + 0.5), 0, 255) / 255.0
        p = tmp_path / f"img{c}.ppm"
        write_image(p, img)
        back = read_image(p)
        np.testing.assert_array_equal(back, quantized)
        # writing the already-quantized image reproduces the same bytes
        p2 = tmp_path / f"img{c}_again.ppm"
        write_image(p2, back)
        assert p.read_bytes() == p2.read_bytes()


def test_rounding_is_half_up():
    img = np.array([[[0.0, 1.0 / 510.0, 1.0]]])  # 0.5/255 rounds up to 1
    q = np.array([0, 1, 255])
    import io, tempfile, os
    import pdeblur.data_synth as dsm
    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "t.pgm")
        dsm.write_image(p, img)
        back = dsm.read_image(p)
    np.testing.assert_array_equal(np.round(back * 255).astype(int)[0, 0], q)


def test_read_image_error_reporting(tmp_path):
    p = tmp_path / "bad.pgm"
    p.write_bytes(b"P7\n2 2\n255\n....")
    with pytest.raises(ImageFormatError, match="magic"):
        read_image(p)
    p.write_bytes(b"P5\n2 2\n255\nab")  # truncated payload
    with pytest.raises(ImageFormatError, match="truncated payload"):
        read_image(p)
    p.write_bytes(b"P5\n2 2\n65535\n" + b"\0" * 8)
    with pytest.raises(ImageFormatError, match="max value"):
        read_image(p)
    p.write_bytes(b"P5\n2")
    with pytest.raises(ImageFormatError, match="byte offset"):
        read_image(p)


def test_read_image_skips_comments(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# a comment\n2 1\n255\n\x00\xff")
    img = read_image(p)
    np.testing.assert_allclose(img, [[[0.0, 1.0]]])


def test_generate_dataset_deterministic_and_disjoint():
    cfg = DatasetConfig(n_train=4, n_val=2, n_test=2, size=16, seed=9)
    a = generate_dataset(cfg)
    b = generate_dataset(cfg)
    for split in ("train", "val", "test"):
        for sa, sb in zip(a.split(split), b.split(split)):
            np.testing.assert_array_equal(sa.sharp, sb.sharp)
            np.testing.assert_array_equal(sa.blurred, sb.blurred)
    # train and val draw from disjoint index streams
    assert not np.array_equal(a.train[0].sharp, a.val[0].sharp)


def test_sample_ranges_and_blur_params():
    cfg = DatasetConfig(n_train=6, n_val=0, n_test=0, size=16,
                        blur_len_min=3.0, blur_len_max=9.0, seed=4)
    ds = generate_dataset(cfg)
    for s in ds.train:
        assert s.sharp.min() >= 0.0 and s.sharp.max() <= 1.0
        assert s.blurred.min() >= 0.0 and s.blurred.max() <= 1.0
        assert 3.0 <= s.kernel_length <= 9.0
        assert 0.0 <= s.noise_sigma <= cfg.noise_sigma_max


def test_save_load_roundtrip(tmp_path):
    cfg = DatasetConfig(n_train=3, n_val=1, n_test=1, size=16, seed=2)
    ds = generate_dataset(cfg)
    save_dataset(tmp_path, ds)
    back = load_dataset(tmp_path)
    assert back.config == cfg
    for split in ("train", "val", "test"):
        assert len(back.split(split)) == len(ds.split(split))
        for sa, sb in zip(ds.split(split), back.split(split)):
            # on-disk images are 8-bit quantized versions of the originals
            assert np.max(np.abs(sa.sharp - sb.sharp)) <= 0.5 / 255.0 + 1e-12
            assert sa.kernel_length == sb.kernel_length


def test_save_is_idempotent(tmp_path):
    cfg = DatasetConfig(n_train=2, n_val=1, n_test=1, size=16, seed=3)
    ds = generate_dataset(cfg)
    d1 = tmp_path / "a"
    d2 = tmp_path / "b"
    save_dataset(d1, ds)
    save_dataset(d2, ds)
    for rel in sorted(p.relative_to(d1) for p in d1.rglob("*") if p.is_file()):
        assert (d1 / rel).read_bytes() == (d2 / rel).read_bytes()
