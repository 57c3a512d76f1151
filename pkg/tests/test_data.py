from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from fc2n.data import (
    PatchPair,
    TrainingSet,
    augment,
    bicubic_resize,
    crop_to_multiple,
    dihedral,
    dihedral_inverse,
    downsample,
    extract_patch_pair,
    find_paired_lr,
    list_images,
    load_image,
    prefetch,
    quantize,
    rgb_to_y,
    save_image,
)
from fc2n.errors import DimensionError, ImageFormatError, ImageTooSmallError, UnsupportedDepthError

images = st.integers(0, 2**31 - 1).map(lambda s: np.random.default_rng(s))


# ---------------------------------------------------------------------------
# bicubic resampling


@pytest.mark.parametrize("scale,antialias", [(Fraction(1, 2), True), (Fraction(1, 3), True), (Fraction(1, 4), True),
                                             (Fraction(2), False), (Fraction(3), False), (Fraction(4), False)])
def test_resize_interior_matches_pillow(rng, scale, antialias):
    # Pillow's float bicubic uses the same kernel; edges differ (it renormalizes instead of clamping)
    x = rng.uniform(0, 255, size=(48, 60))
    out = bicubic_resize(x, scale, antialias=antialias)
    ref = np.asarray(Image.fromarray(x.astype(np.float32), "F").resize(out.shape[::-1], Image.BICUBIC))
    m = 8
    np.testing.assert_allclose(out[m:-m, m:-m], ref[m:-m, m:-m], atol=1e-3)


@given(images, st.sampled_from([Fraction(1, 2), Fraction(1, 3), Fraction(2), Fraction(3), Fraction(4)]),
       st.booleans(), st.floats(-300, 300))
@settings(max_examples=40, deadline=None)
def test_resize_partition_of_unity(gen, scale, antialias, value):
    x = np.full((12, 9, 3), value)
    np.testing.assert_allclose(bicubic_resize(x, scale, antialias), value, rtol=0, atol=1e-9)


@given(images, st.sampled_from([Fraction(1, 2), Fraction(1, 4), Fraction(2), Fraction(3)]), st.booleans())
@settings(max_examples=40, deadline=None)
def test_resize_keeps_ramps_monotone(gen, scale, antialias):
    slope = gen.uniform(0.1, 5)
    ramp = np.add.outer(np.zeros(16), slope * np.arange(24.0))
    out = bicubic_resize(ramp, scale, antialias)
    assert np.all(np.diff(out, axis=1) >= -1e-9)
    np.testing.assert_allclose(np.diff(out, axis=0), 0, atol=1e-9)


def test_upscale_reproduces_linear_interior():
    ramp = np.add.outer(np.zeros(10), 3.0 * np.arange(20.0))
    out = bicubic_resize(ramp, 2, antialias=False)
    # output sample j sits at input coordinate (j + 0.5) / 2 - 0.5
    expect = 3.0 * ((np.arange(40) + 0.5) / 2 - 0.5)
    np.testing.assert_allclose(out[5, 6:-6], expect[6:-6], atol=1e-12)


@given(images, st.sampled_from([Fraction(1, 2), Fraction(1, 3), Fraction(2), Fraction(3)]))
@settings(max_examples=30, deadline=None)
def test_resize_equivariance(gen, scale):
    x = gen.uniform(0, 255, size=(12, 18, 3))
    r = bicubic_resize(x, scale)
    np.testing.assert_allclose(bicubic_resize(x[:, ::-1], scale), r[:, ::-1], atol=1e-9)
    np.testing.assert_allclose(bicubic_resize(x[::-1], scale), r[::-1], atol=1e-9)
    np.testing.assert_allclose(bicubic_resize(x.transpose(1, 0, 2), scale), r.transpose(1, 0, 2), atol=1e-9)
    np.testing.assert_allclose(bicubic_resize(255 - x, scale), 255 - r, atol=1e-9)


def test_integer_x2_upscale_is_exactly_complement_equivariant(rng):
    x = rng.integers(0, 256, size=(9, 11, 3)).astype(float)
    assert np.array_equal(bicubic_resize(255 - x, 2, antialias=False), 255 - bicubic_resize(x, 2, antialias=False))


def test_downsample_crops_first():
    hr = np.zeros((100, 101, 3))
    assert downsample(hr, 3).shape == (33, 33, 3)
    assert crop_to_multiple(hr, 3).shape == (99, 99, 3)
    assert downsample(hr, 1).shape == (100, 101, 3)


def test_downsample_output_is_8bit(rng):
    lr = downsample(rng.uniform(0, 255, size=(24, 24, 3)), 2)
    assert np.array_equal(lr, np.clip(np.round(lr), 0, 255))


def test_resize_explicit_size():
    assert bicubic_resize(np.zeros((10, 10)), Fraction(1, 2), size=(4, 7)).shape == (4, 7)
    with pytest.raises(DimensionError):
        bicubic_resize(np.zeros((10, 10)), 2, size=(0, 3))


# ---------------------------------------------------------------------------
# colour


def test_luma_values():
    assert rgb_to_y(np.zeros((1, 1, 3)))[0, 0] == pytest.approx(16.0)
    assert rgb_to_y(np.full((1, 1, 3), 255.0))[0, 0] == pytest.approx(16 + 255 * 219.859 / 256)
    assert rgb_to_y(np.array([[[255.0, 0, 0]]]))[0, 0] == pytest.approx(16 + 255 * 65.738 / 256)


# ---------------------------------------------------------------------------
# I/O


def test_ppm_written_by_pillow_is_read(tmp_path, rng):
    arr = rng.integers(0, 256, size=(7, 5, 3), dtype=np.uint8)
    Image.fromarray(arr).save(tmp_path / "a.ppm")
    np.testing.assert_array_equal(load_image(tmp_path / "a.ppm"), arr)


def test_ppm_roundtrip_and_pillow_reads_ours(tmp_path, rng):
    arr = rng.integers(0, 256, size=(4, 6, 3)).astype(float)
    save_image(arr, tmp_path / "b.ppm")
    np.testing.assert_array_equal(load_image(tmp_path / "b.ppm"), arr)
    with Image.open(tmp_path / "b.ppm") as im:
        np.testing.assert_array_equal(np.asarray(im), arr)


def test_ppm_header_comment(tmp_path):
    (tmp_path / "c.ppm").write_bytes(b"P6\n# hello\n2 1\n255\n" + bytes([1, 2, 3, 4, 5, 6]))
    assert load_image(tmp_path / "c.ppm").ravel().tolist() == [1, 2, 3, 4, 5, 6]


def test_ppm_errors(tmp_path):
    (tmp_path / "t.ppm").write_bytes(b"P6\n4 4\n255\n" + bytes(10))
    with pytest.raises(ImageFormatError, match="truncated"):
        load_image(tmp_path / "t.ppm")
    (tmp_path / "d.ppm").write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
    with pytest.raises(UnsupportedDepthError):
        load_image(tmp_path / "d.ppm")
    (tmp_path / "a.ppm").write_bytes(b"P3\n1 1\n255\n1 2 3\n")
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "a.ppm")


def test_png_roundtrip_gray_and_alpha(tmp_path, rng):
    rgb = rng.integers(0, 256, size=(5, 4, 3)).astype(float)
    save_image(rgb, tmp_path / "x.png")
    np.testing.assert_array_equal(load_image(tmp_path / "x.png"), rgb)
    gray = rng.integers(0, 256, size=(3, 3), dtype=np.uint8)
    Image.fromarray(gray, "L").save(tmp_path / "g.png")
    np.testing.assert_array_equal(load_image(tmp_path / "g.png"), np.repeat(gray[..., None], 3, axis=2))
    rgba = rng.integers(0, 256, size=(3, 3, 4), dtype=np.uint8)
    Image.fromarray(rgba, "RGBA").save(tmp_path / "a.png")
    np.testing.assert_array_equal(load_image(tmp_path / "a.png"), rgba[..., :3])


def test_sixteen_bit_png_is_rejected(tmp_path):
    Image.fromarray(np.full((4, 4), 40000, dtype=np.uint16)).save(tmp_path / "gray16.png")
    with pytest.raises(UnsupportedDepthError):
        load_image(tmp_path / "gray16.png")
    # 16-bit RGB written by hand: Pillow would silently narrow it to 8 bits
    import struct
    import zlib

    def chunk(kind, data):
        return struct.pack(">I", len(data)) + kind + data + struct.pack(">I", zlib.crc32(kind + data))

    raw = b"".join(b"\x00" + bytes(2 * 3 * 2) for _ in range(2))
    png = (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", struct.pack(">IIBBBBB", 2, 2, 16, 2, 0, 0, 0))
           + chunk(b"IDAT", zlib.compress(raw)) + chunk(b"IEND", b""))
    (tmp_path / "rgb16.png").write_bytes(png)
    with pytest.raises(UnsupportedDepthError):
        load_image(tmp_path / "rgb16.png")


def test_unsupported_and_corrupt_files(tmp_path):
    (tmp_path / "x.bmp").write_bytes(b"BM")
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "x.bmp")
    (tmp_path / "bad.png").write_bytes(b"not a png")
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "bad.png")


def test_quantize_and_save_clamp(tmp_path):
    assert quantize(np.array([-3.2, 0.5, 1.5, 254.6, 300.0])).tolist() == [0, 0, 2, 255, 255]
    with pytest.raises(ImageFormatError):
        save_image(np.zeros((2, 2, 3)), tmp_path / "x.jpg")


def test_listing_and_pairing(tmp_path):
    for name in ("b.png", "a.ppm", "notes.txt"):
        (tmp_path / name).write_bytes(b"")
    assert [p.name for p in list_images(tmp_path)] == ["a.ppm", "b.png"]
    lr = tmp_path / "lr"
    lr.mkdir()
    (lr / "bx2.png").write_bytes(b"")
    assert find_paired_lr(tmp_path / "b.png", lr, 2).name == "bx2.png"
    with pytest.raises(FileNotFoundError):
        find_paired_lr(tmp_path / "a.ppm", lr, 2)


# ---------------------------------------------------------------------------
# dihedral group and augmentation


def test_dihedral_group(rng):
    x = rng.normal(size=(3, 5, 2))
    seen = []
    for k in range(8):
        y = dihedral(x, k)
        np.testing.assert_array_equal(dihedral_inverse(y, k), x)
        seen.append(y.tobytes() + bytes(y.shape))
    assert len(set(seen)) == 8


def _block_pair(rng, p=4, s=2):
    lr = rng.integers(0, 256, size=(p, p, 3)).astype(float)
    return PatchPair(lr, np.kron(lr, np.ones((s, s, 1))))


@pytest.mark.parametrize("flags", [tuple(bool(int(c)) for c in f"{i:04b}") for i in range(16)])
def test_augment_keeps_alignment(rng, flags):
    pair = augment(_block_pair(rng), *flags)
    np.testing.assert_array_equal(pair.hr, np.kron(pair.lr, np.ones((2, 2, 1))))


def test_augment_involutions(rng):
    pair = _block_pair(rng)
    for kw in ("hflip", "vflip", "complement"):
        twice = augment(augment(pair, **{kw: True}), **{kw: True})
        np.testing.assert_array_equal(twice.lr, pair.lr)
    four = pair
    for _ in range(4):
        four = augment(four, rot90=True)
    np.testing.assert_array_equal(four.hr, pair.hr)


def test_patch_pair_alignment(rng):
    lr = rng.integers(0, 256, size=(10, 12, 3)).astype(float)
    hr = np.kron(lr, np.ones((3, 3, 1)))
    for _ in range(20):
        pair = extract_patch_pair(hr, lr, 4, 3, rng)
        assert pair.lr.shape == (4, 4, 3) and pair.hr.shape == (12, 12, 3)
        np.testing.assert_array_equal(pair.hr[::3, ::3], pair.lr)
    with pytest.raises(ImageTooSmallError):
        extract_patch_pair(hr, lr, 11, 3, rng)
    with pytest.raises(DimensionError):
        extract_patch_pair(hr[:-1], lr, 4, 3, rng)


# ---------------------------------------------------------------------------
# training set


def _set(rng):
    return TrainingSet([rng.uniform(0, 255, size=(40, 44, 3)), rng.uniform(0, 255, size=(30, 30, 3)),
                        rng.uniform(0, 255, size=(10, 10, 3))], scale=2)


def test_batches_are_reproducible_and_order_independent(rng):
    ds = _set(rng)
    a = [ds.sample_batch(s, 7, 4, 8) for s in (0, 1, 2)]
    b = [ds.sample_batch(s, 7, 4, 8) for s in (2, 1, 0)][::-1]
    for x, y in zip(a, b):
        for p, q in zip(x, y):
            np.testing.assert_array_equal(p.lr, q.lr)
            np.testing.assert_array_equal(p.hr, q.hr)
    c = ds.sample_batch(0, 8, 4, 8)
    assert not all(np.array_equal(p.lr, q.lr) for p, q in zip(a[0], c))


def test_small_images_are_skipped(rng):
    ds = _set(rng)
    assert ds.usable(8) == [0, 1]
    with pytest.raises(ImageTooSmallError):
        ds.sample_batch(0, 0, 2, 40)


def test_batch_pairs_are_consistent(rng):
    lr = rng.integers(0, 256, size=(20, 20, 3)).astype(float)
    ds = TrainingSet([np.kron(lr, np.ones((2, 2, 1)))], 2, lr_images=[lr])
    for pair in ds.sample_batch(3, 0, 16, 6):
        assert pair.lr.shape == (6, 6, 3)
        np.testing.assert_array_equal(pair.hr, np.kron(pair.lr, np.ones((2, 2, 1))))


def test_augmentation_flags_are_fair(rng):
    # values 0..7 everywhere; complemented patches hold 248..255 instead
    lr = np.tile(np.arange(8.0)[None, :, None], (8, 1, 3))
    ds = TrainingSet([np.kron(lr, np.ones((2, 2, 1)))], 2, lr_images=[lr])
    comps = [p.lr.max() > 7 or p.lr.min() > 0 for s in range(200) for p in ds.sample_batch(s, 1, 4, 8)]
    # 800 fair coin draws land within 5 sigma of 400
    assert abs(sum(comps) - 400) < 5 * np.sqrt(200)


def test_prefetch_preserves_order():
    for workers in (1, 4):
        assert list(prefetch(lambda s: s * s, range(20), workers, depth=3)) == [s * s for s in range(20)]
