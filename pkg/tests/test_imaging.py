import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from sreseg.datagen import DEFAULT_SPECS, render_texture

from sreseg.imaging import (IGNORE, FormatError, block_mode, block_reduce_mask, decode_tensor, encode_tensor,
                            read_bundle, read_label_map, read_pnm, read_tensor, resize, rotate_image,
                            rotate_label_map, tissue_mask, to_float, to_uint8, write_bundle, write_label_map, write_pnm,
                            write_tensor)

seeds = st.integers(0, 2**32 - 1)


# ---------------------------------------------------------------------------
# rotation


def test_zero_angle_is_identity(rng):
    img = rng.random((9, 7, 3))
    out = rotate_image(img, 0)
    assert np.array_equal(out, img) and out.dtype == img.dtype


@pytest.mark.parametrize("angle, q", [(90, 1), (180, 2), (270, 3), (-90, 3), (450, 1)])
def test_quarter_turns_are_permutations(rng, angle, q):
    img = rng.random((6, 6, 3))
    assert np.array_equal(rotate_image(img, angle), np.rot90(img, q))


def test_rotation_matches_scipy_grid_constant(rng):
    # scipy rotates counter-clockwise about the array centre, same as here
    img = rng.random((33, 33))
    ours = rotate_image(img, 30.0, fill=0.0)
    ref = ndimage.rotate(img, 30.0, reshape=False, order=1, mode="grid-constant", cval=0.0)
    inner = np.hypot(*np.mgrid[-16:17, -16:17]) < 14
    assert np.abs(ours - ref)[inner].max() < 1e-9


def _rotate_back_error(img):
    n = img.shape[0]
    c = (n - 1) / 2
    yy, xx = np.mgrid[0:n, 0:n]
    disc = np.hypot(yy - c, xx - c) <= n / 2 - 4
    back = rotate_image(rotate_image(img, 30), -30)
    return np.abs(back - img)[disc].mean()


def test_rotate_back_error_inside_disc_noise(rng):
    img = ndimage.gaussian_filter(rng.random((96, 96)), 1.5)
    img = (img - img.min()) / (img.max() - img.min())
    assert _rotate_back_error(img) <= 0.02


@pytest.mark.parametrize("spec", DEFAULT_SPECS, ids=lambda s: s.kind)
def test_rotate_back_error_inside_disc_textures(spec):
    tex = to_float(to_uint8(render_texture(spec, np.random.default_rng(3), 96, 96, 2.0)), np.float64)
    assert _rotate_back_error(tex) <= 0.02


def test_outside_pixels_take_fill():
    out = rotate_image(np.zeros((10, 10)), 45, fill=1.0)
    assert out[0, 0] == 1.0 and out[5, 5] == 0.0


def test_rotate_label_map():
    labels = np.arange(16, dtype=np.uint8).reshape(4, 4)
    assert np.array_equal(rotate_label_map(labels, 0), labels)
    assert np.array_equal(rotate_label_map(rotate_label_map(labels, 180), 180), labels)
    const = np.full((21, 21), 3, dtype=np.uint8)
    rot = rotate_label_map(const, 30)
    assert set(np.unique(rot)) <= {3, IGNORE} and rot[10, 10] == 3 and rot[0, 0] == IGNORE


def test_bad_interp():
    with pytest.raises(ValueError):
        rotate_image(np.zeros((3, 3)), 10, interp="cubic")


# ---------------------------------------------------------------------------
# resize and reductions


def test_nearest_upsample_blocks(rng):
    img = rng.random((64, 64))
    up = resize(img, 128, 128, "nearest")
    assert np.array_equal(up, np.repeat(np.repeat(img, 2, 0), 2, 1))
    assert np.array_equal(resize(img, 64, 64, "nearest"), img)


@given(seeds, st.sampled_from(["nearest", "bilinear"]), st.sampled_from([(8, 12), (16, 5), (12, 12), (7, 4), (9, 13)]))
def test_resize_commutes_with_rot90(seed, interp, sizes):
    n_in, n_out = sizes
    if interp == "nearest" and n_in % 2 == 0 and n_out % 2 == 1:
        return  # covered by test_nearest_even_to_odd_cannot_mirror
    img = np.random.default_rng(seed).random((n_in, n_in, 2))
    a = np.rot90(resize(img, n_out, n_out, interp))
    b = resize(np.rot90(img), n_out, n_out, interp)
    assert np.allclose(a, b, atol=1e-12)


def test_nearest_even_to_odd_cannot_mirror():
    # the middle output sample sits exactly between two source pixels
    from sreseg.imaging import _nearest_index

    idx = _nearest_index(16, 5)
    assert np.array_equal(idx[:2] + idx[::-1][:2], [15, 15]) and idx[2] in (7, 8)


def test_bilinear_constant_and_linear():
    assert np.allclose(resize(np.full((5, 7), 2.5), 9, 3), 2.5)
    ramp = np.tile(np.arange(8.0), (8, 1))
    down = resize(ramp, 4, 4)
    assert np.allclose(down[0], [0.5, 2.5, 4.5, 6.5])


def test_block_reduce_mask():
    m = np.ones((4, 4), dtype=bool)
    m[0, 0] = False
    assert block_reduce_mask(m, 2, 2).tolist() == [[False, True], [True, True]]


@given(arrays(np.bool_, (8, 8)), st.integers(1, 3))
def test_block_reduce_mask_commutes_with_rot90(m, q):
    assert np.array_equal(np.rot90(block_reduce_mask(m, 4, 4), q), block_reduce_mask(np.rot90(m, q), 4, 4))


def test_block_mode_majority_ties_and_ignore():
    labels = np.array([[1, 1, 0, 1], [1, 2, 1, 0], [3, 3, 2, 2], [3, 3, IGNORE, 2]], dtype=np.uint8)
    assert block_mode(labels, 2, 2).tolist() == [[1, 0], [3, IGNORE]]


@given(arrays(np.uint8, (8, 8), elements=st.integers(0, 3)), st.integers(1, 3))
def test_block_mode_commutes_with_rot90(labels, q):
    assert np.array_equal(np.rot90(block_mode(labels, 4, 4), q), block_mode(np.rot90(labels, q), 4, 4))


# ---------------------------------------------------------------------------
# tissue mask


def test_white_image_has_empty_mask():
    assert not tissue_mask(np.ones((16, 16, 3))).any()


def test_disc_mask_and_speck_removal():
    img = np.ones((64, 64, 3))
    yy, xx = np.mgrid[0:64, 0:64]
    disc = np.hypot(yy - 31.5, xx - 31.5) <= 20
    img[disc] = 0.2
    img[3, 3] = 0.0
    mask = tissue_mask(img)
    assert not mask[3, 3]
    assert np.mean(mask != disc) < 0.01


@given(seeds, st.integers(1, 3))
def test_tissue_mask_commutes_with_rot90(seed, q):
    img = np.random.default_rng(seed).random((24, 24, 3))
    assert np.array_equal(np.rot90(tissue_mask(img), q), tissue_mask(np.rot90(img, q)))


# ---------------------------------------------------------------------------
# files


def test_pgm_fixture_bytes(tmp_path):
    path = tmp_path / "a.pgm"
    write_pnm(path, np.array([[0, 85], [170, 255]], dtype=np.uint8))
    data = path.read_bytes()
    assert data == b"P5\n2 2\n255\n" + bytes([0, 85, 170, 255])
    assert read_pnm(path).tolist() == [[0, 85], [170, 255]]


@given(arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(3))))
def test_ppm_round_trip(tmp_path_factory, img):
    path = tmp_path_factory.mktemp("ppm") / "x.ppm"
    write_pnm(path, img)
    assert np.array_equal(read_pnm(path), img)


def test_pnm_header_comments(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made by hand\n1 2\n255\n\x07\x09")
    assert read_pnm(path).tolist() == [[7], [9]]


@pytest.mark.parametrize("payload", [b"P3\n1 1\n255\n\x00", b"P5\n2 2\n255\n\x00", b"P5\n1 1\n65535\n\x00\x00",
                                     b"P5\n1 1 255", b"P5\n0 1\n255\n"])
def test_pnm_malformed(tmp_path, payload):
    path = tmp_path / "bad.pgm"
    path.write_bytes(payload)
    with pytest.raises(FormatError):
        read_pnm(path)


def test_label_map_round_trip(tmp_path):
    labels = np.array([[0, 1], [2, IGNORE]], dtype=np.uint8)
    write_label_map(tmp_path / "l.pgm", labels)
    assert np.array_equal(read_label_map(tmp_path / "l.pgm"), labels)
    write_pnm(tmp_path / "rgb.ppm", np.zeros((2, 2, 3), dtype=np.uint8))
    with pytest.raises(FormatError):
        read_label_map(tmp_path / "rgb.ppm")


@given(arrays(np.float32, st.lists(st.integers(0, 4), min_size=0, max_size=4).map(tuple),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_tensor_round_trip(arr):
    out = decode_tensor(encode_tensor(arr))
    assert out.dtype == np.float32 and out.shape == arr.shape and np.array_equal(out, arr)


def test_tensor_truncation(tmp_path, rng):
    buf = encode_tensor(rng.standard_normal((3, 4)).astype(np.float32))
    for cut in (2, 6, 12, len(buf) - 1):
        with pytest.raises(FormatError):
            decode_tensor(buf[:cut])
    with pytest.raises(FormatError):
        decode_tensor(buf + b"\x00")
    with pytest.raises(FormatError):
        decode_tensor(b"XXXX" + buf[4:])
    write_tensor(tmp_path / "t.sret", np.ones(3))
    assert read_tensor(tmp_path / "t.sret").tolist() == [1.0, 1.0, 1.0]


def test_bundle_round_trip(tmp_path, rng):
    arrays_ = {"a": rng.standard_normal((2, 3)).astype(np.float32), "b": np.float32(4.0)}
    write_bundle(tmp_path / "bun", arrays_, {"x": 1, "kinds": {"a": "sre"}})
    got, meta = read_bundle(tmp_path / "bun")
    assert meta == {"x": "1"}
    assert np.array_equal(got["a"], arrays_["a"]) and got["b"].shape == ()
