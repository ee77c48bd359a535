import numpy as np
import pytest

from gradmorph.data import (DataError, DataLayout, FormatError, Sample, SynthConfig, decode_pnm,
                            decode_tensor, encode_pnm, encode_tensor, generate_synthetic,
                            load_directory, read_image, read_labels, read_tensor, stack_samples,
                            write_image, write_labels, write_tensor)
from gradmorph.tensor_core import ContractViolation


def test_tensor_round_trip_is_bit_exact(tmp_path):
    r = np.random.default_rng(0)
    for shape in [(), (3,), (2, 3, 4), (1, 0, 2)]:
        a = r.standard_normal(shape) * 1e6
        p = tmp_path / "a.tensor"
        write_tensor(p, a)
        b = read_tensor(p)
        assert b.shape == a.shape and b.dtype == np.float64
        assert a.tobytes() == b.tobytes()


def test_tensor_keeps_special_values(tmp_path):
    a = np.array([np.inf, -np.inf, -0.0, 5e-324])
    write_tensor(tmp_path / "s.tensor", a)
    assert read_tensor(tmp_path / "s.tensor").tobytes() == a.tobytes()


def test_tensor_errors_carry_offsets():
    blob = encode_tensor(np.ones((2, 2)))
    with pytest.raises(FormatError) as e:
        decode_tensor(b"XXXXXXXX" + blob[8:])
    assert e.value.offset == 0
    with pytest.raises(FormatError) as e:
        decode_tensor(blob[:-3])
    assert e.value.offset == 8 + 8 + 16
    with pytest.raises(FormatError):
        decode_tensor(blob + b"\0")
    bad_version = blob[:8] + (7).to_bytes(4, "little") + blob[12:]
    with pytest.raises(FormatError) as e:
        decode_tensor(bad_version)
    assert e.value.offset == 8


def test_pgm_scaling_example(tmp_path):
    p = tmp_path / "x.pgm"
    p.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 128, 255, 64]))
    img = read_image(p)
    assert img.shape == (1, 2, 2)
    np.testing.assert_array_equal(img[0].ravel(), [0.0, 128 / 255, 1.0, 64 / 255])
    assert img[0, 1, 0] == 1.0


def test_pnm_header_comments_and_ppm():
    px = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(3, 2, 3)
    blob = encode_pnm(px)
    assert blob.startswith(b"P6")
    np.testing.assert_array_equal(decode_pnm(blob), px)
    commented = b"P5\n# made by hand\n2 1 # trailing\n255\n" + bytes([7, 9])
    np.testing.assert_array_equal(decode_pnm(commented), [[[7, 9]]])


@pytest.mark.parametrize("blob,offset", [
    (b"P3\n1 1\n255\n\0", 0),
    (b"P5\n1 1\n65535\n\0\0", 7),
    (b"P5\n2 2\n255\n\0", 11),
    (b"P5\n2 x\n255\n", 5),
])
def test_pnm_errors_carry_offsets(blob, offset):
    with pytest.raises(FormatError) as e:
        decode_pnm(blob)
    assert e.value.offset == offset


def test_image_round_trip_is_value_exact(tmp_path):
    q = np.random.default_rng(1).integers(0, 256, (1, 5, 7)) / 255.0
    write_image(tmp_path / "q.pgm", q)
    np.testing.assert_array_equal(read_image(tmp_path / "q.pgm"), q)


def test_label_round_trip(tmp_path):
    m = np.random.default_rng(2).integers(0, 2, (6, 6))
    write_labels(tmp_path / "m.pgm", m)
    np.testing.assert_array_equal(read_labels(tmp_path / "m.pgm"), m)
    m3 = np.random.default_rng(3).integers(0, 3, (6, 6))
    write_labels(tmp_path / "m3.pgm", m3, 3)
    np.testing.assert_array_equal(read_labels(tmp_path / "m3.pgm", 3), m3)


def test_synthetic_is_deterministic_and_disjoint():
    cfg = SynthConfig(count=20, image_size=32, seed=5)
    a_tr, a_te = generate_synthetic(cfg)
    b_tr, b_te = generate_synthetic(cfg)
    for x, y in zip(a_tr + a_te, b_tr + b_te):
        assert x.id == y.id
        assert x.image.tobytes() == y.image.tobytes()
        assert x.mask.tobytes() == y.mask.tobytes()
    assert not {s.id for s in a_tr} & {s.id for s in a_te}
    assert len(a_tr) == round(20 * 8 / 9)


@pytest.mark.parametrize("family", ["ellipses", "blobs"])
def test_foreground_fraction_bounds(family):
    tr, te = generate_synthetic(SynthConfig(count=1000, image_size=16, shape_family=family, seed=1))
    fr = np.array([s.mask.mean() for s in tr + te])
    assert fr.min() >= 0.03 and fr.max() <= 0.60


def test_synthetic_images_are_quantized_unit_range():
    tr, _ = generate_synthetic(SynthConfig(count=4, image_size=16, seed=2))
    for s in tr:
        assert s.image.min() >= 0 and s.image.max() <= 1
        np.testing.assert_array_equal(np.round(s.image * 255) / 255, s.image)


@pytest.mark.parametrize("kw", [{"contrast": 0.0}, {"noise": -1.0}, {"shape_family": "stars"},
                                {"train_fraction": 1.5}, {"image_size": 4}])
def test_synth_config_validation(kw):
    with pytest.raises(ContractViolation):
        SynthConfig(**kw).validate()


def test_layout_round_trip(tmp_path):
    tr, te = generate_synthetic(SynthConfig(count=6, image_size=16, seed=3))
    lay = DataLayout(tmp_path)
    lay.write_samples("train", tr)
    back = lay.read_samples("train")
    assert [s.id for s in back] == [s.id for s in tr]
    for a, b in zip(tr, back):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)
    with pytest.raises(ContractViolation):
        lay.dir("valid", "images")


def test_load_directory_errors_name_stems(tmp_path):
    (tmp_path / "i").mkdir()
    (tmp_path / "m").mkdir()
    assert load_directory(tmp_path / "i", tmp_path / "m") == []
    write_image(tmp_path / "i" / "a.pgm", np.zeros((1, 4, 4)))
    write_image(tmp_path / "i" / "b.pgm", np.zeros((1, 4, 4)))
    write_labels(tmp_path / "m" / "a.pgm", np.zeros((4, 4), int))
    with pytest.raises(DataError, match="without masks: b$"):
        load_directory(tmp_path / "i", tmp_path / "m")
    write_labels(tmp_path / "m" / "b.pgm", np.zeros((5, 4), int))
    with pytest.raises(DataError, match="mismatch: b"):
        load_directory(tmp_path / "i", tmp_path / "m")


def test_color_images_become_luminance(tmp_path):
    (tmp_path / "i").mkdir()
    rgb = np.zeros((3, 2, 2))
    rgb[0] = 1.0
    write_image(tmp_path / "i" / "c.ppm", rgb)
    write_labels(tmp_path / "m" / "c.pgm", np.ones((2, 2), int))
    (s,) = load_directory(tmp_path / "i", tmp_path / "m")
    assert s.image.shape == (1, 2, 2)
    np.testing.assert_allclose(s.image, 0.299)


def test_sample_and_stack_contracts():
    with pytest.raises(DataError):
        Sample("x", np.zeros((4, 4)), np.zeros((4, 4)))
    with pytest.raises(DataError):
        Sample("x", np.zeros((1, 4, 4)), np.zeros((3, 4)))
    bad = Sample("bad7", np.zeros((1, 2, 2)), np.full((2, 2), 2))
    with pytest.raises(DataError, match="bad7"):
        stack_samples([bad], num_classes=2)
