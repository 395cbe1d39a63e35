import numpy as np
import pytest

from rcnkit.imageio import (
    dequantize,
    quantize,
    read_label,
    read_pgm,
    read_png,
    read_prediction,
    write_label,
    write_pgm,
    write_png,
    write_prediction,
)


@pytest.fixture
def probs():
    return np.random.default_rng(0).random((13, 17))


class TestQuantize:
    def test_error_bound(self, probs):
        err = np.abs(dequantize(quantize(probs, 16)) - probs)
        assert err.max() <= 1 / 65535

    def test_endpoints(self):
        q = quantize(np.array([0.0, 1.0, -0.5, 2.0]), 16)
        assert q.tolist() == [0, 65535, 0, 65535]
        assert quantize(np.array([1.0]), 8).dtype == np.uint8

    def test_bad_depth(self):
        with pytest.raises(ValueError):
            quantize(np.zeros(2), 12)


class TestPgm:
    def test_sixteen_bit_round_trip(self, tmp_path, probs):
        q = quantize(probs, 16)
        write_pgm(tmp_path / "a.pgm", q)
        back = read_pgm(tmp_path / "a.pgm")
        assert back.dtype == np.uint16
        assert back.tobytes() == q.tobytes()

    def test_header_and_byte_order(self, tmp_path):
        write_pgm(tmp_path / "b.pgm", np.array([[1, 258]], dtype=np.uint16))
        raw = (tmp_path / "b.pgm").read_bytes()
        assert raw == b"P5\n2 1\n65535\n\x00\x01\x01\x02"

    def test_eight_bit(self, tmp_path):
        img = np.arange(12, dtype=np.uint8).reshape(3, 4)
        write_pgm(tmp_path / "c.pgm", img)
        np.testing.assert_array_equal(read_pgm(tmp_path / "c.pgm"), img)

    def test_comment_in_header(self, tmp_path):
        (tmp_path / "d.pgm").write_bytes(b"P5\n# made elsewhere\n2 1\n255\n\x07\x09")
        assert read_pgm(tmp_path / "d.pgm").tolist() == [[7, 9]]

    def test_rejects_float(self, tmp_path):
        with pytest.raises(TypeError):
            write_pgm(tmp_path / "e.pgm", np.zeros((2, 2)))


class TestPng:
    def test_sixteen_bit(self, tmp_path, probs):
        q = quantize(probs, 16)
        write_png(tmp_path / "a.png", q)
        back = read_png(tmp_path / "a.png")
        assert back.dtype == np.uint16
        np.testing.assert_array_equal(back, q)

    def test_rgb(self, tmp_path):
        img = np.random.default_rng(1).integers(0, 256, (5, 6, 3), dtype=np.uint8)
        write_png(tmp_path / "b.png", img)
        np.testing.assert_array_equal(read_png(tmp_path / "b.png"), img)

    @pytest.mark.parametrize("suffix", [".pgm", ".png"])
    def test_prediction_round_trip(self, tmp_path, probs, suffix):
        path = tmp_path / f"p{suffix}"
        write_prediction(path, probs)
        np.testing.assert_array_equal(read_prediction(path), dequantize(quantize(probs, 16)))

    def test_label(self, tmp_path):
        lab = np.eye(4, dtype=np.uint8)
        write_label(tmp_path / "l.png", lab)
        assert set(np.unique(read_png(tmp_path / "l.png"))) == {0, 255}
        np.testing.assert_array_equal(read_label(tmp_path / "l.png"), lab)
