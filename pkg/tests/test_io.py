import numpy as np
import pytest

from sren.errors import InvalidArgument
from sren.io import read_pgm, read_srtn, to_uint8, write_pgm, write_srtn


class TestSrtn:
    @pytest.mark.parametrize("shape", [(), (3,), (2, 4), (2, 3, 5)])
    def test_roundtrip_f64(self, tmp_path, rng, shape):
        a = rng.normal(size=shape)
        write_srtn(tmp_path / "a.srtn", a)
        b = read_srtn(tmp_path / "a.srtn")
        assert b.shape == a.shape and b.dtype == np.float64
        np.testing.assert_array_equal(a, b)

    def test_f32(self, tmp_path, rng):
        a = rng.normal(size=(4, 4))
        write_srtn(tmp_path / "a.srtn", a, dtype="f32")
        b = read_srtn(tmp_path / "a.srtn")
        assert b.dtype == np.float32
        np.testing.assert_array_equal(b, a.astype(np.float32))

    def test_complex_gets_leading_axis(self, tmp_path):
        a = np.array([1 + 2j, 3 - 4j])
        write_srtn(tmp_path / "c.srtn", a)
        np.testing.assert_array_equal(read_srtn(tmp_path / "c.srtn"), [[1, 3], [2, -4]])

    def test_header_layout(self, tmp_path):
        write_srtn(tmp_path / "h.srtn", np.zeros((2, 3)))
        raw = (tmp_path / "h.srtn").read_bytes()
        assert raw[:4] == b"SRTN" and raw[4:8] == b"\x01\x00\x00\x00" and raw[8:10] == b"\x01\x02"
        assert len(raw) == 10 + 16 + 48

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.srtn").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(InvalidArgument):
            read_srtn(tmp_path / "x.srtn")

    def test_truncated_payload(self, tmp_path):
        write_srtn(tmp_path / "t.srtn", np.zeros(10))
        p = tmp_path / "t.srtn"
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(InvalidArgument):
            read_srtn(p)


class TestPgm:
    def test_roundtrip(self, tmp_path, rng):
        img = rng.integers(0, 256, (5, 7)).astype(np.uint8)
        write_pgm(tmp_path / "a.pgm", img)
        np.testing.assert_allclose(read_pgm(tmp_path / "a.pgm"), img / 255.0)

    def test_ascii_with_comment(self, tmp_path):
        (tmp_path / "a.pgm").write_bytes(b"P2\n# note\n2 1\n10\n0 5\n")
        np.testing.assert_allclose(read_pgm(tmp_path / "a.pgm"), [[0.0, 0.5]])

    def test_bad_magic(self, tmp_path):
        (tmp_path / "a.pgm").write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
        with pytest.raises(InvalidArgument):
            read_pgm(tmp_path / "a.pgm")

    def test_truncated(self, tmp_path):
        (tmp_path / "a.pgm").write_bytes(b"P5\n4 4\n255\n\x00\x00")
        with pytest.raises(ValueError):
            read_pgm(tmp_path / "a.pgm")

    def test_rejects_3d(self, tmp_path):
        with pytest.raises(InvalidArgument):
            write_pgm(tmp_path / "a.pgm", np.zeros((2, 2, 2)))

    def test_to_uint8(self):
        np.testing.assert_array_equal(to_uint8(np.array([-1.0, 0.0, 0.5, 1.0, 2.0]), 0.0, 1.0), [0, 0, 128, 255, 255])
