import numpy as np
import pytest

from cgcnet.netpbm import read_pnm, write_pnm


def test_round_trip_16bit(tmp_path, rng):
    labels = rng.integers(0, 70000, size=(7, 9)).clip(0, 65535).astype(np.uint16)
    write_pnm(tmp_path / "l.pgm", labels, maxval=65535)
    back = read_pnm(tmp_path / "l.pgm")
    assert back.dtype == np.uint16 and np.array_equal(back, labels)
    raw = (tmp_path / "l.pgm").read_bytes()
    # samples are big-endian
    assert raw.endswith(labels.astype(">u2").tobytes())


def test_round_trip_8bit_gray_and_colour(tmp_path, rng):
    gray = rng.integers(0, 256, size=(5, 4)).astype(np.uint8)
    rgb = rng.integers(0, 256, size=(5, 4, 3)).astype(np.uint8)
    write_pnm(tmp_path / "g.pgm", gray)
    write_pnm(tmp_path / "c.ppm", rgb)
    assert np.array_equal(read_pnm(tmp_path / "g.pgm"), gray)
    assert np.array_equal(read_pnm(tmp_path / "c.ppm"), rgb)


def test_header_comments(tmp_path):
    (tmp_path / "x.pgm").write_bytes(b"P5\n# made by hand\n2 1\n# max\n255\n\x07\x09")
    assert read_pnm(tmp_path / "x.pgm").tolist() == [[7, 9]]


def test_bad_files(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ValueError):
        read_pnm(tmp_path / "a.pgm")
    (tmp_path / "b.pgm").write_bytes(b"P5\n4 4\n255\n\x00")
    with pytest.raises(ValueError):
        read_pnm(tmp_path / "b.pgm")
    with pytest.raises(ValueError):
        write_pnm(tmp_path / "c.pgm", np.full((2, 2), 300), maxval=255)
