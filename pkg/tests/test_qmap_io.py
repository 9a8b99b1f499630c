import numpy as np
import pytest

from qmrisynth.qmap_io import (
    BadDtypeError, BadMagicError, BadVersionError, TruncatedError,
    read_pgm, read_qmap, write_pgm, write_qmap,
)


class TestQmapRoundTrip:
    def test_bit_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        chans = {"a": rng.normal(size=(7, 5)).astype(np.float32),
                 "b": rng.normal(size=(7, 5)).astype(np.float32)}
        path = tmp_path / "x.qmap"
        write_qmap(path, chans)
        back = read_qmap(path)
        assert list(back) == ["a", "b"]
        for k in chans:
            assert back[k].tobytes() == chans[k].tobytes()

    def test_many_random_payloads(self, tmp_path):
        # format-integrity sweep over shapes, values and channel counts
        rng = np.random.default_rng(1)
        for i in range(200):
            h = int(rng.integers(1, 20))
            w = int(rng.integers(1, 20))
            n = int(rng.integers(1, 5))
            chans = {f"c{k}": rng.normal(size=(h, w)).astype(np.float32)
                     for k in range(n)}
            path = tmp_path / f"r{i}.qmap"
            write_qmap(path, chans)
            back = read_qmap(path)
            for k in chans:
                assert back[k].tobytes() == chans[k].tobytes()

    def test_non_ascii_channel_names(self, tmp_path):
        chans = {"mapa-T₁ (ms)": np.ones((2, 2), dtype=np.float32)}
        path = tmp_path / "u.qmap"
        write_qmap(path, chans)
        assert list(read_qmap(path)) == ["mapa-T₁ (ms)"]

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "t.qmap"
        write_qmap(path, {"a": np.ones((4, 4), dtype=np.float32)})
        blob = path.read_bytes()
        path.write_bytes(blob[:-7])
        with pytest.raises(TruncatedError):
            read_qmap(path)

    def test_trailing_garbage(self, tmp_path):
        path = tmp_path / "g.qmap"
        write_qmap(path, {"a": np.ones((2, 2), dtype=np.float32)})
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(TruncatedError):
            read_qmap(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.qmap"
        write_qmap(path, {"a": np.ones((2, 2), dtype=np.float32)})
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(BadMagicError):
            read_qmap(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "v.qmap"
        write_qmap(path, {"a": np.ones((2, 2), dtype=np.float32)})
        blob = bytearray(path.read_bytes())
        blob[4] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(BadVersionError):
            read_qmap(path)

    def test_bad_dtype(self, tmp_path):
        path = tmp_path / "d.qmap"
        write_qmap(path, {"a": np.ones((2, 2), dtype=np.float32)})
        blob = bytearray(path.read_bytes())
        # dtype code sits right before the 16-byte payload
        blob[-17] = 7
        path.write_bytes(bytes(blob))
        with pytest.raises(BadDtypeError):
            read_qmap(path)


class TestPgm:
    def test_header_and_shape(self, tmp_path):
        img = np.linspace(0, 1, 12).reshape(3, 4)
        path = tmp_path / "i.pgm"
        write_pgm(path, img, depth=8, window=(0.0, 1.0))
        blob = path.read_bytes()
        assert blob.startswith(b"P5\n4 3\n255\n")
        data, maxval = read_pgm(path)
        assert maxval == 255 and data.shape == (3, 4)

    def test_midpoint_rounds_half_up(self):
        # window midpoint maps to floor(maxval/2 + 0.5)
        img = np.full((2, 2), 0.5)
        import io, tempfile, os
        with tempfile.TemporaryDirectory() as d:
            p = os.path.join(d, "m.pgm")
            write_pgm(p, img, depth=8, window=(0.0, 1.0))
            data, maxval = read_pgm(p)
            assert np.all(data == int(np.floor(maxval / 2 + 0.5)))

    def test_clamping(self, tmp_path):
        img = np.array([[-5.0, 0.0], [1.0, 9.0]])
        path = tmp_path / "c.pgm"
        write_pgm(path, img, depth=8, window=(0.0, 1.0))
        data, _ = read_pgm(path)
        assert data[0, 0] == 0 and data[0, 1] == 0
        assert data[1, 0] == 255 and data[1, 1] == 255

    def test_16_bit_big_endian(self, tmp_path):
        img = np.array([[1.0]])
        path = tmp_path / "w.pgm"
        write_pgm(path, img, depth=16, window=(0.0, 1.0))
        blob = path.read_bytes()
        assert blob.startswith(b"P5\n1 1\n65535\n")
        assert blob[-2:] == b"\xff\xff"

    def test_invalid_window(self, tmp_path):
        with pytest.raises(ValueError):
            write_pgm(tmp_path / "x.pgm", np.ones((2, 2)), window=(1.0, 1.0))
