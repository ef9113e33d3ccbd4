"""PPM/PGM round trips and exact byte layout."""

import json

import numpy as np
import pytest

from voxtex.cameras import ortho_faces, perspective_camera
from voxtex.images import load_depth, load_ppm, save_depth, save_ppm


class TestPpm:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        rgb = np.rint(rng.random((5, 9, 3)) * 255) / 255.0
        path = tmp_path / "x.ppm"
        save_ppm(path, rgb)
        np.testing.assert_allclose(load_ppm(path), rgb, atol=1e-12)

    def test_exact_bytes(self, tmp_path):
        rgb = np.array([[[0.0, 1.0, 0.0], [1.0, 0.0, 1.0]]])
        path = tmp_path / "x.ppm"
        save_ppm(path, rgb)
        assert path.read_bytes() == b"P6\n2 1\n255\n\x00\xff\x00\xff\x00\xff"

    def test_header_with_comment(self, tmp_path):
        path = tmp_path / "c.ppm"
        path.write_bytes(b"P6\n# a comment\n1 1\n255\n\x10\x20\x30")
        img = load_ppm(path)
        np.testing.assert_allclose(img[0, 0], [16 / 255, 32 / 255, 48 / 255])

    def test_rejects_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P5\n1 1\n255\n\x00")
        with pytest.raises(ValueError, match="not a P6"):
            load_ppm(path)

    def test_rejects_truncated(self, tmp_path):
        path = tmp_path / "trunc.ppm"
        path.write_bytes(b"P6\n4 4\n255\n\x00\x01")
        with pytest.raises(ValueError, match="truncated"):
            load_ppm(path)

    def test_rejects_out_of_range(self, tmp_path):
        with pytest.raises(ValueError, match="0,1"):
            save_ppm(tmp_path / "y.ppm", np.full((2, 2, 3), 1.5))


class TestDepthPgm:
    def test_round_trip_quantization(self, tmp_path):
        cam = ortho_faces(size=4)[0]
        depth = np.array([
            [0.0, 0.5, 1.5, 1.0],
            [0.7, 0.0, 1.2, 0.9],
            [0.5, 0.5, 0.0, 1.5],
            [1.1, 1.3, 1.4, 0.6],
        ])
        path = tmp_path / "d.pgm"
        save_depth(path, depth, cam)
        loaded, cam2 = load_depth(path)
        step = (cam.far - cam.near) / 65534
        np.testing.assert_allclose(loaded, depth, atol=step)
        assert (loaded[depth == 0] == 0).all()
        assert cam2.kind == cam.kind
        np.testing.assert_allclose(cam2.rotation, cam.rotation)
        np.testing.assert_allclose(cam2.translation, cam.translation)
        assert cam2.intrinsics == cam.intrinsics

    def test_extreme_values_hit_code_ends(self, tmp_path):
        # near maps to 1, far to 65535, background stays 0 (big endian)
        cam = ortho_faces(size=2)[0]
        depth = np.array([[0.0, 0.5], [1.5, 0.0]])
        path = tmp_path / "d.pgm"
        save_depth(path, depth, cam)
        raw = path.read_bytes()
        header = b"P5\n2 2\n65535\n"
        assert raw.startswith(header)
        pixels = raw[len(header):]
        assert pixels == b"\x00\x00\x00\x01\xff\xff\x00\x00"

    def test_sidecar_contents(self, tmp_path):
        cam = perspective_camera([0, 0, -2], [0.5, 0.5, 0.5], 8, 6)
        path = tmp_path / "d.pgm"
        save_depth(path, np.zeros((6, 8)), cam)
        meta = json.loads((tmp_path / "d.pgm.json").read_text())
        assert meta["near"] == cam.near and meta["far"] == cam.far
        assert meta["kind"] == "perspective"
        assert len(meta["intrinsics"]) == 4
        assert np.asarray(meta["pose"]["rotation"]).shape == (3, 3)

    def test_out_of_range_depth_rejected(self, tmp_path):
        cam = ortho_faces(size=2)[0]
        with pytest.raises(ValueError, match="within"):
            save_depth(tmp_path / "d.pgm", np.full((2, 2), 99.0), cam)

    def test_rejects_eight_bit(self, tmp_path):
        path = tmp_path / "d8.pgm"
        path.write_bytes(b"P5\n1 1\n255\n\x00")
        with pytest.raises(ValueError, match="16-bit"):
            load_depth(path)
