import numpy as np
import pytest

from t4dg.io import PLY_PROPERTIES, read_config, read_ply, read_ppm, write_config, write_ply, write_ppm
from t4dg.splat import GaussianSet


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).uniform(size=(5, 7, 3))
    write_ppm(tmp_path / "a.ppm", img)
    back = read_ppm(tmp_path / "a.ppm")
    assert back.shape == (5, 7, 3)
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-7
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")


def test_ppm_rejects_ascii(tmp_path):
    (tmp_path / "b.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "b.ppm")


def test_ply_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    n = 6
    q = rng.standard_normal((n, 4))
    g = GaussianSet(rng.standard_normal((n, 3)), rng.uniform(0.1, 1, (n, 3)), q / np.linalg.norm(q, axis=1, keepdims=True),
                    rng.uniform(0, 1, n), rng.uniform(0, 1, (n, 3)))
    write_ply(tmp_path / "g.ply", g)
    back = read_ply(tmp_path / "g.ply")
    for a, b in zip(g.fields(), back.fields()):
        np.testing.assert_array_equal(np.asarray(a, np.float32), b.astype(np.float32))
    header = (tmp_path / "g.ply").read_bytes().split(b"end_header\n")[0].decode()
    assert "format binary_little_endian 1.0" in header
    assert [l.split()[-1] for l in header.splitlines() if l.startswith("property")] == list(PLY_PROPERTIES)


def test_config_round_trip(tmp_path):
    sections = {"run": {"seed": 7, "lr": 0.001, "name": "x", "flag": True, "shape": [1, 2, 3]}}
    write_config(tmp_path / "c", sections)
    assert read_config(tmp_path / "c") == sections
    assert "seed = 7" in (tmp_path / "c").read_text()


def test_config_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_config(tmp_path / "none")
