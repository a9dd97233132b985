import csv
import io
from fractions import Fraction

import numpy as np
import pytest

from t4dg.cli import load_grid, main, read_camera_file, write_camera_file
from t4dg.diffusion import Denoiser, DenoiserConfig, save_denoiser
from t4dg.io import read_config, write_config
from t4dg.scenes import make_orbit_cameras


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["gen-scenes", "--out", "x", "--bogus"])
    assert exc.value.code == 2


def test_missing_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_stage_failure_names_the_stage(tmp_path, capsys):
    code, _, err = run(capsys, "render", "--ply-dir", tmp_path, "--camera", tmp_path / "none", "--out", tmp_path / "r")
    assert code == 1
    assert "stage render failed" in err


def test_gen_scenes_writes_manifest(tmp_path, capsys):
    code, _, _ = run(capsys, "gen-scenes", "--out", tmp_path, "--n", 1, "--views", 2, "--frames", 2, "--size", 8, "--seed", 3)
    assert code == 0
    man = read_config(tmp_path / "manifest")
    assert man["run"]["seed"] == 3
    assert man["run"]["git_describe"]
    assert "gen-scenes" in man["wallclock_seconds"]
    assert (tmp_path / "scene_0000").is_dir()


def test_bench_attn_csv(capsys):
    code, out, _ = run(capsys, "bench-attn", "--V", 2, 3, "--T", 3, 2, "--H", 2, "--W", 2, "--d", 8, "--repeats", 1)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [r["V"] for r in rows] == ["2", "3"]
    for r in rows:
        V, T = int(r["V"]), int(r["T"])
        assert Fraction(int(r["flops_sparse"]), int(r["flops_dense"])) == Fraction(T + V - 1, T * V)
        assert float(r["ms_sparse"]) > 0


def test_bench_attn_mismatched_lists():
    with pytest.raises(SystemExit) as exc:
        main(["bench-attn", "--V", "2", "3", "--T", "2"])
    assert exc.value.code == 2


def test_grad_check_passes(capsys):
    code, out, _ = run(capsys, "grad-check")
    assert code == 0
    assert out.count("PASS") >= 10 and "FAIL" not in out


def test_camera_file_round_trip(tmp_path):
    cams = make_orbit_cameras(3, width=8, height=8)
    write_camera_file(tmp_path / "cams", cams)
    back = read_camera_file(tmp_path / "cams")
    for a, b in zip(cams, back):
        np.testing.assert_allclose(a.R, b.R, atol=1e-9)
        np.testing.assert_allclose(a.translation, b.translation, atol=1e-9)
        assert a.focal == pytest.approx(b.focal)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-scenes", "--out", str(root / "scenes"), "--n", "2", "--views", "4", "--frames", "8", "--size", "16", "--seed", "1"]) == 0
    return root


def test_sample_records_step_count(workspace, capsys):
    ckpt = workspace / "tiny.t4dg"
    save_denoiser(ckpt, Denoiser(DenoiserConfig(blocks=1, d=16, heads=2), seed=0))
    infos = {}
    for steps in (4, 40):
        out = workspace / f"s{steps}" / "grid.t4dg"
        code, _, _ = run(capsys, "sample", "--ckpt", ckpt, "--reference", workspace / "scenes" / "scene_0000", "--steps", steps, "--seed", 2, "--out", out)
        assert code == 0
        frames, meta = load_grid(out)
        assert frames.shape == (4, 8, 16, 16, 3)
        infos[steps] = meta
        assert read_config(out.parent / "manifest")["results"]["steps"] == steps
    assert infos[4]["steps"] == 4 and infos[40]["steps"] == 40
    assert infos[40]["model_evals"] == 40


def test_stage_chain(workspace, capsys):
    cfg = workspace / "train.cfg"
    write_config(cfg, {"denoiser": {"blocks": 1, "d": 16, "heads": 2}, "data": {"scenes": str(workspace / "scenes"), "views": 4}})
    assert run(capsys, "train-diffusion", "--config", cfg, "--out", workspace / "diff" / "d.t4dg", "--iters", 2, "--seed", 0)[0] == 0
    assert (workspace / "diff" / "d.t4dg.loss.csv").exists()

    rcfg = workspace / "recon.cfg"
    write_config(rcfg, {"recon": {"d": 16, "blocks": 1, "heads": 2, "image_size": 16, "timesteps": 4, "source_views": 2}})
    static = workspace / "rec" / "static.t4dg"
    dynamic = workspace / "rec" / "dynamic.t4dg"
    assert run(capsys, "train-recon", "--scenes", workspace / "scenes", "--stage", "static", "--ckpt-out", static, "--config", rcfg, "--iters", 2)[0] == 0
    assert run(capsys, "train-recon", "--scenes", workspace / "scenes", "--stage", "dynamic", "--ckpt-in", static, "--ckpt-out", dynamic, "--iters", 1)[0] == 0

    gauss = workspace / "gauss"
    assert run(capsys, "reconstruct", "--ckpt", dynamic, "--grid", workspace / "scenes" / "scene_0000", "--out", gauss)[0] == 0
    assert len(list(gauss.glob("t*.ply"))) == 8

    renders = workspace / "renders"
    assert run(capsys, "render", "--ply-dir", gauss, "--camera", gauss / "cameras", "--out", renders)[0] == 0
    assert len(list(renders.glob("*.ppm"))) == 8 * 2

    code, out, _ = run(capsys, "eval", "--pred", renders, "--gt", renders, "--out", workspace / "eval.csv")
    assert code == 0
    assert "mean psnr" in out
    rows = list(csv.DictReader(open(workspace / "eval.csv")))
    assert len(rows) == 16 + 1  # per-frame rows plus the mean
