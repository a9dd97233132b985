"""``t4dg`` command line: one executable, one subcommand per pipeline stage.

Exit codes: 0 success, 1 stage failure (stage name on stderr), 2 usage error.
``T4DG_THREADS`` caps the BLAS worker count; it must be read before numpy
loads, hence the environment juggling above the imports.
"""

from __future__ import annotations

import os

_threads = os.environ.get("T4DG_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import logging  # noqa: E402
import subprocess  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from dataclasses import asdict, dataclass, field, fields  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from .autodiff import checkpoint  # noqa: E402
from .camera import Camera  # noqa: E402
from .io import read_config, read_ply, read_ppm, write_config, write_ply, write_ppm  # noqa: E402

log = logging.getLogger("t4dg")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


# -- manifests ---------------------------------------------------------------------------

def git_describe() -> str:
    try:
        res = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


class Manifest:
    """Records config, seed, source revision and per-stage wall-clock for one output directory."""

    def __init__(self, out_dir, command: str, seed: int | None, config: dict[str, dict]):
        self.path = Path(out_dir) / "manifest"
        self.command = command
        self.seed = seed
        self.config = config
        self.timings: dict[str, float] = {}
        self.extra: dict[str, object] = {}

    def time(self, stage: str, seconds: float) -> None:
        self.timings[stage] = round(seconds, 3)

    def write(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        sections = {
            "run": {"command": self.command, "seed": "none" if self.seed is None else self.seed, "git_describe": git_describe(), "version": __version__},
            "wallclock_seconds": dict(self.timings),
        }
        if self.extra:
            sections["results"] = dict(self.extra)
        for name, values in self.config.items():
            sections[f"config.{name}"] = values
        write_config(self.path, sections)


# -- grid container ------------------------------------------------------------------------

def save_grid(path, frames: np.ndarray, cell_mask: np.ndarray, meta: dict[str, float]) -> None:
    entries = {"grid": np.asarray(frames, np.float32), "cell_mask": cell_mask.astype(np.float32)}
    for k, v in meta.items():
        entries[f"meta.{k}"] = np.array([v], np.float32)
    checkpoint.save(path, entries)


def load_grid(path) -> tuple[np.ndarray, dict]:
    """Pixel grid [V, T_px, H, W, 3] from a ``.t4dg`` grid file or a scene directory."""
    path = Path(path)
    if path.is_dir():
        from .scenes import load_scene

        return load_scene(path).images, {}
    entries = checkpoint.load(path)
    if "grid" not in entries:
        raise ValueError(f"{path}: no grid entry")
    meta = {k[5:]: float(v[0]) for k, v in entries.items() if k.startswith("meta.")}
    return entries["grid"], meta


# -- camera path files -------------------------------------------------------------------------

def write_camera_file(path, cameras: list[Camera]) -> None:
    write_config(path, {f"frame_{i:03d}": c.to_dict() for i, c in enumerate(cameras)})


def read_camera_file(path) -> list[Camera]:
    sections = read_config(path)
    cams = []
    for name in sorted(sections):
        s = sections[name]
        width, height = int(s.get("width", 32)), int(s.get("height", 32))
        cams.append(
            Camera(
                np.asarray(s["rotation"], np.float64),
                np.asarray(s["translation"], np.float64),
                float(s["focal"]),
                tuple(s.get("principal", (width / 2, height / 2))),
                width,
                height,
            )
        )
    if not cams:
        raise ValueError(f"{path}: no camera sections")
    return cams


# -- config helpers ---------------------------------------------------------------------------

def _flatten_config(path) -> dict:
    if path is None:
        return {}
    flat: dict = {}
    for values in read_config(path).values():
        flat.update(values)
    return flat


def _pick(cls, values: dict, **overrides):
    names = {f.name for f in fields(cls) if f.init}
    kwargs = {k: v for k, v in values.items() if k in names}
    kwargs.update({k: v for k, v in overrides.items() if v is not None and k in names})
    return cls(**kwargs)


# -- subcommands ------------------------------------------------------------------------------

def cmd_gen_scenes(args) -> int:
    from .scenes import SceneConfig, generate_dataset, save_dataset

    cfg = _pick(SceneConfig, _flatten_config(args.config), size=args.size)
    man = Manifest(args.out, "gen-scenes", args.seed, {"scenes": {**cfg.to_dict(), "n": args.n, "views": args.views, "frames": args.frames}})
    t0 = time.perf_counter()
    scenes = generate_dataset(args.n, args.views, args.frames, args.seed, cfg)
    save_dataset(args.out, scenes)
    man.time("gen-scenes", time.perf_counter() - t0)
    man.write()
    return 0


def _diffusion_training_scenes(scenes, n_views: int):
    from .recon import split_views

    sources, _ = split_views(scenes[0].V, n_views) if scenes[0].V > n_views else (list(range(scenes[0].V)), [])
    return [s.select_views(sources) for s in scenes]


def cmd_train_diffusion(args) -> int:
    from .diffusion import DenoiserConfig, TrainConfig, save_denoiser, train_denoiser
    from .scenes import load_dataset

    flat = _flatten_config(args.config)
    dcfg = _pick(DenoiserConfig, flat)
    tc = _pick(TrainConfig, flat, iters=args.iters, seed=args.seed)
    scenes_dir = args.scenes or flat.get("scenes")
    if not scenes_dir:
        raise ValueError("no scenes directory given (--scenes or 'scenes' config key)")
    scenes = _diffusion_training_scenes(load_dataset(scenes_dir), int(flat.get("views", 4)))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    man = Manifest(out.parent, "train-diffusion", tc.seed, {"denoiser": asdict(dcfg), "train": asdict(tc)})
    t0 = time.perf_counter()
    model, losses = train_denoiser(scenes, dcfg, tc)
    save_denoiser(out, model)
    np.savetxt(str(out) + ".loss.csv", np.asarray(losses), fmt="%.8f", header="loss", comments="")
    man.time("train-diffusion", time.perf_counter() - t0)
    man.extra.update(final_loss=float(np.mean(losses[-20:])), parameters=model.num_parameters())
    man.write()
    return 0


def cmd_sample(args) -> int:
    from .diffusion import ConditioningSpec, FlowSchedule, load_denoiser, sample_grid
    from .scenes import load_scene

    model = load_denoiser(args.ckpt)
    f = model.cfg.compression_factor
    ref = load_scene(args.reference).images
    ref = ref[_diffusion_view_indices(ref.shape[0], args.views)]
    V, Tp, H, W = ref.shape[:4]
    cond = ConditioningSpec.from_grid(ref, args.cond, f)
    schedule = FlowSchedule(steps=args.steps, cfg_scale=args.cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    man = Manifest(out.parent, "sample", args.seed, {"sample": {"ckpt": str(args.ckpt), "cond": args.cond, "steps": args.steps, "cfg": args.cfg, "reference": str(args.reference)}})
    t0 = time.perf_counter()
    frames, info = sample_grid(model, ref, cond, (V, Tp, H, W), schedule, args.seed)
    save_grid(out, frames, cond.cell_mask, {"steps": info["steps"], "cfg_scale": info["cfg_scale"], "model_evals": info["model_evals"], "seed": args.seed})
    man.time("sample", time.perf_counter() - t0)
    man.extra.update(info)
    man.write()
    return 0


def _diffusion_view_indices(V: int, n: int) -> list[int]:
    from .recon import split_views

    return split_views(V, n)[0] if V > n else list(range(V))


def cmd_train_recon(args) -> int:
    from .recon import ReconConfig, ReconTrainConfig, load_recon, save_recon, train_recon
    from .scenes import load_dataset

    flat = _flatten_config(args.config)
    model = load_recon(args.ckpt_in) if args.ckpt_in else None
    cfg = model.cfg if model else _pick(ReconConfig, flat)
    tc = _pick(ReconTrainConfig, flat, iters=args.iters, seed=args.seed, lr=args.lr)
    scenes = load_dataset(args.scenes)
    out = Path(args.ckpt_out)
    out.parent.mkdir(parents=True, exist_ok=True)
    man = Manifest(out.parent, f"train-recon {args.stage}", tc.seed, {"recon": asdict(cfg), "train": asdict(tc)})
    t0 = time.perf_counter()
    model, losses = train_recon(scenes, cfg, args.stage, tc, model=model)
    save_recon(out, model)
    np.savetxt(str(out) + ".loss.csv", np.asarray(losses), fmt="%.8f", header="loss", comments="")
    man.time(f"train-recon-{args.stage}", time.perf_counter() - t0)
    man.extra.update(final_loss=float(np.mean(losses[-20:])), parameters=model.num_parameters())
    man.write()
    return 0


def cmd_reconstruct(args) -> int:
    from .recon import load_recon, reconstruct

    model = load_recon(args.ckpt)
    frames, _ = load_grid(args.grid)
    frames = frames[_diffusion_view_indices(frames.shape[0], model.cfg.source_views)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest(out, "reconstruct", None, {"reconstruct": {"ckpt": str(args.ckpt), "grid": str(args.grid)}})
    t0 = time.perf_counter()
    sets, cams = reconstruct(model, frames)
    for t, g in enumerate(sets):
        write_ply(out / f"t{t:03d}.ply", g)
    write_camera_file(out / "cameras", cams)
    man.time("reconstruct", time.perf_counter() - t0)
    man.extra.update(timesteps=len(sets), gaussians_per_timestep=len(sets[0]) if sets else 0)
    man.write()
    return 0


def _render_dir(ply_dir, cameras: list[Camera], out_dir, background, prefix: str = "") -> int:
    from .splat import rasterize

    plys = sorted(Path(ply_dir).glob("t*.ply"))
    if not plys:
        raise FileNotFoundError(f"no PLY files in {ply_dir}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for t, p in enumerate(plys):
        g = read_ply(p)
        for c, cam in enumerate(cameras):
            img = np.clip(rasterize(g, cam, background).image.data, 0, 1)
            write_ppm(out_dir / f"{prefix}c{c:02d}_t{t:03d}.ppm", img)
    return len(plys)


def cmd_render(args) -> int:
    cams = read_camera_file(args.camera)
    man = Manifest(args.out, "render", None, {"render": {"ply_dir": str(args.ply_dir), "camera": str(args.camera)}})
    t0 = time.perf_counter()
    n = _render_dir(args.ply_dir, cams, args.out, tuple(args.background))
    man.time("render", time.perf_counter() - t0)
    man.extra.update(frames=n, cameras=len(cams))
    man.write()
    return 0


def cmd_eval(args) -> int:
    from .metrics import MetricReport

    pred = sorted(Path(args.pred).glob("*.ppm"))
    if not pred:
        raise FileNotFoundError(f"no PPM images in {args.pred}")
    rep = MetricReport()
    for p in pred:
        g = Path(args.gt) / p.name
        if not g.exists():
            raise FileNotFoundError(f"ground truth {g} missing")
        rep.add(p.stem, read_ppm(p), read_ppm(g))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(rep.to_csv())
    print(f"mean psnr {rep.mean_psnr:.3f} dB  mean ssim {rep.mean_ssim:.4f}")
    return 0


def cmd_bench_attn(args) -> int:
    from fractions import Fraction

    from .attention import bench_attention, kept_fraction

    rows = ["V,T,H,W,d,flops_sparse,flops_dense,ms_sparse,ms_dense"]
    for V, T in zip(args.V, args.T):
        rep = bench_attention(V, T, args.H, args.W, args.d, repeats=args.repeats, seed=args.seed)
        if Fraction(rep.flops_sparse, rep.flops_dense) != kept_fraction(V, T):
            raise AssertionError(f"FLOP ratio {rep.flops_sparse}/{rep.flops_dense} != (T+V-1)/(TV) at V={V} T={T}")
        rows.append(f"{V},{T},{args.H},{args.W},{args.d},{rep.flops_sparse},{rep.flops_dense},{rep.ms_sparse:.4f},{rep.ms_dense:.4f}")
        log.info("bench V=%d T=%d speedup %.2fx", V, T, rep.speedup)
    text = "\n".join(rows) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_grad_check(args) -> int:
    from .gradsuite import run_suite

    results = run_suite(threshold=args.threshold)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} max_rel_err={r.error:.3e}")
    return 1 if failed else 0


# -- pipeline --------------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    seed: int = 7
    n_train: int = 20
    n_test: int = 4
    views: int = 8
    frames: int = 8
    size: int = 32
    diffusion_iters: int = 1500
    sample_steps: int = 40
    cfg_scale: float = 0.0
    cond: str = "both"
    recon_static_iters: int = 3000
    recon_dynamic_iters: int = 150
    recon_lr: float = 1e-3
    sections: dict = field(default_factory=dict, repr=False)


def _run_stage(name: str, man: Manifest, fn):
    t0 = time.perf_counter()
    log.info("stage %s", name)
    try:
        res = fn()
    except Exception as exc:  # noqa: BLE001 - reported with stage name
        raise StageError(name, exc) from exc
    man.time(name, time.perf_counter() - t0)
    man.write()
    return res


def cmd_pipeline(args) -> int:
    from .diffusion import ConditioningSpec, DenoiserConfig, FlowSchedule, TrainConfig, save_denoiser, sample_grid, train_denoiser
    from .metrics import MetricReport, psnr
    from .recon import (
        ReconConfig, ReconTrainConfig, canonical_frame, depth_warp_baseline, reconstruct,
        render_views, save_recon, split_views, train_recon,
    )
    from .scenes import SceneConfig, generate_dataset, save_dataset

    flat = _flatten_config(args.config)
    pc = _pick(PipelineConfig, flat, seed=args.seed)
    dcfg = _pick(DenoiserConfig, flat)
    rcfg = _pick(ReconConfig, flat, image_size=pc.size)
    scfg = _pick(SceneConfig, flat, size=pc.size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = {"pipeline": {k: v for k, v in asdict(pc).items() if k != "sections"}, "denoiser": asdict(dcfg), "recon": asdict(rcfg), "scenes": scfg.to_dict()}
    man = Manifest(out, "pipeline", pc.seed, config)
    write_config(out / "config", config)

    def gen():
        train = generate_dataset(pc.n_train, pc.views, pc.frames, pc.seed, scfg)
        test = generate_dataset(pc.n_test, pc.views, pc.frames, pc.seed + 1_000_003, scfg)
        save_dataset(out / "scenes" / "train", train)
        save_dataset(out / "scenes" / "test", test)
        return train, test

    train, test = _run_stage("gen-scenes", man, gen)
    sources, targets = split_views(pc.views, rcfg.source_views)

    def train_diff():
        tc = TrainConfig(iters=pc.diffusion_iters, seed=pc.seed)
        model, losses = train_denoiser([s.select_views(sources) for s in train], dcfg, tc)
        (out / "diffusion").mkdir(exist_ok=True)
        save_denoiser(out / "diffusion" / "denoiser.t4dg", model)
        np.savetxt(out / "diffusion" / "loss.csv", np.asarray(losses), fmt="%.8f", header="loss", comments="")
        return model

    denoiser = _run_stage("train-diffusion", man, train_diff)

    def sample():
        grids = []
        (out / "samples").mkdir(exist_ok=True)
        schedule = FlowSchedule(pc.sample_steps, cfg_scale=pc.cfg_scale)
        for i, sc in enumerate(test):
            ref = sc.images[sources]
            cond = ConditioningSpec.from_grid(ref, pc.cond, dcfg.compression_factor)
            frames, info = sample_grid(denoiser, ref, cond, ref.shape[:4], schedule, pc.seed * 1000 + i)
            save_grid(out / "samples" / f"scene_{i:04d}.t4dg", frames, cond.cell_mask, {"steps": info["steps"], "cfg_scale": info["cfg_scale"], "seed": pc.seed * 1000 + i})
            free = ~np.repeat(cond.cell_mask, dcfg.compression_factor, axis=1)
            grids.append((frames, psnr(frames[free], ref[free])))
        return grids

    grids = _run_stage("sample", man, sample)

    def train_rec():
        (out / "recon").mkdir(exist_ok=True)
        model, l1 = train_recon(train, rcfg, "static", ReconTrainConfig(iters=pc.recon_static_iters, lr=pc.recon_lr, seed=pc.seed))
        model, l2 = train_recon(train, rcfg, "dynamic", ReconTrainConfig(iters=pc.recon_dynamic_iters, lr=pc.recon_lr, seed=pc.seed), model=model)
        save_recon(out / "recon" / "recon.t4dg", model)
        np.savetxt(out / "recon" / "loss.csv", np.asarray(l1 + l2), fmt="%.8f", header="loss", comments="")
        return model

    recon = _run_stage("train-recon", man, train_rec)

    def recon_all():
        result = []
        for i, sc in enumerate(test):
            for tag, imgs in (("gt", sc.images[sources]), ("generated", grids[i][0])):
                sets, cams = reconstruct(recon, imgs)
                d = out / "gaussians" / tag / f"scene_{i:04d}"
                d.mkdir(parents=True, exist_ok=True)
                for t, g in enumerate(sets):
                    write_ply(d / f"t{t:03d}.ply", g)
                write_camera_file(d / "cameras", cams)
                result.append((i, tag, d))
        return result

    recs = _run_stage("reconstruct", man, recon_all)

    def render():
        for i, tag, d in recs:
            sc = test[i]
            frame = canonical_frame([sc.cameras[s] for s in sources], sc.depths[sources])
            cams = [frame.camera(sc.cameras[t]) for t in targets]
            write_camera_file(d / "target_cameras", cams)
            _render_dir(d, cams, out / "renders" / tag / f"scene_{i:04d}", sc.background)
            if tag == "gt":
                base = out / "renders" / "baseline" / f"scene_{i:04d}"
                gt = out / "renders" / "truth" / f"scene_{i:04d}"
                base.mkdir(parents=True, exist_ok=True)
                gt.mkdir(parents=True, exist_ok=True)
                for c, tv in enumerate(targets):
                    warped = depth_warp_baseline(sc, sources, tv)
                    for t in range(sc.T):
                        write_ppm(base / f"c{c:02d}_t{t:03d}.ppm", warped[t])
                        write_ppm(gt / f"c{c:02d}_t{t:03d}.ppm", sc.images[tv, t])
        return None

    _run_stage("render", man, render)

    def evaluate():
        summary = {}
        for tag in ("gt", "generated", "baseline"):
            rep = MetricReport()
            for i in range(len(test)):
                pred_dir = out / "renders" / tag / f"scene_{i:04d}"
                gt_dir = out / "renders" / "truth" / f"scene_{i:04d}"
                for p in sorted(pred_dir.glob("*.ppm")):
                    rep.add(f"scene_{i:04d}/{p.stem}", read_ppm(p), read_ppm(gt_dir / p.name))
            (out / "eval").mkdir(exist_ok=True)
            (out / "eval" / f"{tag}.csv").write_text(rep.to_csv())
            summary[tag] = (rep.mean_psnr, rep.mean_ssim)
        lines = ["source,psnr,ssim"] + [f"{k},{v[0]:.6f},{v[1]:.6f}" for k, v in summary.items()]
        lines.append(f"grid_sample_psnr,{float(np.mean([g[1] for g in grids])):.6f},")
        lines.append(f"recon_margin_db,{summary['gt'][0] - summary['baseline'][0]:.6f},")
        (out / "eval" / "summary.csv").write_text("\n".join(lines) + "\n")
        return summary

    summary = _run_stage("eval", man, evaluate)
    man.extra.update(
        recon_psnr=round(summary["gt"][0], 4),
        generated_recon_psnr=round(summary["generated"][0], 4),
        baseline_psnr=round(summary["baseline"][0], 4),
        margin_db=round(summary["gt"][0] - summary["baseline"][0], 4),
    )
    man.write()
    print(f"recon {summary['gt'][0]:.2f} dB  baseline {summary['baseline'][0]:.2f} dB  margin {summary['gt'][0] - summary['baseline'][0]:+.2f} dB")
    return 0


# -- argument parsing --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="t4dg", description="Desk-scale 4D generation and reconstruction toolkit.")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-scenes", help="render a synthetic blob-scene dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=20)
    s.add_argument("--views", type=int, default=8)
    s.add_argument("--frames", type=int, default=8)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config")
    s.set_defaults(fn=cmd_gen_scenes)

    s = sub.add_parser("train-diffusion", help="train the grid denoiser")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--scenes")
    s.add_argument("--iters", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_train_diffusion)

    s = sub.add_parser("sample", help="sample a 4D grid from reference frames")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--reference", required=True, help="scene directory supplying the reference frames")
    s.add_argument("--cond", choices=("fixed", "freeze", "both"), default="both")
    s.add_argument("--steps", type=int, default=40)
    s.add_argument("--cfg", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--views", type=int, default=4)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sample)

    s = sub.add_parser("train-recon", help="train one reconstruction stage")
    s.add_argument("--scenes", required=True)
    s.add_argument("--stage", choices=("static", "dynamic"), required=True)
    s.add_argument("--ckpt-in")
    s.add_argument("--ckpt-out", required=True)
    s.add_argument("--config")
    s.add_argument("--iters", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_train_recon)

    s = sub.add_parser("reconstruct", help="predict Gaussians from a grid")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--grid", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_reconstruct)

    s = sub.add_parser("render", help="render per-timestep PLY files through a camera path")
    s.add_argument("--ply-dir", required=True)
    s.add_argument("--camera", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--background", type=float, nargs=3, default=(0.1, 0.1, 0.12))
    s.set_defaults(fn=cmd_render)

    s = sub.add_parser("eval", help="PSNR/SSIM of predicted vs ground-truth PPM frames")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("bench-attn", help="sparse vs dense fused attention benchmark")
    s.add_argument("--V", type=int, nargs="+", default=[16])
    s.add_argument("--T", type=int, nargs="+", default=[16])
    s.add_argument("--H", type=int, default=4)
    s.add_argument("--W", type=int, default=4)
    s.add_argument("--d", type=int, default=16)
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_bench_attn)

    s = sub.add_parser("grad-check", help="finite-difference checks of every differentiable module")
    s.add_argument("--threshold", type=float, default=2e-3)
    s.set_defaults(fn=cmd_grad_check)

    s = sub.add_parser("pipeline", help="run every stage end to end")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--out", default="runs/pipeline")
    s.add_argument("--config")
    s.set_defaults(fn=cmd_pipeline)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 with usage on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s")
    if args.command == "bench-attn" and len(args.V) != len(args.T):
        parser.error("--V and --T need the same number of values")
    try:
        return args.fn(args)
    except StageError as exc:
        print(f"t4dg: stage {exc.stage} failed: {exc.cause!r}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every subcommand is a stage
        print(f"t4dg: stage {args.command} failed: {exc!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
