"""Command-line front end: ``sparselab <command> ...``.

Exit codes: 0 success, 1 runtime failure (missing prediction, divergence,
bad input files), 2 usage or config-schema error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, dump_config, load_config, to_dict
from .metrics import ExternalScorer, MissingPrediction, evaluate_submission, psnr, ssim_box
from .pipelines import (DistillConfig, FusionConfig, MissingReferences, TrainConfig, TrainingDiverged, distill, fuse,
                        load_run, render_result, render_views, train, write_renders)
from .plotting import loss_curve, metric_bars
from .scene_io import (MANIFEST, BACKGROUNDS, Camera, SceneFormatError, SyntheticSceneSpec, default_spec, load_scene,
                       read_png, save_scene, select_track, synthesize_scene, write_depth, write_png)

log = logging.getLogger("sparselab")


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int | None
    build: str
    started: str = ""
    finished: str = ""
    outputs: list[str] = field(default_factory=list)

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2) + "\n")
        return path


def build_id() -> str:
    """Package version plus a short hash of the package sources."""
    h = hashlib.sha1()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _scene_dirs(path: Path) -> list[Path]:
    if (path / MANIFEST).exists():
        return [path]
    dirs = sorted(p for p in path.iterdir() if (p / MANIFEST).exists()) if path.is_dir() else []
    if not dirs:
        raise SceneFormatError(f"{path}: not a scene directory (no {MANIFEST}) and holds no scenes")
    return dirs


def _map(fn, jobs_args, jobs: int):
    if jobs <= 1 or len(jobs_args) <= 1:
        return [fn(*a) for a in jobs_args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, *a) for a in jobs_args]
        return [f.result() for f in futures]


# -- commands ----------------------------------------------------------------------

def _train_one(scene_dir: Path, cfg: TrainConfig, out: Path, track) -> list[str]:
    scene = select_track(load_scene(scene_dir), track)
    run = out / "scenes" / scene_dir.name
    result = train(scene, cfg, run)
    (run / "log.csv").write_text(result.log_csv())
    loss_curve(result.log, run / "loss.png", f"{scene.name}: {cfg.method}")
    imgs = render_result(result, scene.target_cameras, scene.background_rgb)
    write_renders(imgs, [t.name for t in scene.targets], out / "renders" / scene_dir.name)
    return [str(run / "log.csv"), str(run / "loss.png"), str(out / "renders" / scene_dir.name)]


def cmd_train(args) -> int:
    cfg = load_config(args.config, TrainConfig) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.resolution_scale is not None:
        cfg = replace(cfg, resolution_scale=args.resolution_scale)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.json")
    man = RunManifest("train", sys.argv[1:], to_dict(cfg), cfg.seed, build_id(), _now())
    scenes = _scene_dirs(Path(args.scene))
    outputs = _map(_train_one, [(s, cfg, out, args.track) for s in scenes], args.jobs)
    man.outputs = [o for group in outputs for o in group]
    man.finished = _now()
    man.write(out)
    print(f"trained {len(scenes)} scene(s) -> {out}")
    return 0


def _distill_one(scene_dir: Path, cfg: DistillConfig, out: Path, track, resume: bool) -> list[str]:
    scene = select_track(load_scene(scene_dir), track)
    run = out / "scenes" / scene_dir.name
    res = distill(scene, cfg, run, resume=resume)
    rows = [(s, f"{stage}:{t}", w, v) for stage, r in (("teacher", res.teacher), ("student", res.student),
                                                         ("finetune", res.final)) for s, t, w, v in r.log]
    loss_curve([r for r in rows if r[1].endswith("total")], run / "loss.png", f"{scene.name}: distill")
    imgs = render_result(res.final, scene.target_cameras, scene.background_rgb)
    write_renders(imgs, [t.name for t in scene.targets], out / "renders" / scene_dir.name)
    return [str(run), str(out / "renders" / scene_dir.name)]


def cmd_distill(args) -> int:
    cfg = load_config(args.config, DistillConfig) if args.config else DistillConfig()
    if args.seed is not None:
        cfg = replace(cfg, teacher=replace(cfg.teacher, seed=args.seed), student=replace(cfg.student, seed=args.seed))
    if args.resolution_scale is not None:
        cfg = replace(cfg, teacher=replace(cfg.teacher, resolution_scale=args.resolution_scale))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.json")
    man = RunManifest("distill", sys.argv[1:], to_dict(cfg), cfg.teacher.seed, build_id(), _now())
    scenes = _scene_dirs(Path(args.scene))
    outputs = _map(_distill_one, [(s, cfg, out, args.track, args.resume) for s in scenes], args.jobs)
    man.outputs = [o for group in outputs for o in group]
    man.finished = _now()
    man.write(out)
    print(f"distilled {len(scenes)} scene(s) -> {out}")
    return 0


def _load_poses(path: Path, use_inputs: bool) -> list[tuple[str, Camera]]:
    """Scene directory (target or input cameras) or a JSON list of {name, camera}."""
    if path.is_dir():
        scene = load_scene(path)
        views = scene.input_views if use_inputs else scene.targets
        return [(v.name, v.camera) for v in views]
    data = json.loads(path.read_text())
    entries = data.get("cameras", data) if isinstance(data, dict) else data
    return [(e.get("name", f"{i:03d}"), Camera.from_dict(e["camera"] if "camera" in e else e).validate())
            for i, e in enumerate(entries)]


def cmd_render(args) -> int:
    ck = Path(args.checkpoint)
    if (ck / "checkpoints").is_dir():
        ck = ck / "checkpoints"
    coarse, fine, ccfg, fcfg = load_run(ck)
    poses = _load_poses(Path(args.poses), args.inputs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bg = None if BACKGROUNDS[args.background] is None else np.array(BACKGROUNDS[args.background])
    scale = args.resolution_scale or 1.0
    imgs, depths = render_views(coarse, fine, ccfg, [c for _, c in poses], background=bg, scale=scale,
                                with_depth=True, fine_cfg=fcfg)
    names = [n for n, _ in poses]
    write_renders(imgs, names, out)
    if args.depth:
        for n, d in zip(names, depths):
            write_depth(out / f"{n}.depth", d.astype(np.float32))
    man = RunManifest("render", sys.argv[1:], {"checkpoint": str(ck), "poses": args.poses, "scale": scale}, None,
                      build_id(), _now(), _now(), [str(out)])
    man.write(out)
    print(f"rendered {len(names)} view(s) -> {out}")
    return 0


def _read_set(directory: Path, names: list[str]) -> list[np.ndarray]:
    out = []
    for n in names:
        p = directory / f"{n}.png"
        if not p.exists():
            raise FileNotFoundError(f"missing image {p}")
        out.append(read_png(p)[..., :3] / 255.0)
    return out


def cmd_fuse(args) -> int:
    cfg = load_config(args.config, FusionConfig) if args.config else FusionConfig()
    dirs = [Path(d) for d in args.candidates]
    names = sorted(p.stem for p in dirs[0].glob("*.png"))
    if not names:
        raise FileNotFoundError(f"{dirs[0]}: no PNG images")
    cands = [_read_set(d, names) for d in dirs]
    refs = _read_set(Path(args.references), names) if args.references else None
    maps = None
    if args.weight_maps:
        maps = [[np.load(Path(d) / f"{n}.npy") for n in names] for d in args.weight_maps]
    fused = fuse(cands, cfg, refs, maps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for n, img in zip(names, fused):
        write_png(out / f"{n}.png", np.round(np.clip(img, 0, 1) * 255).astype(np.uint8))
    if cfg.mode == "metric_select":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["view", "chosen"] + [f"score_{i}" for i in range(len(dirs))])
        score = psnr if cfg.metric == "psnr" else ssim_box
        for n, v, ref in zip(names, range(len(names)), refs):
            s = [score(c[v], ref) for c in cands]
            w.writerow([n, int(np.argmax(s))] + [f"{x:.6f}" for x in s])
        (out / "selection.csv").write_text(buf.getvalue())
    dump_config(cfg, out / "config.json")
    RunManifest("fuse", sys.argv[1:], to_dict(cfg), None, build_id(), _now(), _now(), [str(out)]).write(out)
    print(f"fused {len(names)} view(s) from {len(dirs)} candidates -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    sources = json.loads(Path(args.sources).read_text()) if args.sources else None
    scorer = ExternalScorer(args.perceptual_cmd) if args.perceptual_cmd else None
    report = evaluate_submission(args.pred, args.gt, sources, scorer)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_csv())
    fig = Path(args.figure) if args.figure else out.with_suffix(".png")
    metric_bars(report, fig)
    print(report.table(), end="")
    return 0


def cmd_synth(args) -> int:
    spec = load_config(args.config, SyntheticSceneSpec) if args.config else default_spec()
    seed = args.seed if args.seed is not None else 0
    if args.resolution_scale is not None:
        spec = replace(spec, image_size=max(1, int(round(spec.image_size * args.resolution_scale))))
    scene = select_track(synthesize_scene(spec, seed), args.track)
    out = Path(args.out)
    save_scene(scene, out)
    (out / "spec.json").write_text(json.dumps(to_dict(spec), indent=2, sort_keys=True) + "\n")
    RunManifest("synth", sys.argv[1:], to_dict(spec), seed, build_id(), _now(), _now(), [str(out)]).write(out)
    print(f"synthesized {scene.name}: {len(scene.input_views)} inputs, {len(scene.targets)} targets -> {out}")
    return 0


# -- parser ------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--jobs", type=int, default=1, help="scenes processed in parallel")
    p.add_argument("--resolution-scale", type=float, help="override the resolution scale")
    p.add_argument("--track", type=int, choices=(1, 2), help="keep 3 (track 1) or 9 (track 2) input views")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sparselab", description="Sparse-view neural rendering lab")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a field on a scene (or a folder of scenes)")
    p.add_argument("scene")
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("distill", help="teacher-student distillation")
    p.add_argument("scene")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true", help="reuse finished stage checkpoints")
    _common(p)
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("render", help="render a checkpoint at given poses")
    p.add_argument("checkpoint", help="run directory or its checkpoints/ folder")
    p.add_argument("--poses", required=True, help="scene directory or JSON camera list")
    p.add_argument("--inputs", action="store_true", help="use the scene's input cameras, not its targets")
    p.add_argument("--out", required=True)
    p.add_argument("--depth", action="store_true", help="also write depth rasters")
    p.add_argument("--background", default="white", choices=sorted(BACKGROUNDS))
    _common(p, config=False)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("fuse", help="fuse candidate image sets")
    p.add_argument("candidates", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--references", help="reference images (required for metric_select)")
    p.add_argument("--weight-maps", nargs="+", help="per-candidate folders of <view>.npy weight maps")
    _common(p)
    p.set_defaults(fn=cmd_fuse)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--out", required=True, help="CSV path; the figure goes next to it")
    p.add_argument("--figure", help="figure path (default: CSV path with .png)")
    p.add_argument("--sources", help="JSON map scene -> source label")
    p.add_argument("--perceptual-cmd", help="external scorer command with {pred} {gt} {box} placeholders")
    _common(p, config=False)
    p.set_defaults(fn=cmd_evaluate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MissingPrediction as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, MissingReferences, SceneFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
