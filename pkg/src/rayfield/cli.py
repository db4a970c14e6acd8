"""Command-line interface.

Subcommands cover the full workflow: ``make-scene`` (synthesize a dataset),
``match`` (oracle matcher or external-file ingestion), ``train``, ``render``,
``extract-mesh`` and ``eval``.  ``--seed``, ``--config``, ``--ablation`` and
``--noise`` are accepted uniformly by every subcommand (those that do not use
one simply ignore it).

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import numpy as np

ABLATION_PRESETS = {
    "full": dict(use_kre=True, use_mrc=True, use_le=True, use_la=True),
    "baseline": dict(use_kre=False, use_mrc=False, use_le=False, use_la=False),
    "kre": dict(use_kre=True, use_mrc=False, use_le=False, use_la=False),
    "kre_mrc": dict(use_kre=True, use_mrc=True, use_le=False, use_la=False),
    "le": dict(use_kre=False, use_mrc=False, use_le=True, use_la=False),
    "le_la": dict(use_kre=False, use_mrc=False, use_le=True, use_la=True),
}
_ABLATION_FLAGS = ("kre", "mrc", "le", "la")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_ablation(spec: str) -> dict:
    """Preset name or comma-separated subset of kre,mrc,le,la."""
    spec = spec.strip().lower()
    if spec in ABLATION_PRESETS:
        return dict(ABLATION_PRESETS[spec])
    flags = dict.fromkeys(_ABLATION_FLAGS, False)
    for token in filter(None, (t.strip() for t in spec.split(","))):
        if token not in flags:
            raise UsageError(
                f"unknown ablation token '{token}' (presets: {sorted(ABLATION_PRESETS)}, "
                f"flags: {_ABLATION_FLAGS})"
            )
        flags[token] = True
    return {f"use_{k}": v for k, v in flags.items()}


def _shared_flags(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", type=Path, default=None, help="JSON training-config overrides")
    p.add_argument("--ablation", default="full", help="preset or comma list of kre,mrc,le,la")
    p.add_argument("--noise", choices=["none", "low", "high"], default="high")


def build_parser() -> _Parser:
    p = _Parser(prog="rayfield", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sc = sub.add_parser("make-scene", help="render a synthetic dataset directory")
    sc.add_argument("--out", type=Path, required=True)
    sc.add_argument("--scene", default="sphere_box")
    sc.add_argument("--views", type=int, default=20)
    sc.add_argument("--test-views", type=int, default=4)
    sc.add_argument("--size", type=int, default=96)
    sc.add_argument("--radius", type=float, default=3.0)
    sc.add_argument("--fov-deg", type=float, default=45.0)
    _shared_flags(sc)

    mt = sub.add_parser("match", help="write matches.txt for a dataset")
    mt.add_argument("--dataset", type=Path, required=True)
    mt.add_argument("--external", type=Path, default=None, help="ingest an existing match file")
    mt.add_argument("--points-per-pair", type=int, default=48)
    mt.add_argument("--max-pair-angle", type=float, default=65.0)
    mt.add_argument("--mismatch-rate", type=float, default=0.0)
    _shared_flags(mt)

    tr = sub.add_parser("train", help="joint pose + field optimization")
    tr.add_argument("--dataset", type=Path, required=True)
    tr.add_argument("--out", type=Path, required=True, help="checkpoint file to write")
    tr.add_argument("--iterations", type=int, default=None)
    tr.add_argument("--log", type=Path, default=None, help="metrics JSONL (default: <out>.log)")
    tr.add_argument("--freeze-poses", action="store_true")
    _shared_flags(tr)

    rd = sub.add_parser("render", help="render dataset views from a checkpoint")
    rd.add_argument("--checkpoint", type=Path, required=True)
    rd.add_argument("--dataset", type=Path, required=True)
    rd.add_argument("--out", type=Path, required=True)
    rd.add_argument("--split", choices=["train", "test", "all"], default="test")
    _shared_flags(rd)

    ms = sub.add_parser("extract-mesh", help="marching-cubes mesh from a checkpoint")
    ms.add_argument("--checkpoint", type=Path, required=True)
    ms.add_argument("--out", type=Path, required=True)
    ms.add_argument("--resolution", type=int, default=96)
    _shared_flags(ms)

    ev = sub.add_parser("eval", help="synthesis + reconstruction + pose metrics")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--dataset", type=Path, required=True)
    ev.add_argument("--out", type=Path, required=True, help="report directory")
    ev.add_argument("--refine-steps", type=int, default=150)
    ev.add_argument("--mesh-resolution", type=int, default=96)
    ev.add_argument("--icp", action="store_true")
    _shared_flags(ev)
    return p


def _load_config(args, dataset=None, **extra):
    from .pipeline import TrainConfig, config_from_dict, config_to_dict

    base = TrainConfig()
    data = config_to_dict(base)
    if args.config is not None:
        data.update(json.loads(Path(args.config).read_text()))
    data.update(parse_ablation(args.ablation))
    data["seed"] = args.seed
    data.update(extra)
    # short runs: shrink the warm-up so the schedule stays valid
    iters = data.get("iterations", 0)
    if 0 < iters <= data.get("warmup_iterations", 500):
        data["warmup_iterations"] = iters // 10
    return config_from_dict(data)


def _cmd_make_scene(args) -> int:
    from .geometry import Intrinsics
    from .scenes import build_scene, make_dataset, save_dataset

    import math

    scene = build_scene(args.scene, seed=args.seed)
    K = Intrinsics.from_fov_x(args.size, args.size, math.radians(args.fov_deg))
    ds = make_dataset(
        scene,
        K,
        n_train=args.views,
        n_test=args.test_views,
        radius=args.radius,
        noise=args.noise,
        rng=args.seed,
    )
    save_dataset(ds, args.out, noise_preset=args.noise)
    print(f"wrote {len(ds.views)} views to {args.out}")
    return 0


def _pair_angle_deg(ca, cb) -> float:
    import math

    na, nb = np.linalg.norm(ca), np.linalg.norm(cb)
    cos = float(np.dot(ca, cb) / (na * nb))
    return math.degrees(math.acos(min(1.0, max(-1.0, cos))))


def oracle_match_dataset(ds, n_points: int, max_pair_angle: float, seed: int, mismatch_rate: float = 0.0):
    """All-train-pair oracle matching within an angular separation budget."""
    from .correspond import NoOverlapError, inject_mismatches, oracle_detect_and_match

    if ds.scene is None:
        raise ValueError("oracle matching needs an analytic scene (scene.json)")
    views = ds.train_views()
    rng = np.random.default_rng(seed)
    pairs = [
        (a, b)
        for a in range(len(views))
        for b in range(a + 1, len(views))
        if views[a].pose_gt is not None and views[b].pose_gt is not None
    ]
    close = [
        (a, b)
        for a, b in pairs
        if _pair_angle_deg(views[a].pose_gt.t, views[b].pose_gt.t) <= max_pair_angle
    ]
    if close:  # sparse rigs may have no pair inside the angle budget
        pairs = close
    matches = []
    for a, b in pairs:
        try:
            matches.extend(
                oracle_detect_and_match(
                    ds.scene, views[a].K, views[a].pose_gt, views[b].pose_gt,
                    a, b, n_points, rng=rng,
                )
            )
        except NoOverlapError:
            continue
    if mismatch_rate > 0:
        matches = inject_mismatches(matches, mismatch_rate, rng=np.random.default_rng((seed, 7)))
    return matches


def _cmd_match(args) -> int:
    from .correspond import load_external_matches, save_matches
    from .scenes import load_dataset

    ds = load_dataset(args.dataset)
    if args.external is not None:
        K = ds.views[0].K
        matches = load_external_matches(args.external, K.width, K.height)
    else:
        matches = oracle_match_dataset(
            ds, args.points_per_pair, args.max_pair_angle, args.seed, args.mismatch_rate
        )
    save_matches(args.dataset / "matches.txt", matches)
    print(f"wrote {len(matches)} matches to {args.dataset / 'matches.txt'}")
    return 0


def _cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .correspond import load_external_matches
    from .pipeline import build_state, train
    from .scenes import load_dataset, noise_scale_for

    ds = load_dataset(args.dataset)
    if ds.scene is None and all(v.pose_gt is not None for v in ds.views):
        # NeRF-Synthetic style input: file poses are ground truth; perturb here.
        from .geometry import perturb_pose

        n = noise_scale_for(args.noise)
        rng = np.random.default_rng(args.seed)
        for v in ds.views:
            v.pose_init = perturb_pose(v.pose_gt, n, rng)
    extra = {}
    if args.iterations is not None:
        extra["iterations"] = args.iterations
    if args.freeze_poses:
        extra["optimize_poses"] = False
    cfg = _load_config(args, **extra)
    K = ds.views[0].K
    mfile = args.dataset / "matches.txt"
    if not mfile.exists():
        raise FileNotFoundError(f"{mfile} not found; run `rayfield match` first")
    matches = load_external_matches(mfile, K.width, K.height)
    state = build_state(ds, cfg)
    log_path = args.log if args.log is not None else args.out.with_suffix(".log")
    if cfg.iterations > 0:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("")
    records = train(state, ds, matches, cfg, log_path=log_path)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out, state, cfg)
    last = records[-1] if records else {}
    print(
        f"trained {cfg.iterations} iterations; final loss "
        f"{last.get('loss', float('nan')):.5f}; checkpoint: {args.out}"
    )
    return 0


def _cmd_render(args) -> int:
    import imageio.v3 as iio

    from .checkpoint import load_checkpoint
    from .evaluation import render_image
    from .pipeline import auto_near_far
    from .scenes import load_dataset

    state, cfg = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)
    near, far = (cfg.near, cfg.far) if cfg.near and cfg.far else auto_near_far(ds)
    args.out.mkdir(parents=True, exist_ok=True)
    picked = [
        (i, v)
        for i, v in enumerate(ds.views)
        if args.split == "all" or v.split == args.split
    ]
    train_ids = {id(v): k for k, v in enumerate(ds.train_views())}
    for i, view in picked:
        # train views render at their optimized pose, others at the stored one
        k = train_ids.get(id(view))
        pose = state.poses[k].to_rigid() if k is not None and k < len(state.poses) else view.pose_init
        img = render_image(
            state.model,
            view.K,
            pose,
            near,
            far,
            n_samples=cfg.n_samples,
            iteration=state.iteration,
            background=cfg.background,
        )
        iio.imwrite(args.out / f"render_{i:04d}.png", (np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8))
    print(f"rendered {len(picked)} views to {args.out}")
    return 0


def write_obj(path: Path, verts: np.ndarray, faces: np.ndarray) -> None:
    with open(path, "w") as f:
        for v in verts:
            f.write(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}\n")
        for tri in faces:
            f.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")


def _cmd_extract_mesh(args) -> int:
    from .checkpoint import load_checkpoint
    from .evaluation import extract_mesh, field_sdf_numpy

    state, cfg = load_checkpoint(args.checkpoint)
    sdf = field_sdf_numpy(state.model, state.iteration)
    verts, faces = extract_mesh(sdf, cfg.grid.bounding_box, resolution=args.resolution)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_obj(args.out, verts, faces)
    print(f"wrote mesh with {len(verts)} vertices / {len(faces)} faces to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .evaluation import (
        EmptySurfaceError,
        extract_mesh,
        field_sdf_numpy,
        mesh_metrics,
        ssim_metric,
        test_time_refine,
    )
    from .geometry import procrustes_align
    from .pipeline import auto_near_far, pose_errors
    from .scenes import load_dataset

    state, cfg = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)
    near, far = (cfg.near, cfg.far) if cfg.near and cfg.far else auto_near_far(ds)
    report: dict = {}

    sim = None
    errs = pose_errors(state, ds)
    if errs is not None:
        report["rotation_error_deg"], report["translation_error"] = errs
        gt = [v.pose_gt for v in ds.train_views()]
        sim, _, _ = procrustes_align([p.to_rigid() for p in state.poses], gt)

    test_views = ds.test_views()
    psnrs, ssims = [], []
    for view in test_views:
        if view.pose_gt is not None and sim is not None:
            init = sim.apply_pose(view.pose_gt)
        else:
            init = view.pose_init
        _, view_psnr, rendered = test_time_refine(
            state,
            view.image,
            view.K,
            init,
            steps=args.refine_steps,
            near=near,
            far=far,
            n_samples=cfg.n_samples,
            background=cfg.background,
            seed=args.seed,
            return_render=True,
        )
        psnrs.append(view_psnr)
        ssims.append(ssim_metric(rendered, view.image))
    if psnrs:
        report["psnr"] = float(np.mean(psnrs))
        report["ssim"] = float(np.mean(ssims))

    if ds.scene is not None:
        try:
            sdf = field_sdf_numpy(state.model, state.iteration)
            verts, faces = extract_mesh(sdf, cfg.grid.bounding_box, args.mesh_resolution)
            report.update(
                mesh_metrics(verts, faces, ds.scene, sim=sim, use_icp=args.icp, rng=args.seed)
            )
        except EmptySurfaceError:
            report["mesh_error"] = "empty surface"

    args.out.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} {v}" for k, v in report.items()]
    (args.out / "metrics.txt").write_text("\n".join(lines) + "\n")
    (args.out / "metrics.json").write_text(json.dumps(report, indent=1))
    print("\n".join(lines))
    return 0


_COMMANDS = {
    "make-scene": _cmd_make_scene,
    "match": _cmd_match,
    "train": _cmd_train,
    "render": _cmd_render,
    "extract-mesh": _cmd_extract_mesh,
    "eval": _cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
