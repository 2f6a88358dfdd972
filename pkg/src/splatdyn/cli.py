"""Command-line entry point: ``python -m splatdyn <command> ...``."""

import argparse
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .dynamics import DynamicsConfig, config_from_text, constant_velocity_weights, init_dynamics_weights, rollout
from .features import GaussianHead, ParticleFrame, to_gaussians
from .geometry import Camera
from .render import gradient_check, random_scene, rasterize, rasterize_reference
from .sfc import GridSpec
from .tspc import CodeLayout, merge_cloud, serialize_cloud


def _serialize(args):
    frames = io.load_trajectory(args.traj)
    positions = [f.p for f in frames]
    spec = GridSpec.from_points(np.concatenate(positions), args.grid)
    tau = args.tau if args.tau is not None else CodeLayout.for_frames(len(frames)).tau_bits
    return serialize_cloud(positions, 0, spec, args.pattern, CodeLayout(tau))


def _emit_codes(cloud, args):
    if getattr(args, "csv", None):
        io.write_codes_csv(cloud, args.csv)
    sys.stdout.write("".join(f"{int(c)}\n" for c in cloud.codes))


def cmd_serialize(args):
    _emit_codes(_serialize(args), args)


def cmd_merge(args):
    cloud, _ = merge_cloud(_serialize(args), args.shifts)
    _emit_codes(cloud, args)


def _load_head(weights, d, seed):
    if "head.w" in weights:
        return GaussianHead.from_dict(weights)
    return GaussianHead.init(d, seed=seed)


def _render_views(frame, head, cams, reference=False):
    scene = to_gaussians(frame, head)
    fn = rasterize_reference if reference else rasterize
    return [fn(scene, cam).pixels for cam in cams]


def _view_path(base, c, n):
    base = Path(base)
    return base if n == 1 else base.with_name(f"{base.stem}_cam{c}{base.suffix}")


def cmd_render(args):
    frames = io.load_trajectory(args.traj)
    if not 0 <= args.frame < len(frames):
        raise SystemExit(f"frame {args.frame} outside trajectory of {len(frames)} frames")
    frame = frames[args.frame]
    cams = io.load_rig(args.rig)
    head = _load_head(io.load_weights(args.head), frame.d_inv + frame.d_dyn, args.seed)
    for c, img in enumerate(_render_views(frame, head, cams, args.reference)):
        path = _view_path(args.out, c, len(cams))
        io.write_png(img, path)
        print(f"wrote {path}")


def _load_config(path):
    if path is None:
        return DynamicsConfig()
    return config_from_text(Path(path).read_text())


def cmd_rollout(args):
    frames = io.load_trajectory(args.traj)
    if args.past > len(frames):
        raise SystemExit(f"--past {args.past} exceeds the {len(frames)} frames on file")
    cfg = _load_config(args.config)
    weights = io.load_weights(args.weights)
    cams = io.load_rig(args.rig)
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    preds = rollout(frames[:args.past], args.steps, cfg, weights)
    io.save_trajectory(preds, out / "predicted.3gst")
    head = _load_head(weights, frames[0].d_inv + frames[0].d_dyn, args.seed)
    for k, pred in enumerate(preds):
        views = _render_views(pred, head, cams)
        for c, img in enumerate(views):
            io.write_png(img, out / f"step{k + 1:02d}_cam{c}.png")
        gt_index = args.past + k
        line = f"step {k + 1}"
        if gt_index < len(frames):
            gt_views = _render_views(frames[gt_index], head, cams)
            scores = [io.psnr(a, b) for a, b in zip(gt_views, views)]
            line += f" psnr {np.mean(scores):.3f} dB"
        print(line)


def cmd_gradcheck(args):
    rng = np.random.default_rng(args.seed)
    cam = Camera(np.array([[60.0, 0, 15.5], [0, 60.0, 15.5], [0, 0, 1]]), np.eye(3), np.zeros(3), 32, 32)
    scene = random_scene(args.splats, rng, xy=0.5, scale=(0.05, 0.3), opacity=(0.2, 0.9))
    dL_dI = rng.normal(size=(cam.height, cam.width, 3))
    kw = {} if args.defaults else dict(alpha_cutoff=0.0, transmittance_min=0.0)
    rel, small = gradient_check(scene, cam, dL_dI, h=args.h, **kw)
    print(f"max relative error {rel:.3e}")
    print(f"max absolute error (|g| < 1e-4) {small:.3e}")


def knn_bruteforce(points, k=8, chunk=1024):
    """Exact k nearest neighbours (excluding self) by chunked brute force."""
    pts = np.asarray(points, dtype=np.float64)
    sq = np.einsum("ij,ij->i", pts, pts)
    out = np.empty((len(pts), k), dtype=np.int64)
    for lo in range(0, len(pts), chunk):
        q = pts[lo:lo + chunk]
        d = sq[lo:lo + chunk, None] - 2 * q @ pts.T + sq[None, :]
        d[np.arange(len(q)), np.arange(lo, lo + len(q))] = np.inf
        part = np.argpartition(d, k, axis=1)[:, :k]
        dd = np.take_along_axis(d, part, axis=1)
        out[lo:lo + len(q)] = np.take_along_axis(part, np.argsort(dd, axis=1), axis=1)
    return out


def bench_serialize(n, seed=0, pattern="z", repeats=3):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0.0, 1.0, (n, 3))
    spec = GridSpec.from_points(pts, 0.004)
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        serialize_cloud([pts], 0, spec, pattern, CodeLayout())
        best = min(best, time.perf_counter() - t0)
    return best


def cmd_bench(args):
    rng = np.random.default_rng(args.seed)
    if args.mode == "serialize":
        t = bench_serialize(args.n, args.seed, args.pattern)
        t2 = bench_serialize(2 * args.n, args.seed, args.pattern)
        print(f"serialize n={args.n} pattern={args.pattern}: {t:.4f} s")
        print(f"serialize n={2 * args.n}: {t2:.4f} s (growth x{t2 / t:.2f})")
    elif args.mode == "knn":
        pts = rng.uniform(0.0, 1.0, (args.n, 3))
        t0 = time.perf_counter()
        knn_bruteforce(pts, 8)
        print(f"knn (exact, k=8) n={args.n}: {time.perf_counter() - t0:.4f} s")
    else:
        w = h = args.size
        cam = Camera(np.array([[w * 0.8, 0, (w - 1) / 2], [0, w * 0.8, (h - 1) / 2], [0, 0, 1]]),
                     np.eye(3), np.zeros(3), w, h)
        scene = random_scene(args.n, rng)
        t0 = time.perf_counter()
        rasterize(scene, cam, workers=args.workers)
        print(f"rasterize n={args.n} {w}x{h}: {time.perf_counter() - t0:.4f} s")


def synth_rig(n_views=4, size=64, radius=1.5, height=0.8, center=(0.25, 0.25, 0.25)):
    center = np.asarray(center)
    cams = []
    for a in np.linspace(0.0, 2 * np.pi, n_views, endpoint=False):
        eye = center + np.array([radius * np.cos(a), radius * np.sin(a), height])
        cams.append(Camera.look_at(eye, center, focal=size, width=size, height=size))
    return cams


def synth_trajectory(n, frames, d_inv, d_dyn, velocity, seed=0, frozen_fraction=0.0):
    """Particles in ``[0, 0.5)^3`` translating by ``velocity`` per frame."""
    rng = np.random.default_rng(seed)
    p0 = rng.uniform(0.0, 0.5, (n, 3))
    f_inv = rng.normal(size=(n, d_inv))
    f_dyn = rng.normal(size=(n, d_dyn))
    frozen = rng.random(n) < frozen_fraction
    v = np.asarray(velocity, dtype=np.float64)
    return [ParticleFrame(p0 + np.where(frozen[:, None], 0.0, k * v), f_inv, f_dyn, frozen)
            for k in range(frames)]


def cmd_synth(args):
    traj = synth_trajectory(args.n, args.frames, args.d_inv, args.d_dyn, args.velocity,
                            args.seed, args.frozen)
    io.save_trajectory(traj, args.out)
    print(f"wrote {args.out}")
    if args.rig:
        io.save_rig(synth_rig(args.views, args.size), args.rig)
        print(f"wrote {args.rig}")
    if args.head:
        io.save_weights(GaussianHead.init(args.d_inv + args.d_dyn, seed=args.seed).to_dict(), args.head)
        print(f"wrote {args.head}")


def cmd_init_weights(args):
    cfg = _load_config(args.config)
    w = init_dynamics_weights(cfg, args.d_inv, args.d_dyn, seed=args.seed)
    if args.velocity is not None:
        w = constant_velocity_weights(w, args.velocity)
    w.update(GaussianHead.init(args.d_inv + args.d_dyn, seed=args.seed).to_dict())
    io.save_weights(w, args.out)
    print(f"wrote {args.out} ({len(w)} tensors)")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    parser = argparse.ArgumentParser(prog="splatdyn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        p = sub.add_parser(name, parents=[common], help=help)
        p.set_defaults(func=fn)
        return p

    for name, fn, help in (("serialize", cmd_serialize, "print sorted space-time codes"),
                           ("merge", cmd_merge, "print codes after temporal merging")):
        p = add(name, fn, help)
        p.add_argument("--traj", required=True)
        p.add_argument("--grid", type=float, default=0.004)
        p.add_argument("--pattern", choices=("z", "zt", "h", "ht"), default="z")
        p.add_argument("--tau", type=int, default=None)
        p.add_argument("--csv")
        if name == "merge":
            p.add_argument("--shifts", type=int, default=1)

    p = add("render", cmd_render, "render one frame of a trajectory")
    p.add_argument("--traj", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--rig", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reference", action="store_true", help="use the brute-force renderer")

    p = add("rollout", cmd_rollout, "predict future frames and render them")
    p.add_argument("--traj", required=True)
    p.add_argument("--past", type=int, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--config")
    p.add_argument("--weights", required=True)
    p.add_argument("--rig", required=True)
    p.add_argument("--outdir", required=True)

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of the renderer backward")
    p.add_argument("--splats", type=int, default=5)
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--defaults", action="store_true", help="keep the alpha cutoff and early stop")

    p = add("bench", cmd_bench, "timing report")
    p.add_argument("--n", type=int, default=1_000_000)
    p.add_argument("--mode", choices=("serialize", "knn", "rasterize"), default="serialize")
    p.add_argument("--pattern", choices=("z", "zt", "h", "ht"), default="z")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--workers", type=int, default=1)

    p = add("synth", cmd_synth, "write a synthetic translating trajectory")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--d-inv", type=int, default=16)
    p.add_argument("--d-dyn", type=int, default=32)
    p.add_argument("--velocity", type=float, nargs=3, default=(0.01, 0.0, 0.0))
    p.add_argument("--frozen", type=float, default=0.0, help="fraction of frozen particles")
    p.add_argument("--rig")
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--head")

    p = add("init-weights", cmd_init_weights, "write seeded dynamics and head weights")
    p.add_argument("--config")
    p.add_argument("--d-inv", type=int, default=16)
    p.add_argument("--d-dyn", type=int, default=32)
    p.add_argument("--velocity", type=float, nargs=3, default=None,
                   help="make the dynamics head predict this constant displacement")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
