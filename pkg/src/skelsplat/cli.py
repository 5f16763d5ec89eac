"""Command line: ``skelsplat {fit-canonical|train|render|interpolate|eval|make-oracle}``.

Exit codes: 0 success, 2 input error, 3 numerical abort.  Relative ``--out``
paths are resolved under ``$SKELSPLAT_OUTPUT_ROOT`` when it is set.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .autodiff import CheckpointError, load_checkpoint
from .autodiff.checkpoint import atomic_write_text
from .canonical import CanonicalFitConfig, cloud_view, fit_canonical
from .gaussians import GaussianCloud, init_from_points
from .io import DatasetError, load_dataset, load_manifest, load_points, write_image
from .losses import psnr
from .oracle import OracleSpec, export_dataset, make_dataset
from .render import Camera, RasterSettings, render
from .skeleton import SkeletonError, load_skeleton, parse_skeleton
from .training import NumericalAbort, TrainConfig, evaluate, load_model, render_frame, train_deformation

OUTPUT_ROOT_ENV = "SKELSPLAT_OUTPUT_ROOT"
EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("skelsplat")


class InputError(Exception):
    pass


def output_dir(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {p}")
    return p


def _background(s: str) -> tuple:
    vals = tuple(float(v) for v in s.split(","))
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("background must be r,g,b")
    return vals


def _attach_log(out: Path) -> None:
    handler = logging.FileHandler(out / "log.txt", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def cmd_make_oracle(args) -> int:
    spec = OracleSpec(
        num_bones=args.bones, points_per_part=args.points, amplitude_deg=args.amplitude, seed=args.seed,
        topology=args.topology, bulge=args.bulge, resolution=args.resolution, root_motion=args.root_motion,
    )
    out = output_dir(args.out)
    ds = make_dataset(spec, args.interval, args.policy, args.test_policy, args.seed, args.bundle_views)
    export_dataset(ds, out, init_points_per_part=args.init_points, init_seed=args.seed + 101)
    print(f"oracle dataset written to {out}")
    return EXIT_OK


def cmd_fit_canonical(args) -> int:
    root = _existing(args.dataset, "dataset")
    pts, cols = load_points(_existing(args.points, "point file"))
    obs = load_dataset(root, "train", args.background)
    views = obs.canonical_views()
    if not views:
        raise InputError(f"{root}: no observations at t = 0 to fit the canonical cloud")
    out = output_dir(args.out)
    _attach_log(out)
    cloud = init_from_points(pts, cols, sh_degree=args.sh_degree)
    cfg = CanonicalFitConfig(iterations=args.iterations, seed=args.seed, background=args.background)
    history: list[float] = []
    fitted = fit_canonical(cloud, views, cfg, history)
    fitted.save(out / "canonical.ckpt")
    _write_csv(out / "metrics" / "canonical_loss.csv", ["iteration", "loss"], list(enumerate(history)))
    held = [o for o in load_dataset(root, "test", args.background).frames if o.time == 0.0] if (root / "transforms_test.json").exists() else []
    rows = []
    for i, o in enumerate(held or views):
        img = render(cloud_view(fitted), o.camera, args.background, RasterSettings.fast()).image.data
        write_image(out / "renders" / f"canonical_{i:03d}.png", img)
        rows.append((o.name, psnr(np.clip(img, 0, 1), o.image)))
    _write_csv(out / "metrics" / "canonical_preview.csv", ["frame", "psnr"], rows)
    print(f"canonical cloud ({fitted.num_gaussians} Gaussians) written to {out / 'canonical.ckpt'}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    doc = {}
    if args.config:
        try:
            doc = json.loads(_existing(args.config, "config file").read_text())
        except json.JSONDecodeError as e:
            raise InputError(f"{args.config}: invalid JSON ({e})") from None
    overrides = {
        "steps": args.steps, "seed": args.seed, "lr_theta": args.lr_theta, "lr_phi": args.lr_phi,
        "lr_psi": args.lr_psi, "lr_radii": args.lr_radii, "checkpoint_interval": args.checkpoint_interval,
    }
    doc.update({k: v for k, v in overrides.items() if v is not None})
    if args.background is not None:
        doc["background"] = list(args.background)
    try:
        return TrainConfig.from_dict(doc)
    except TypeError as e:
        raise InputError(f"config: {e}") from None


def cmd_train(args) -> int:
    root = _existing(args.dataset, "dataset")
    skeleton = load_skeleton(_existing(args.skeleton, "skeleton file"))
    cloud = GaussianCloud.load(_existing(args.canonical, "canonical checkpoint"))
    cfg = _train_config(args)
    obs = load_dataset(root, "train", cfg.background)
    out = output_dir(args.out)
    _attach_log(out)
    atomic_write_text(out / "effective_config.json", json.dumps(cfg.to_dict(), indent=1))

    def progress(step, report):
        if step % max(1, args.log_every) == 0:
            log.info("step %d total %.6f perceptual %.6f motion %.6f detail %.6f", step, report.total.item(),
                     report.perceptual, report.motion, report.detail)

    res = train_deformation(cloud, skeleton, obs, cfg, out / "checkpoints", args.resume, progress=progress)
    final = out / "checkpoints" / "final.ckpt"
    _tag_canonical(final, Path(args.canonical).resolve())
    h = res.history
    _write_csv(out / "metrics" / "loss_history.csv", ["step", "total", "perceptual", "motion", "detail"],
               [(i, h["total"][i], h["perceptual"][i], h["motion"][i], h["detail"][i]) for i in range(len(h["total"]))])
    print(f"trained {res.step} steps; model written to {final}")
    return EXIT_OK


def _tag_canonical(path: Path, canonical: Path) -> None:
    from .autodiff import save_checkpoint

    arrays, meta = load_checkpoint(path)
    meta["canonical_path"] = str(canonical)
    save_checkpoint(path, arrays, meta)


def _load_model(args):
    model_path = _existing(args.model, "model checkpoint")
    _, meta = load_checkpoint(model_path)
    canonical = args.canonical or meta.get("canonical_path")
    if canonical is None:
        raise InputError("--canonical is required (model checkpoint does not record its canonical cloud)")
    cloud = GaussianCloud.load(_existing(canonical, "canonical checkpoint"))
    skeleton = parse_skeleton(meta["skeleton"]) if "skeleton" in meta else None
    return load_model(model_path, cloud, skeleton), meta


def _cameras(args, model, count: int) -> list[Camera]:
    size = args.resolution
    center = model.skeleton.rest_positions.mean(axis=0)
    extent = float(np.linalg.norm(model.skeleton.rest_positions - center, axis=1).max())
    radius = args.radius or max(3.2, 3.0 * extent)
    if args.camera == "manifest":
        if not args.dataset:
            raise InputError("--camera manifest needs --dataset")
        m = load_manifest(_existing(Path(args.dataset) / f"transforms_{args.split}.json", "manifest"))
        if not m.frames:
            raise InputError("manifest has no frames")
        return [m.camera(i % len(m.frames)) for i in range(count)]
    def at(az, el):
        d = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        return Camera.look_at(center + radius * d, center, width=size, height=size)
    if args.camera == "fixed":
        return [at(np.deg2rad(60.0), np.deg2rad(35.0))] * count
    return [at(2 * np.pi * k / max(count, 1), np.deg2rad(30.0)) for k in range(count)]


def _render_times(args, model, times: list[float]) -> int:
    out = output_dir(args.out)
    clamped = []
    for t in times:
        if not 0.0 <= t <= 1.0:
            log.warning("time %g outside [0, 1]; clamping", t)
        clamped.append(float(np.clip(t, 0.0, 1.0)))
    cams = _cameras(args, model, len(clamped))
    bits = 16 if args.bits16 else 8
    width = max(3, len(str(len(clamped))))
    rows = []
    for i, (t, cam) in enumerate(zip(clamped, cams)):
        img = render_frame(model, t, cam, args.background)
        name = f"frame_{i:0{width}d}.png"
        write_image(out / name, img, bits)
        rows.append((name, t))
    _write_csv(out / "frames.csv", ["file", "time"], rows)
    print(f"{len(clamped)} frames written to {out}")
    return EXIT_OK


def cmd_render(args) -> int:
    model, _ = _load_model(args)
    return _render_times(args, model, list(args.times))


def cmd_interpolate(args) -> int:
    if args.count < 1:
        raise InputError("--count must be at least 1")
    model, _ = _load_model(args)
    return _render_times(args, model, list(np.linspace(0.0, 1.0, args.count)))


def cmd_eval(args) -> int:
    model, _ = _load_model(args)
    root = _existing(args.dataset, "dataset")
    obs = load_dataset(root, args.split, args.background)
    if len(obs) == 0:
        raise InputError(f"split {args.split!r} has no frames")
    table = evaluate(model, obs, args.background)
    out = output_dir(args.out)
    _write_csv(out / "metrics" / f"{args.split}_frames.csv", ["frame", "time", "psnr", "ssim"],
               [(f.name, f.time, f.psnr, f.ssim) for f in table.frames])
    atomic_write_text(out / "metrics" / f"{args.split}_summary.json", json.dumps(table.summary(), indent=1))
    s = table.summary()
    print(f"{args.split}: mean PSNR {s['mean_psnr']:.3f} dB (worst {s['worst_psnr']:.3f}), "
          f"mean SSIM {s['mean_ssim']:.4f} (worst {s['worst_ssim']:.4f})")
    return EXIT_OK


def _write_csv(path: Path, header: list[str], rows) -> None:
    buf = _io.StringIO()
    w = csv.writer(buf)
    w.writerow(header)
    w.writerows(rows)
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="skelsplat", description="Skeleton-driven Gaussian splatting from sparse views.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common_render(sp):
        sp.add_argument("--model", required=True)
        sp.add_argument("--canonical", default=None, help="canonical checkpoint (defaults to the path recorded at training)")
        sp.add_argument("--out", required=True)
        sp.add_argument("--camera", choices=("orbit", "manifest", "fixed"), default="orbit")
        sp.add_argument("--dataset", default=None, help="dataset for --camera manifest")
        sp.add_argument("--split", default="test")
        sp.add_argument("--resolution", type=int, default=128)
        sp.add_argument("--radius", type=float, default=None)
        sp.add_argument("--background", type=_background, default=(0.0, 0.0, 0.0))
        sp.add_argument("--bits16", action="store_true", help="write 16-bit PNGs")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("make-oracle", help="generate a synthetic articulated dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--bones", type=int, default=2)
    sp.add_argument("--points", type=int, default=1000, help="surface points per part")
    sp.add_argument("--amplitude", type=float, default=20.0, help="joint angle amplitude (degrees)")
    sp.add_argument("--topology", choices=("chain", "tree"), default="chain")
    sp.add_argument("--bulge", type=float, default=0.0)
    sp.add_argument("--root-motion", type=float, default=0.1)
    sp.add_argument("--interval", type=float, default=0.1)
    sp.add_argument("--policy", choices=("orbit", "random-sphere", "fixed"), default="random-sphere")
    sp.add_argument("--test-policy", choices=("orbit", "random-sphere", "fixed"), default="random-sphere")
    sp.add_argument("--bundle-views", type=int, default=8)
    sp.add_argument("--init-points", type=int, default=500, help="initial canonical points per part")
    sp.add_argument("--resolution", type=int, default=128)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_make_oracle)

    sp = sub.add_parser("fit-canonical", help="fit the static Gaussian cloud to the t = 0 views")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--points", required=True, help="initial point file (x y z [r g b] per line)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--iterations", type=int, default=2000)
    sp.add_argument("--sh-degree", type=int, default=1)
    sp.add_argument("--background", type=_background, default=(0.0, 0.0, 0.0))
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_fit_canonical)

    sp = sub.add_parser("train", help="train the deformation field with the canonical cloud frozen")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--skeleton", required=True)
    sp.add_argument("--canonical", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config", default=None, help="JSON file with training config fields")
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--lr-theta", type=float, default=None)
    sp.add_argument("--lr-phi", type=float, default=None)
    sp.add_argument("--lr-psi", type=float, default=None)
    sp.add_argument("--lr-radii", type=float, default=None)
    sp.add_argument("--checkpoint-interval", type=int, default=None)
    sp.add_argument("--background", type=_background, default=None)
    sp.add_argument("--resume", default=None, help="training checkpoint to continue from")
    sp.add_argument("--log-every", type=int, default=100)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("render", help="render frames at given times")
    common_render(sp)
    sp.add_argument("--times", type=float, nargs="+", required=True)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("interpolate", help="render COUNT frames at uniform times in [0, 1]")
    common_render(sp)
    sp.add_argument("--count", type=int, default=101)
    sp.set_defaults(func=cmd_interpolate)

    sp = sub.add_parser("eval", help="PSNR / SSIM on a dataset split")
    sp.add_argument("--model", required=True)
    sp.add_argument("--canonical", default=None)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--out", required=True)
    sp.add_argument("--background", type=_background, default=(0.0, 0.0, 0.0))
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INPUT
    console = logging.StreamHandler()
    console.setLevel(logging.INFO if args.verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    root = logging.getLogger()
    before, level = list(root.handlers), root.level
    root.addHandler(console)
    root.setLevel(logging.INFO)
    try:
        return args.func(args)
    except NumericalAbort as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except SkeletonError as e:
        print(f"error: skeleton field '{e.field}': {e}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, DatasetError, CheckpointError, FileNotFoundError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    finally:
        for h in root.handlers[:]:
            if h not in before:
                root.removeHandler(h)
                h.close()
        root.setLevel(level)


if __name__ == "__main__":
    sys.exit(main())
