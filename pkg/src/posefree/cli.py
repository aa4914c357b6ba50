"""Command-line entry points: ``gen-data``, ``train``, ``eval`` and ``infer``.

Exit codes: 0 ok, 2 infeasible data generation, 3 training divergence,
4 checkpoint mismatch, 5 input mismatch.  Every command validates its inputs
before writing anything.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

EXIT_OK, EXIT_INFEASIBLE, EXIT_DIVERGED, EXIT_CHECKPOINT, EXIT_INPUT = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _limit_threads():
    n = os.environ.get("POSEFREE_THREADS")
    if not n:
        return None
    try:
        n = int(n)
    except ValueError:
        raise CliError(EXIT_INPUT, f"POSEFREE_THREADS must be an integer, got {n!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(n, 1))


def _writable_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path)) or "."
    if not os.path.isdir(parent):
        raise CliError(EXIT_INPUT, f"parent directory of {path} does not exist")
    if not os.access(parent, os.W_OK):
        raise CliError(EXIT_INPUT, f"{parent} is not writable")


def _say(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------
def cmd_gen_data(args) -> int:
    from .synth import InfeasibleViewsetError, _packing_feasible, write_dataset

    if args.scenes < 1 or args.views < 1 or args.size < 16 or args.render_steps < 2:
        raise CliError(EXIT_INPUT, "need scenes >= 1, views >= 1, size >= 16 and render steps >= 2")
    if args.views >= 2 and not _packing_feasible(args.views, args.min_angle_deg):
        raise CliError(EXIT_INFEASIBLE, f"cannot place {args.views} views pairwise {args.min_angle_deg} degrees apart")
    _writable_parent(args.out)
    try:
        info = write_dataset(args.out, args.scenes, args.views, args.min_angle_deg, args.size, args.seed,
                             args.render_steps)
    except InfeasibleViewsetError as e:
        raise CliError(EXIT_INFEASIBLE, str(e)) from e
    _say(f"wrote {info['scenes']} scenes to {args.out} in {info['wall_s']:.1f}s")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------
def _load_data(path, max_scenes=0):
    from .synth import Dataset, load_dataset

    if not os.path.isfile(os.path.join(path, "dataset.json")):
        raise CliError(EXIT_INPUT, f"{path} is not a dataset (missing dataset.json)")
    try:
        ds = load_dataset(path)
    except (OSError, KeyError, ValueError) as e:
        raise CliError(EXIT_INPUT, f"cannot load dataset {path}: {e}") from e
    if max_scenes:
        ds = Dataset(ds.scenes[:max_scenes], ds.config)
    return ds


def cmd_train(args) -> int:
    from . import config as config_mod
    from .checkpoint import CheckpointError
    from .model import ReconstructionModel
    from .train import TrainingDiverged, load_model, read_checkpoint, train

    try:
        cfg = config_mod.load(args.config, args.overrides)
    except config_mod.ConfigError as e:
        raise CliError(EXIT_INPUT, str(e)) from e
    if args.seed is not None:
        cfg = config_mod.build(config_mod.apply_overrides(cfg.to_dict(), [f"train.seed={args.seed}",
                                                                          f"model.seed={args.seed}"]))
    ds = _load_data(args.data, cfg.data.max_scenes)
    size = int(ds.config["size"])
    if size != cfg.model.image_size:
        raise CliError(EXIT_INPUT, f"dataset images are {size}px but the model expects {cfg.model.image_size}px")
    if args.resume:
        try:
            meta, _ = read_checkpoint(args.resume)
            load_model(args.resume, expect=cfg.model)
        except CheckpointError as e:
            raise CliError(EXIT_CHECKPOINT, str(e)) from e
    if os.path.exists(args.out) and not os.path.isdir(args.out):
        raise CliError(EXIT_INPUT, f"{args.out} exists and is not a directory")
    _writable_parent(args.out)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.yaml"), "w") as fh:
        fh.write(cfg.dump())
    model = ReconstructionModel(cfg.model)
    t0 = time.perf_counter()

    def log(rec):
        _say(f"step {rec['step']:6d} lr {rec['lr']:.2e} total {rec['total']:.4f} l_c {rec['l_c']:.4f} "
             f"l_p {rec['l_p']:.4f} l_alpha {rec['l_alpha']:.4f} l_y {rec['l_y']:.4f}")

    try:
        hist = train(ds, model, cfg.train, args.out, resume=args.resume, log=log, pnp=cfg.pnp)
    except TrainingDiverged as e:
        _say(f"training diverged at step {e.step}; batch dump: {e.dump_path}")
        return EXIT_DIVERGED
    _say(f"trained {len(hist)} steps in {time.perf_counter() - t0:.1f}s; checkpoint {os.path.join(args.out, 'last')}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------
ORACLE_KIND = "oracle"


def write_oracle_checkpoint(path) -> None:
    """Checkpoint stand-in that evaluates with ground-truth fields and poses (pipeline fixture)."""
    from .checkpoint import save_tensors

    save_tensors(f"{path}.pftn", {})
    with open(f"{path}.json", "w") as fh:
        json.dump({"format": 1, "kind": ORACLE_KIND, "step": 0}, fh)


def _open_checkpoint(path, expect_model=None):
    from .checkpoint import CheckpointError
    from .train import _strip, load_model, read_checkpoint

    try:
        meta, _ = read_checkpoint(path)
        if meta.get("kind") == ORACLE_KIND:
            return None, meta
        model, meta, _ = load_model(_strip(path), expect=expect_model)
    except CheckpointError as e:
        raise CliError(EXIT_CHECKPOINT, str(e)) from e
    return model, meta


def cmd_eval(args) -> int:
    from . import config as config_mod
    from .metrics import evaluate, write_report

    try:
        cfg = config_mod.load(args.config, args.overrides)
    except config_mod.ConfigError as e:
        raise CliError(EXIT_INPUT, str(e)) from e
    views = args.views if args.views is not None else cfg.eval.views
    seed = args.seed if args.seed is not None else cfg.eval.seed
    model, meta = _open_checkpoint(args.checkpoint, cfg.model if args.config else None)
    ds = _load_data(args.data, cfg.data.max_scenes)
    if model is not None:
        if int(ds.config["size"]) != model.cfg.image_size:
            raise CliError(EXIT_CHECKPOINT, f"checkpoint expects {model.cfg.image_size}px images, "
                                            f"dataset has {ds.config['size']}px")
        if not 1 <= views <= model.cfg.max_views:
            raise CliError(EXIT_INPUT, f"--views must be in [1, {model.cfg.max_views}]")
    if int(ds.config["views"]) < views + 1:
        raise CliError(EXIT_INPUT, f"dataset has {ds.config['views']} views per scene; need {views + 1}")
    _writable_parent(args.out)
    os.makedirs(args.out, exist_ok=True)
    report = evaluate(model, ds, views, seed, K=cfg.eval.render_steps or None, pnp_opts=cfg.pnp,
                      oracle=model is None)
    write_report(report, os.path.join(args.out, "report.json"), os.path.join(args.out, "scenes.csv"))
    _say(report.summary())
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------
def _read_intrinsics(path, n):
    from .camera import Intrinsics

    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise CliError(EXIT_INPUT, f"cannot read intrinsics {path}: {e}") from e
    if isinstance(data, dict):
        data = data.get("intrinsics", data.get("cameras"))
    if data and not isinstance(data[0], (list, dict)):
        data = [data]
    try:
        intrs = [Intrinsics.from_list(d["intrinsics"] if isinstance(d, dict) else d) for d in data]
    except (KeyError, TypeError, ValueError) as e:
        raise CliError(EXIT_INPUT, f"bad intrinsics entry in {path}: {e}") from e
    if len(intrs) == 1:
        intrs = intrs * n
    if len(intrs) != n:
        raise CliError(EXIT_INPUT, f"{n} images but {len(intrs)} intrinsics entries")
    return intrs


def turntable_poses(radius: float, n: int = 8, elevation_deg: float = 20.0):
    """Cameras circling the canonical vertical axis, starting at the reference camera."""
    from .camera import Pose, look_at

    el = np.radians(elevation_deg)
    out = []
    for k in range(n):
        az = 2 * np.pi * k / n
        # the reference camera sits on -z of the canonical frame looking along +z, y down
        c = radius * np.array([np.sin(az) * np.cos(el), -np.sin(el), -np.cos(az) * np.cos(el)])
        out.append(look_at(c, up=(0.0, -1.0, 0.0)))
    return out


def cmd_infer(args) -> int:
    from PIL import Image

    from . import config as config_mod
    from .camera import Pose, relative_pose
    from .checkpoint import save_tensors
    from .metrics import predict
    from .render import render_image
    from .synth import load_png, save_png

    model, _ = _open_checkpoint(args.checkpoint)
    if model is None:
        raise CliError(EXIT_CHECKPOINT, "oracle checkpoints carry no model and cannot run inference")
    cfg = model.cfg
    if not 1 <= len(args.images) <= cfg.max_views:
        raise CliError(EXIT_INPUT, f"need 1 to {cfg.max_views} images, got {len(args.images)}")
    imgs = []
    for p in args.images:
        try:
            with Image.open(p) as im:
                size = im.size
        except OSError as e:
            raise CliError(EXIT_INPUT, f"cannot read image {p}: {e}") from e
        if size != (cfg.image_size, cfg.image_size):
            raise CliError(EXIT_INPUT, f"{p} is {size[0]}x{size[1]}; the model expects {cfg.image_size}x{cfg.image_size}")
        imgs.append(load_png(p))
    intrs = _read_intrinsics(args.intrinsics, len(imgs))
    for k in intrs:
        if (k.width, k.height) != (cfg.image_size, cfg.image_size):
            raise CliError(EXIT_INPUT, "intrinsics image extent does not match the model image size")
    try:
        pnp = config_mod.load(None, args.overrides).pnp
    except config_mod.ConfigError as e:
        raise CliError(EXIT_INPUT, str(e)) from e
    _writable_parent(args.out)
    os.makedirs(args.out, exist_ok=True)

    pred = predict(model, np.stack(imgs), intrs, pnp)
    if pred.poses is None:
        # no pose estimate: place the reference at the nominal training distance
        poses = [Pose(np.eye(3), np.array([0.0, 0.0, 2.7]))]
        rel = [Pose.identity()]
    else:
        poses = pred.poses
        rel = [relative_pose(poses[0], p) for p in poses]
    out = {"reference": 0, "images": [os.path.basename(p) for p in args.images],
           "poses": [dict(view=i, **r.to_dict()) for i, r in enumerate(rel)],
           "pose_source": "none" if pred.poses is None else cfg.mode}
    with open(os.path.join(args.out, "poses.json"), "w") as fh:
        json.dump(out, fh, indent=1)
    K = cfg.render_steps
    for i, p in enumerate(poses):
        save_png(os.path.join(args.out, f"render_{i}.png"),
                 render_image(pred.field, p, intrs[min(i, len(intrs) - 1)], K=K, dtype=cfg.np_dtype))
    radius = float(np.linalg.norm(poses[0].t))
    strip = [render_image(pred.field, p, intrs[0], K=K, dtype=cfg.np_dtype) for p in turntable_poses(radius)]
    save_png(os.path.join(args.out, "turntable.png"), np.concatenate(strip, axis=1))
    tri = pred.field.tri.to_arrays()
    tri.update({f"decoder.{n}": a for n, a in model.decoder.state_dict().items()})
    save_tensors(os.path.join(args.out, "triplane.pftn"), tri)
    _say(f"wrote {len(rel)} poses, {len(poses)} renders, turntable and triplane to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="posefree", description="pose-free sparse-view reconstruction")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic multi-view dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, default=20)
    g.add_argument("--views", type=int, default=5)
    g.add_argument("--min-angle-deg", type=float, default=45.0)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--render-steps", type=int, default=64)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--views", type=int)
    e.add_argument("--out", required=True)
    e.add_argument("--config")
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="reconstruct from unposed images")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("images", nargs="+")
    i.add_argument("--intrinsics", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)
    return ap


def _split_overrides(argv):
    """Separate ``--section.key=value`` / ``--section.key value`` overrides from regular flags."""
    from .config import SECTIONS

    rest, overrides = [], []
    it = iter(range(len(argv)))
    skip = False
    for idx in it:
        if skip:
            skip = False
            continue
        a = argv[idx]
        head = a[2:].split("=", 1)[0] if a.startswith("--") else ""
        if "." in head and head.split(".", 1)[0] in SECTIONS:
            if "=" in a:
                overrides.append(a[2:])
            elif idx + 1 < len(argv):
                overrides.append(f"{head}={argv[idx + 1]}")
                skip = True
            else:
                rest.append(a)
        else:
            rest.append(a)
    return rest, overrides


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    rest, overrides = _split_overrides(argv)
    args = build_parser().parse_args(rest)
    args.overrides = overrides
    try:
        limiter = _limit_threads()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
