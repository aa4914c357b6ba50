"""Procedural multi-view scenes standing in for a rendered object corpus.

A scene is a handful of colored spheres and boxes inside the unit ball (and
therefore inside [-1, 1]^3 under any rotation).  Ground-truth images are
volume renders of the analytic field, composited on white.
"""
from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import autodiff as ad
from .autodiff import Tensor
from .camera import Intrinsics, Pose, look_at
from .render import render_image

EDGE_SHARPNESS = 40.0
MAX_RETRIES = 10_000


class InfeasibleViewsetError(ValueError):
    pass


@dataclass(frozen=True)
class Primitive:
    kind: str                 # "sphere" | "box"
    center: tuple
    size: tuple               # (radius,) or half-extents (hx, hy, hz)
    rgb: tuple
    density: float

    def signed_distance(self, x: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center)
        if self.kind == "sphere":
            return np.linalg.norm(x - c, axis=-1) - self.size[0]
        q = np.abs(x - c) - np.asarray(self.size)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def bounding_radius(self) -> float:
        c = np.linalg.norm(self.center)
        return c + (self.size[0] if self.kind == "sphere" else float(np.linalg.norm(self.size)))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "center": list(self.center), "size": list(self.size),
                "rgb": list(self.rgb), "density": self.density}

    @classmethod
    def from_dict(cls, d) -> "Primitive":
        return cls(d["kind"], tuple(d["center"]), tuple(d["size"]), tuple(d["rgb"]), float(d["density"]))


@dataclass
class SceneSpec:
    primitives: list
    seed: int = 0

    def to_dict(self) -> dict:
        return {"seed": self.seed, "primitives": [p.to_dict() for p in self.primitives]}

    @classmethod
    def from_dict(cls, d) -> "SceneSpec":
        return cls([Primitive.from_dict(p) for p in d["primitives"]], int(d["seed"]))


@dataclass
class ViewSet:
    poses: list
    intrinsics: list
    min_angle_deg: float = 0.0

    def __len__(self):
        return len(self.poses)

    def directions(self) -> np.ndarray:
        c = np.stack([p.center for p in self.poses])
        return c / np.linalg.norm(c, axis=1, keepdims=True)

    def min_separation_deg(self) -> float:
        d = self.directions()
        if len(d) < 2:
            return 180.0
        cos = np.clip(d @ d.T, -1.0, 1.0)
        iu = np.triu_indices(len(d), 1)
        return float(np.degrees(np.arccos(cos[iu])).min())


class AnalyticField:
    """sigma(x) = density * sigmoid(-k * sd(x)) of the nearest primitive; rgb of that primitive."""

    def __init__(self, spec: SceneSpec, sharpness=EDGE_SHARPNESS, world_from_query: np.ndarray | None = None):
        self.spec = spec
        self.k = sharpness
        # optional rotation applied to query points (canonical frame -> scene frame)
        self.rot = world_from_query

    def evaluate(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if self.rot is not None:
            x = x @ self.rot.T
        if not self.spec.primitives:
            return np.zeros(x.shape[:-1]), np.ones(x.shape[:-1] + (3,))
        sd = np.stack([p.signed_distance(x) for p in self.spec.primitives], axis=-1)
        idx = np.argmin(sd, axis=-1)
        near = np.take_along_axis(sd, idx[..., None], axis=-1)[..., 0]
        dens = np.array([p.density for p in self.spec.primitives])[idx]
        rgb = np.array([p.rgb for p in self.spec.primitives])[idx]
        sigma = dens / (1.0 + np.exp(np.clip(self.k * near, -700, 700)))
        return sigma, rgb

    def __call__(self, x: Tensor):
        sigma, rgb = self.evaluate(x.data)
        return Tensor(sigma.astype(x.dtype)), Tensor(rgb.astype(x.dtype))


def generate_scene(seed: int, n_primitives: tuple[int, int] = (2, 5)) -> SceneSpec:
    """Deterministic random scene with a primitive count drawn from ``n_primitives``."""
    rng = np.random.default_rng([seed, 1])
    lo, hi = n_primitives
    n = int(rng.integers(lo, hi + 1))
    prims = []
    for _ in range(n):
        kind = "sphere" if rng.random() < 0.5 else "box"
        if kind == "sphere":
            size = (float(rng.uniform(0.2, 0.45)),)
            extent = size[0]
        else:
            size = tuple(float(v) for v in rng.uniform(0.12, 0.32, 3))
            extent = float(np.linalg.norm(size))
        reach = max(0.95 - extent, 0.0)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        center = tuple(float(v) for v in d * reach * rng.uniform(0.0, 1.0) ** (1 / 3))
        rgb = tuple(float(v) for v in rng.uniform(0.05, 0.95, 3))
        prims.append(Primitive(kind, center, size, rgb, float(rng.uniform(40.0, 100.0))))
    return SceneSpec(prims, seed)


def sample_viewset(seed: int, n: int, min_angle_deg: float = 45.0, size: int = 64,
                   radius_range=(2.2, 3.2), vary_intrinsics=False) -> ViewSet:
    """Cameras on spheres around the origin with pairwise direction separation >= ``min_angle_deg``."""
    if n < 1:
        raise InfeasibleViewsetError("need at least one view")
    if n >= 2 and not _packing_feasible(n, min_angle_deg):
        raise InfeasibleViewsetError(f"{n} directions cannot be pairwise {min_angle_deg} degrees apart")
    rng = np.random.default_rng([seed, 2])
    cos_min = np.cos(np.radians(min_angle_deg))
    dirs: list[np.ndarray] = []
    tries = 0
    while len(dirs) < n:
        tries += 1
        if tries > MAX_RETRIES:
            raise InfeasibleViewsetError(f"rejection sampling gave up after {MAX_RETRIES} tries")
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        if all(d @ e <= cos_min + 1e-12 for e in dirs):
            dirs.append(d)
        elif len(dirs) > 0 and tries % 200 == 0:
            dirs = []  # restart: the partial set may have boxed itself in
    poses, intrs = [], []
    for d in dirs:
        r = rng.uniform(*radius_range) if radius_range[0] != radius_range[1] else radius_range[0]
        poses.append(look_at(d * r))
        if vary_intrinsics:
            f = size * rng.uniform(1.0, 1.4)
            intrs.append(Intrinsics(f, f, size / 2.0, size / 2.0, size, size))
        else:
            intrs.append(Intrinsics.default(size))
    return ViewSet(poses, intrs, min_angle_deg)


def _packing_feasible(n: int, angle_deg: float) -> bool:
    """Known optimal spherical codes (Tammes problem) for small n."""
    best = {2: 180.0, 3: 120.0, 4: 109.4712, 5: 90.0, 6: 90.0, 7: 77.8695, 8: 74.8585,
            9: 70.5288, 10: 66.1468, 11: 63.4349, 12: 63.4349}
    if n in best:
        return angle_deg <= best[n] + 1e-9
    # crude area bound for larger n
    cap = 2 * np.pi * (1 - np.cos(np.radians(angle_deg) / 2))
    return n * cap <= 4 * np.pi


def render_groundtruth(spec: SceneSpec, viewset: ViewSet, size: int | None = None, K: int = 64) -> np.ndarray:
    """(N, H, W, 3) float64 renders of the analytic field."""
    fieldfn = AnalyticField(spec)
    imgs = []
    for pose, intr in zip(viewset.poses, viewset.intrinsics):
        if size is not None and (intr.width, intr.height) != (size, size):
            raise ValueError("viewset intrinsics do not match requested size")
        imgs.append(render_image(fieldfn, pose, intr, K=K, dtype=np.float64))
    return np.stack(imgs)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_png(path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img), mode="RGB").save(path)


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


# ---------------------------------------------------------------------------
# datasets on disk
# ---------------------------------------------------------------------------
@dataclass
class Scene:
    spec: SceneSpec
    viewset: ViewSet
    images: np.ndarray  # (V, H, W, 3) float in [0, 1]
    index: int = 0


@dataclass
class Dataset:
    scenes: list
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.scenes)

    def __getitem__(self, i) -> Scene:
        return self.scenes[i]


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.default_rng([seed, index, 3]).integers(0, 2 ** 31 - 1))


def make_scene(seed: int, index: int, views: int, min_angle_deg: float, size: int, K: int = 64) -> Scene:
    s = scene_seed(seed, index)
    spec = generate_scene(s)
    vs = sample_viewset(s, views, min_angle_deg, size)
    imgs = render_groundtruth(spec, vs, size, K)
    return Scene(spec, vs, imgs, index)


def scene_manifest(scene: Scene, K: int) -> dict:
    return {
        "index": scene.index,
        "scene": scene.spec.to_dict(),
        "render_steps": K,
        "cameras": [{"R": p.R.reshape(-1).tolist(), "t": p.t.tolist(), "intrinsics": k.as_list()}
                    for p, k in zip(scene.viewset.poses, scene.viewset.intrinsics)],
        "min_angle_deg": scene.viewset.min_angle_deg,
    }


def viewset_from_manifest(m: dict) -> ViewSet:
    poses = [Pose(np.array(c["R"]).reshape(3, 3), np.array(c["t"])) for c in m["cameras"]]
    intrs = [Intrinsics.from_list(c["intrinsics"]) for c in m["cameras"]]
    return ViewSet(poses, intrs, float(m.get("min_angle_deg", 0.0)))


def write_dataset(root, scenes: int, views: int, min_angle_deg: float, size: int, seed: int, K: int = 64,
                  log=None) -> dict:
    """Generate and write ``root/scene_{i}/view_{k}.png`` + manifests + ``root/dataset.json``."""
    if views >= 2 and not _packing_feasible(views, min_angle_deg):
        raise InfeasibleViewsetError(f"{views} directions cannot be pairwise {min_angle_deg} degrees apart")
    os.makedirs(root, exist_ok=True)
    t0 = time.perf_counter()
    for i in range(scenes):
        sc = make_scene(seed, i, views, min_angle_deg, size, K)
        d = os.path.join(root, f"scene_{i}")
        os.makedirs(d, exist_ok=True)
        for k, img in enumerate(sc.images):
            save_png(os.path.join(d, f"view_{k}.png"), img)
        with open(os.path.join(d, "manifest.json"), "w") as fh:
            json.dump(scene_manifest(sc, K), fh, indent=1)
        if log:
            log(f"scene {i + 1}/{scenes}")
    cfg = {"scenes": scenes, "views": views, "min_angle_deg": min_angle_deg, "size": size, "seed": seed,
           "render_steps": K, "format_version": 1}
    with open(os.path.join(root, "dataset.json"), "w") as fh:
        json.dump(cfg, fh, indent=1)
    cfg["wall_s"] = time.perf_counter() - t0
    return cfg


def load_dataset(root) -> Dataset:
    with open(os.path.join(root, "dataset.json")) as fh:
        cfg = json.load(fh)
    scenes = []
    for i in range(int(cfg["scenes"])):
        d = os.path.join(root, f"scene_{i}")
        with open(os.path.join(d, "manifest.json")) as fh:
            m = json.load(fh)
        vs = viewset_from_manifest(m)
        imgs = np.stack([load_png(os.path.join(d, f"view_{k}.png")) for k in range(len(vs))])
        scenes.append(Scene(SceneSpec.from_dict(m["scene"]), vs, imgs, i))
    return Dataset(scenes, cfg)


def in_memory_dataset(n_scenes: int, views: int, min_angle_deg: float = 45.0, size: int = 64, seed: int = 0,
                      K: int = 64, quantize=True) -> Dataset:
    """Same scenes as :func:`write_dataset` without touching disk."""
    scenes = []
    for i in range(n_scenes):
        sc = make_scene(seed, i, views, min_angle_deg, size, K)
        if quantize:
            sc.images = to_uint8(sc.images).astype(np.float64) / 255.0
        scenes.append(sc)
    return Dataset(scenes, {"scenes": n_scenes, "views": views, "min_angle_deg": min_angle_deg,
                            "size": size, "seed": seed, "render_steps": K})
