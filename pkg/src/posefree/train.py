"""Loss assembly and the optimization loop.

Frames: the triplane lives in a canonical frame that shares the reference
camera's orientation and the object's origin.  For a scene with world poses
(R_i, t_i) the canonical pose of view i is (R_i R_1^T, t_i), so the reference
view sits at (I, t_1) and every canonical pose still looks at the origin.
"""
from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import Intrinsics, Pose, matrix_to_quaternion, pixel_centers
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .model import ModelConfig, ModelOutput, ReconstructionModel, normalize_quaternion
from .pnp import Correspondences, DegeneratePnPError, PnPOptions, mc_pose_loss, solve
from .render import TriplaneField, camera_rays, render_crop, render_rays
from .triplane import Triplane


class TrainingDiverged(RuntimeError):
    def __init__(self, step, dump_path):
        super().__init__(f"non-finite loss at step {step}; batch dumped to {dump_path}")
        self.step = step
        self.dump_path = dump_path


@dataclass(frozen=True)
class LossWeights:
    render: float = 1.0         # gamma'_C, L2
    render_lpips: float = 0.0   # gamma''_C, slot kept for the perceptual term (not computed)
    point: float = 1.0
    alpha: float = 1.0
    pose: float = 1.0

    def __post_init__(self):
        if min(asdict(self).values()) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 4e-4
    warmup: int = 100
    steps: int = 5000
    batch_size: int = 1
    crop: int = 16
    views: int = 4
    heldout_views: int = 1
    render_steps: int = 0          # 0 means the model's setting
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.05
    eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 1000
    render_predicted: bool = False   # experimental: extra L2 term at solved poses
    shuffle_views: bool = True       # False keeps dataset order, so view 0 is always the reference
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.warmup > self.steps and self.steps > 0:
            raise ValueError("warmup must not exceed the total step count")
        if self.batch_size < 1 or self.crop < 1 or self.views < 1:
            raise ValueError("batch size, crop and views must be positive")
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        object.__setattr__(self, "betas", tuple(self.betas))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            wn = {f.name for f in fields(LossWeights)}
            bad = set(d["weights"]) - wn
            if bad:
                raise KeyError(f"unknown loss weight keys: {sorted(bad)}")
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------
def rendering_loss(pred, gt, weight: float = 1.0) -> Tensor:
    """weight * mean squared error over every value of the crop."""
    pred = ad._as_tensor(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"rendering_loss: shapes {pred.shape} and {gt.shape} differ")
    d = pred - Tensor(gt.astype(pred.dtype))
    return ad.mean(d * d) * weight


def point_losses(points, alpha, xbar, tbar):
    """(L_p, L_alpha) summed over every view and patch; targets are constants."""
    points = ad._as_tensor(points)
    alpha = ad._as_tensor(alpha, points)
    xbar = np.asarray(getattr(xbar, "data", xbar))
    tbar = np.asarray(getattr(tbar, "data", tbar))
    if points.shape != xbar.shape or alpha.shape != tbar.shape or points.shape[:-1] != alpha.shape:
        raise ValueError(f"point_losses: count mismatch {points.shape}/{alpha.shape} vs {xbar.shape}/{tbar.shape}")
    dp = points - Tensor(xbar.astype(points.dtype))
    da = alpha - Tensor((1.0 - tbar).astype(alpha.dtype))
    return ad.sum(dp * dp), ad.sum(da * da)


def pose_regression_loss(raw: Tensor, gt: list[Pose]) -> Tensor:
    """Squared quaternion (sign-aligned) plus translation error, summed over views."""
    q = normalize_quaternion(raw[:, :4])
    qg = np.stack([matrix_to_quaternion(p.R) for p in gt])
    sign = np.where(np.sum(q.data * qg, axis=1) < 0, -1.0, 1.0)[:, None]
    qg = (qg * sign).astype(raw.dtype)
    tg = np.stack([p.t for p in gt]).astype(raw.dtype)
    dq = q - Tensor(qg)
    dt = raw[:, 4:7] - Tensor(tg)
    return ad.sum(dq * dq) + ad.sum(dt * dt)


@dataclass
class Batch:
    """One scene's worth of training inputs, all in the canonical frame."""

    images: np.ndarray           # (N, H, W, 3) model inputs, view 0 is the reference
    intrinsics: list             # N + H Intrinsics (inputs then held-out)
    poses: list                  # N + H canonical poses
    targets: np.ndarray          # (N + H, h, w, 3) ground-truth crops
    crops: list                  # (top, left, h, w) per supervision view
    scene: int = -1
    view_ids: tuple = ()

    @property
    def n_inputs(self) -> int:
        return len(self.images)


def canonical_poses(poses: list[Pose]) -> list[Pose]:
    R1 = poses[0].R
    return [Pose(p.R @ R1.T, p.t.copy()) for p in poses]


def make_batch(scene, view_ids, crop: int, rng, n_inputs: int | None = None) -> Batch:
    """The first ``n_inputs`` of ``view_ids`` are model inputs, the rest held-out supervision."""
    n_inputs = len(view_ids) if n_inputs is None else n_inputs
    view_ids = tuple(int(v) for v in view_ids)
    vs = scene.viewset
    poses = canonical_poses([vs.poses[v] for v in view_ids])
    intrs = [vs.intrinsics[v] for v in view_ids]
    crops, targets = [], []
    for v, k in zip(view_ids, intrs):
        h = w = min(crop, k.height, k.width)
        top = int(rng.integers(0, k.height - h + 1))
        left = int(rng.integers(0, k.width - w + 1))
        crops.append((top, left, h, w))
        targets.append(scene.images[v, top:top + h, left:left + w])
    return Batch(scene.images[list(view_ids[:n_inputs])], intrs, poses, np.stack(targets), crops, scene.index, view_ids)


@dataclass
class LossBreakdown:
    total: Tensor
    l_c: float
    l_p: float
    l_alpha: float
    l_y: float
    parts: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"total": float(self.total.data), "l_c": self.l_c, "l_p": self.l_p,
                "l_alpha": self.l_alpha, "l_y": self.l_y}


def pnp_options(cfg: TrainConfig, step: int = 0, base: PnPOptions | None = None) -> PnPOptions:
    """Per-step solver options; only the sampling seed changes between steps."""
    return replace(base or PnPOptions(), seed=int(cfg.seed * 100003 + step))


def total_loss(model: ReconstructionModel, batch: Batch, weights: LossWeights, K: int | None = None,
               pnp_opts: PnPOptions | None = None, frozen_samples: dict | None = None,
               out: ModelOutput | None = None, render_predicted: bool = False,
               frozen_targets: dict | None = None) -> LossBreakdown:
    """Forward + every loss term.

    ``frozen_samples`` maps source-view index to a PoseSamples set; missing
    entries are drawn and stored, so passing an empty dict and reusing it
    makes the pose term a deterministic function of the parameters.
    ``frozen_targets`` does the same for the detached point-loss targets.
    """
    cfg = model.cfg
    K = K or cfg.render_steps
    dt = cfg.np_dtype
    N = batch.n_inputs
    if out is None:
        out = model.forward(batch.images, batch.intrinsics[:N])
    tri, dec = out.triplane, model.decoder
    field_ = TriplaneField(tri, dec)
    zero = Tensor(np.zeros((), dtype=dt))

    # rendering loss at ground-truth poses over inputs and held-out views
    l_c = zero
    if weights.render > 0:
        terms = []
        for pose, intr, crop, gt in zip(batch.poses, batch.intrinsics, batch.crops, batch.targets):
            r = render_crop(None, None, pose, intr, crop, K, field=field_, dtype=dt)
            terms.append(rendering_loss(r.image, gt))
        l_c = ad.mean(ad.stack(terms)) * weights.render

    l_p = l_a = l_y = zero
    parts = {}
    if out.points is not None:
        # distillation targets from the current NeRF, rays through patch centers at gt poses
        if frozen_targets is not None and "xbar" in frozen_targets:
            xb, tb = frozen_targets["xbar"], frozen_targets["tbar"]
        else:
            with ad.no_grad():
                frozen = TriplaneField(Triplane(*(p.detach() for p in tri.planes)), dec)
                xb, tb = [], []
                for i in range(N):
                    o, d = camera_rays(batch.poses[i], batch.intrinsics[i], out.pixels)
                    r = render_rays(frozen, o, d, K, dtype=dt)
                    xb.append(r.xbar.data)
                    tb.append(r.tbar.data)
            xb, tb = np.stack(xb), np.stack(tb)
            if frozen_targets is not None:
                frozen_targets.update(xbar=xb, tbar=tb)
        lp, la = point_losses(out.points, out.alpha, xb, tb)
        if weights.point > 0:
            l_p = lp
        if weights.alpha > 0:
            l_a = la
        if cfg.mode == "diff-pnp" and weights.pose > 0 and N > 1:
            beta = out.beta
            ys = []
            for i in range(1, N):
                samples = frozen_samples.get(i) if frozen_samples is not None else None
                opts = pnp_opts or PnPOptions()
                loss_i, samples, diag = mc_pose_loss(out.points[i], beta[i], out.pixels, batch.intrinsics[i],
                                                     batch.poses[i], opts, samples=samples)
                if frozen_samples is not None:
                    frozen_samples[i] = samples
                parts[f"l_y_{i}"] = float(loss_i.data)
                ys.append(loss_i)
            l_y = ad.sum(ad.stack(ys))
    elif out.pose_raw is not None and weights.pose > 0:
        l_y = pose_regression_loss(out.pose_raw, batch.poses[:N])

    if render_predicted and out.points is not None and N > 1:
        extra = []
        for i in range(1, N):
            try:
                res = solve(Correspondences(out.points.data[i], out.pixels, out.beta.data[i]),
                            batch.intrinsics[i], pnp_opts)
            except DegeneratePnPError:
                continue
            r = render_crop(None, None, res.pose, batch.intrinsics[i], batch.crops[i], K, field=field_, dtype=dt)
            extra.append(rendering_loss(r.image, batch.targets[i]))
        if extra:
            l_c = l_c + ad.mean(ad.stack(extra)) * weights.render

    total = l_c + l_p * weights.point + l_a * weights.alpha + l_y * weights.pose
    return LossBreakdown(total, float(l_c.data), float(l_p.data), float(l_a.data), float(l_y.data), parts)


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------
def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``cfg.lr`` at ``cfg.warmup`` then cosine decay to zero at ``cfg.steps``."""
    if cfg.warmup > 0 and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    span = max(cfg.steps - cfg.warmup, 1)
    frac = min(max(step - cfg.warmup, 0) / span, 1.0)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Decoupled weight decay; matrices decay, vectors (biases, norms, embeddings rows) do not."""

    def __init__(self, params: dict, betas=(0.9, 0.95), weight_decay=0.05, eps=1e-8):
        self.params = params
        self.b1, self.b2 = betas
        self.wd = weight_decay
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, grads: dict, lr: float):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for n, p in self.params.items():
            g = grads.get(n)
            if g is None:
                continue
            m, v = self.m[n], self.v[n]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd and p.data.ndim >= 2:
                upd = upd + self.wd * p.data
            p.data -= (lr * upd).astype(p.dtype)

    def state(self) -> dict:
        d = {f"optim.m.{n}": a for n, a in self.m.items()}
        d.update({f"optim.v.{n}": a for n, a in self.v.items()})
        return d

    def load(self, tensors: dict, t: int):
        for n in self.params:
            self.m[n] = np.asarray(tensors[f"optim.m.{n}"], dtype=self.m[n].dtype).copy()
            self.v[n] = np.asarray(tensors[f"optim.v.{n}"], dtype=self.v[n].dtype).copy()
        self.t = t


def clip_gradients(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for n in grads:
            grads[n] = grads[n] * s
    return norm


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
CKPT_FORMAT = 1


def save_checkpoint(path, model: ReconstructionModel, optim: AdamW | None = None, step: int = 0,
                    train_cfg: TrainConfig | None = None, extra: dict | None = None):
    """``path`` without extension; writes ``path.pftn`` (tensors) and ``path.json`` (metadata)."""
    tensors = {f"model.{n}": a for n, a in model.state_dict().items()}
    if optim is not None:
        tensors.update(optim.state())
    save_tensors(f"{path}.pftn", tensors)
    meta = {"format": CKPT_FORMAT, "step": int(step), "model": model.cfg.to_dict(),
            "train": train_cfg.to_dict() if train_cfg else None, "optim_t": optim.t if optim else 0}
    meta.update(extra or {})
    tmp = f"{path}.json.tmp"
    with open(tmp, "w") as fh:
        json.dump(meta, fh, indent=1)
    os.replace(tmp, f"{path}.json")


def _strip(path):
    for ext in (".pftn", ".json"):
        if str(path).endswith(ext):
            return str(path)[: -len(ext)]
    return str(path)


def read_checkpoint(path):
    """Returns ``(meta, tensors)``; raises CheckpointError on any inconsistency."""
    base = _strip(path)
    try:
        with open(f"{base}.json") as fh:
            meta = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint metadata {base}.json: {e}") from e
    if meta.get("format") != CKPT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {meta.get('format')}")
    try:
        tensors = load_tensors(f"{base}.pftn")
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint tensors {base}.pftn: {e}") from e
    return meta, tensors


def load_model(path, expect: ModelConfig | None = None) -> tuple[ReconstructionModel, dict, dict]:
    meta, tensors = read_checkpoint(path)
    try:
        cfg = ModelConfig.from_dict(meta["model"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"checkpoint model config is invalid: {e}") from e
    if expect is not None and expect != cfg:
        raise CheckpointError("checkpoint model config does not match the requested config")
    model = ReconstructionModel(cfg)
    state = {n[len("model."):]: a for n, a in tensors.items() if n.startswith("model.")}
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as e:
        raise CheckpointError(str(e)) from e
    return model, meta, tensors


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------
def step_rng(seed: int, step: int, item: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, step, item, 11])


def sample_batch(dataset, cfg: TrainConfig, step: int, item: int = 0) -> Batch:
    rng = step_rng(cfg.seed, step, item)
    scene = dataset[int(rng.integers(0, len(dataset)))]
    V = len(scene.viewset)
    n_in = min(cfg.views, V)
    n_sup = min(cfg.heldout_views, V - n_in)
    ids = rng.permutation(V) if cfg.shuffle_views else np.arange(V)
    ids = ids[: n_in + n_sup]
    return make_batch(scene, ids, cfg.crop, rng, n_in)


def dump_batch(out_dir, step, batches: list[Batch], breakdowns) -> str:
    path = os.path.join(out_dir, f"diverged_step_{step}.npz")
    arrays = {}
    for k, b in enumerate(batches):
        arrays[f"b{k}_images"] = b.images
        arrays[f"b{k}_targets"] = b.targets
        arrays[f"b{k}_poses"] = np.stack([p.matrix() for p in b.poses])
        arrays[f"b{k}_crops"] = np.array(b.crops)
        arrays[f"b{k}_scene"] = np.array([b.scene] + list(b.view_ids))
    np.savez(path, **arrays)
    with open(path.replace(".npz", ".json"), "w") as fh:
        json.dump({"step": step, "losses": [bd.as_dict() if bd else None for bd in breakdowns]}, fh, indent=1)
    return path


def train_step(model, optim, dataset, cfg: TrainConfig, step: int, K: int, pnp: PnPOptions | None = None):
    batches, bds = [], []
    acc: dict[str, np.ndarray] = {}
    named = dict(model.named_parameters())
    inv = {id(p): n for n, p in named.items()}
    for item in range(cfg.batch_size):
        b = sample_batch(dataset, cfg, step, item)
        batches.append(b)
        with ad.Tape():
            bd = total_loss(model, b, cfg.weights, K, pnp_options(cfg, step * 131 + item, pnp),
                            render_predicted=cfg.render_predicted)
            bds.append(bd)
            if not np.isfinite(bd.total.data):
                return None, batches, bds
            grads = ad.backward(bd.total, wrt=list(named.values()))
        for p, g in grads.items():
            n = inv[id(p)]
            acc[n] = acc[n] + g if n in acc else np.array(g, dtype=np.float64)
    for n in acc:
        acc[n] /= cfg.batch_size
    if not all(np.all(np.isfinite(g)) for g in acc.values()):
        return None, batches, bds
    gnorm = clip_gradients(acc, cfg.grad_clip)
    lr = learning_rate(step, cfg)
    optim.step(acc, lr)
    rec = {k: float(np.mean([bd.as_dict()[k] for bd in bds])) for k in ("total", "l_c", "l_p", "l_alpha", "l_y")}
    rec.update(lr=lr, grad_norm=gnorm)
    return rec, batches, bds


def train(dataset, model: ReconstructionModel, cfg: TrainConfig, out_dir=None, resume=None, log=None,
          callback=None, pnp: PnPOptions | None = None) -> list[dict]:
    """Run ``cfg.steps`` optimizer steps; returns the per-step metric records.

    With ``out_dir`` set, writes ``metrics.jsonl`` and checkpoints
    ``step_{n}`` every ``cfg.checkpoint_every`` steps plus ``last`` at the end.
    ``resume`` is a checkpoint path whose parameters, optimizer moments and
    step counter are restored; the per-step randomness is keyed on the step,
    so resumed runs continue exactly as an uninterrupted run would.
    """
    if len(dataset) == 0:
        raise ValueError("training needs a nonempty dataset")
    K = cfg.render_steps or model.cfg.render_steps
    named = dict(model.named_parameters())
    optim = AdamW(named, cfg.betas, cfg.weight_decay, cfg.eps)
    start = 0
    if resume is not None:
        _, meta, tensors = load_model(resume, expect=model.cfg)
        model.load_state_dict({n[6:]: a for n, a in tensors.items() if n.startswith("model.")})
        if any(k.startswith("optim.") for k in tensors):
            optim.load(tensors, int(meta.get("optim_t", 0)))
        start = int(meta["step"])
    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "metrics.jsonl"), "a" if resume else "w")
        if start == 0:
            save_checkpoint(os.path.join(out_dir, "step_0"), model, optim, 0, cfg)
    history = []
    try:
        for step in range(start, cfg.steps):
            t0 = time.perf_counter()
            rec, batches, bds = train_step(model, optim, dataset, cfg, step, K, pnp)
            if rec is None:
                path = dump_batch(out_dir or ".", step, batches, bds)
                raise TrainingDiverged(step, path)
            rec = {"step": step, "lr": rec["lr"], "total": rec["total"], "l_c": rec["l_c"], "l_p": rec["l_p"],
                   "l_alpha": rec["l_alpha"], "l_y": rec["l_y"],
                   "wall_ms": (time.perf_counter() - t0) * 1000.0, "grad_norm": rec["grad_norm"]}
            history.append(rec)
            if log_fh is not None:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            if log is not None and cfg.log_every and step % cfg.log_every == 0:
                log(rec)
            if callback is not None:
                callback(step, rec, model)
            done = step + 1
            if out_dir is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                save_checkpoint(os.path.join(out_dir, f"step_{done}"), model, optim, done, cfg)
        if out_dir is not None:
            save_checkpoint(os.path.join(out_dir, "last"), model, optim, max(cfg.steps, start), cfg)
    finally:
        if log_fh is not None:
            log_fh.close()
    return history
