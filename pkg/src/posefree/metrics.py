"""Pose and image-quality metrics and the evaluation protocol."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .camera import Intrinsics, Pose, relative_pose, rotation_error
from .model import ReconstructionModel, poses_from_raw
from .pnp import Correspondences, DegeneratePnPError, PnPOptions, solve
from .render import TriplaneField, render_image
from .synth import AnalyticField
from .train import canonical_poses

PSNR_CAP = 99.0
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WIN = 11
SSIM_SIGMA = 1.5
CSV_HEADER = ["scene", "r_err_deg", "acc15", "acc30", "t_err", "psnr_gt", "psnr_pred", "psnr_novel", "ssim_novel"]


@dataclass
class PoseMetrics:
    rot_err: float
    acc15: float
    acc30: float
    t_err: float


def pose_metrics(pred: list[Pose], gt: list[Pose]) -> PoseMetrics:
    """Pairwise relative-rotation errors and per-source-view translation error.

    Both lists share view order, view 0 being the reference.  Translations are
    compared after expressing every pose relative to view 0, so a global
    rigid change of either frame does not affect the result.
    """
    if len(pred) != len(gt):
        raise ValueError(f"pose_metrics: {len(pred)} predictions for {len(gt)} ground-truth poses")
    if len(gt) < 2:
        raise ValueError("pose_metrics needs at least two views")
    errs = []
    for i, j in combinations(range(len(gt)), 2):
        rp = pred[i].R @ pred[j].R.T
        rg = gt[i].R @ gt[j].R.T
        errs.append(rotation_error(rp, rg))
    errs = np.array(errs)
    t = [np.linalg.norm(relative_pose(pred[0], pred[i]).t - relative_pose(gt[0], gt[i]).t)
         for i in range(1, len(gt))]
    return PoseMetrics(float(errs.mean()), float(np.mean(errs < 15.0)), float(np.mean(errs < 30.0)),
                       float(np.mean(t)))


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size=SSIM_WIN, sigma=SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable weighted window mean over windows fully inside the image."""
    r = len(g) // 2
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < SSIM_WIN or a.shape[1] < SSIM_WIN:
        raise ValueError(f"ssim: image {a.shape[:2]} is smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    g = gaussian_window()
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        s = ((2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)) / ((mx ** 2 + my ** 2 + SSIM_C1) * (sxx + syy + SSIM_C2))
        vals.append(s.mean())
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# predictors
# ---------------------------------------------------------------------------
@dataclass
class Prediction:
    field: object              # callable (P, 3) Tensor -> (sigma, rgb)
    poses: list | None         # canonical-frame poses, one per input view; None when unavailable
    failed: bool = False       # PnP was degenerate for some view


def predict(model: ReconstructionModel, images, intrs: list[Intrinsics], pnp_opts: PnPOptions | None = None) -> Prediction:
    """Forward pass plus pose recovery, gradient-free."""
    with ad.no_grad():
        out = model.forward(images, intrs)
    fieldfn = TriplaneField(out.triplane, model.decoder)
    mode = model.cfg.mode
    if mode in ("diff-pnp", "non-diff-pnp"):
        poses, failed = [], False
        beta = out.beta.data
        for i in range(len(intrs)):
            try:
                res = solve(Correspondences(out.points.data[i], out.pixels, beta[i]), intrs[i], pnp_opts)
                poses.append(res.pose)
            except DegeneratePnPError:
                failed = True
                break
        return Prediction(fieldfn, None if failed else poses, failed)
    if mode.startswith("mlp-pose"):
        return Prediction(fieldfn, poses_from_raw(out.pose_raw.data))
    return Prediction(fieldfn, None)


class OraclePredictor:
    """Returns the analytic field and exact canonical poses; an upper bound for the pipeline."""

    def __init__(self, scene):
        self.scene = scene

    def predict_views(self, view_ids) -> Prediction:
        vs = self.scene.viewset
        world = [vs.poses[v] for v in view_ids]
        field_ = AnalyticField(self.scene.spec, world_from_query=world[0].R.T)
        return Prediction(field_, canonical_poses(world))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------
@dataclass
class SceneRow:
    scene: int
    r_err_deg: float
    acc15: float
    acc30: float
    t_err: float
    psnr_gt: float
    psnr_pred: float
    psnr_novel: float
    ssim_novel: float
    failed: bool = False


@dataclass
class EvalReport:
    views: int
    rot_err: float
    acc15: float
    acc30: float
    t_err: float
    psnr_gt: float
    psnr_pred: float
    psnr_novel: float
    ssim_novel: float
    failure_rate: float
    rows: list = field(default_factory=list)
    translation_error: str = "per source view, poses relative to view 0, scene units"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rows"] = [asdict(r) for r in self.rows]
        return _nan_to_none(d)

    def summary(self) -> str:
        return (f"views={self.views} scenes={len(self.rows)} rot_err={self.rot_err:.2f}deg "
                f"acc15={self.acc15:.3f} acc30={self.acc30:.3f} t_err={self.t_err:.3f} "
                f"psnr_gt={self.psnr_gt:.2f} psnr_pred={self.psnr_pred:.2f} psnr_novel={self.psnr_novel:.2f} "
                f"ssim_novel={self.ssim_novel:.3f} fail={self.failure_rate:.2f}")


def _nan_to_none(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _nan_to_none(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_nan_to_none(v) for v in x]
    return x


def _nanmean(vals) -> float:
    v = np.array([x for x in vals if x is not None and math.isfinite(x)], dtype=np.float64)
    return float(v.mean()) if len(v) else float("nan")


def eval_views(scene, views: int, seed: int) -> list[int]:
    """Input views (reference first) followed by one held-out view, chosen per scene."""
    V = len(scene.viewset)
    if V < views + 1:
        raise ValueError(f"scene {scene.index} has {V} views; evaluation with {views} inputs needs {views + 1}")
    rng = np.random.default_rng([seed, scene.index, 17])
    return [int(v) for v in rng.permutation(V)[: views + 1]]


def evaluate_scene(predictor, scene, views: int, seed: int = 0, K: int = 64,
                   pnp_opts: PnPOptions | None = None) -> SceneRow:
    ids = eval_views(scene, views, seed)
    vs = scene.viewset
    gt = canonical_poses([vs.poses[v] for v in ids])
    intrs = [vs.intrinsics[v] for v in ids]
    inputs = scene.images[ids[:views]]
    if isinstance(predictor, OraclePredictor):
        pred = predictor.predict_views(ids[:views])
    else:
        pred = predict(predictor, inputs, intrs[:views], pnp_opts)
    dt = np.float64
    if isinstance(predictor, ReconstructionModel):
        dt = predictor.cfg.np_dtype
    nan = float("nan")
    r_err = a15 = a30 = t_err = nan
    if pred.poses is not None and views >= 2:
        pm = pose_metrics(pred.poses, gt[:views])
        r_err, a15, a30, t_err = pm.rot_err, pm.acc15, pm.acc30, pm.t_err
    render = lambda pose, intr: render_image(pred.field, pose, intr, K=K, dtype=dt)  # noqa: E731
    psnr_gt = float(np.mean([psnr(render(gt[i], intrs[i]), inputs[i]) for i in range(views)]))
    psnr_pred = nan
    if pred.poses is not None:
        psnr_pred = float(np.mean([psnr(render(pred.poses[i], intrs[i]), inputs[i]) for i in range(views)]))
    novel = render(gt[views], intrs[views])
    target = scene.images[ids[views]]
    return SceneRow(scene.index, r_err, a15, a30, t_err, psnr_gt, psnr_pred, psnr(novel, target),
                    ssim(novel, target), pred.failed)


def evaluate(model, dataset, views: int = 4, seed: int = 0, K: int | None = None,
             pnp_opts: PnPOptions | None = None, oracle: bool = False, log=None) -> EvalReport:
    """Evaluate ``model`` (or the ground-truth oracle) on every scene of ``dataset``."""
    if isinstance(model, ReconstructionModel) and not 1 <= views <= model.cfg.max_views:
        raise ValueError(f"views must be in [1, {model.cfg.max_views}]")
    K = K or (model.cfg.render_steps if isinstance(model, ReconstructionModel) else 64)
    rows = []
    for scene in dataset.scenes:
        pred = OraclePredictor(scene) if oracle else model
        rows.append(evaluate_scene(pred, scene, views, seed, K, pnp_opts))
        if log:
            log(rows[-1])
    ok = [r for r in rows if not r.failed]
    return EvalReport(
        views=views,
        rot_err=_nanmean(r.r_err_deg for r in ok), acc15=_nanmean(r.acc15 for r in ok),
        acc30=_nanmean(r.acc30 for r in ok), t_err=_nanmean(r.t_err for r in ok),
        psnr_gt=_nanmean(r.psnr_gt for r in rows), psnr_pred=_nanmean(r.psnr_pred for r in ok),
        psnr_novel=_nanmean(r.psnr_novel for r in rows), ssim_novel=_nanmean(r.ssim_novel for r in rows),
        failure_rate=float(np.mean([r.failed for r in rows])) if rows else 0.0, rows=rows)


def write_report(report: EvalReport, json_path, csv_path) -> None:
    with open(json_path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=1)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in report.rows:
            w.writerow([r.scene] + [_fmt(getattr(r, k)) for k in CSV_HEADER[1:]])


def _fmt(v) -> str:
    return "" if v is None or not math.isfinite(v) else repr(float(v))


def random_pose_baseline(n_views: int = 4, trials: int = 2000, seed: int = 0) -> float:
    """Mean pairwise rotation error of uniformly random rotations (about 126 degrees)."""
    from scipy.spatial.transform import Rotation
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(trials):
        Rp = Rotation.random(n_views, random_state=rng).as_matrix()
        Rg = Rotation.random(n_views, random_state=rng).as_matrix()
        for i, j in combinations(range(n_views), 2):
            errs.append(rotation_error(Rp[i] @ Rp[j].T, Rg[i] @ Rg[j].T))
    return float(np.mean(errs))
