"""Weighted Perspective-n-Point solving and the Monte-Carlo pose loss.

Poses are parameterized by a 6-vector ``(omega, t)``: an axis-angle
rotation and a translation, in the world-to-camera convention of
:mod:`posefree.camera`.  The cost of a pose is

    1/2 * sum_j beta_j * || project(R p_j + t) - q_j ||^2      (pixels^2)

with the camera depth floored at ``min_depth`` so bad iterates stay finite.

:func:`mc_pose_loss` returns the cost at the ground-truth pose plus the log
of the integral of ``exp(-cost)`` over the pose chart, estimated with
adaptive multiple importance sampling (AMIS) around the :func:`solve`
result.  The chart domain is restricted to ``|omega| <= pi``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import autodiff as ad
from .autodiff import Tensor
from .camera import Intrinsics, Pose, axis_angle_to_matrix, matrix_to_axis_angle, skew


class DegeneratePnPError(ValueError):
    pass


@dataclass
class PnPOptions:
    n_starts: int = 8
    multistart_iters: int = 12
    max_iter: int = 100
    tol: float = 1e-8
    damping: float = 1e-3
    min_depth: float = 0.05
    amis_rounds: int = 4
    amis_samples: int = 128
    t_dof: float = 3.0
    seed: int = 0
    # indices into (wx, wy, wz, tx, ty, tz) that vary; None means all six
    active_dofs: tuple | None = None
    fallback_std: tuple = (0.1, 0.1, 0.1, 0.1, 0.1, 0.1)


@dataclass
class Correspondences:
    points: np.ndarray   # (M, 3) object points
    pixels: np.ndarray   # (M, 2) patch-center pixels
    weights: np.ndarray  # (M,) nonnegative, beta = alpha * w

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if not (len(self.points) == len(self.pixels) == len(self.weights)):
            raise ValueError("correspondence arrays must have equal length")
        if np.any(self.weights < 0):
            raise ValueError("correspondence weights must be nonnegative")


@dataclass
class PnPResult:
    pose: Pose
    params: np.ndarray
    objective: float
    iterations: int
    converged: bool
    grad_norm: float
    hessian: np.ndarray
    trace: list = field(default_factory=list)


@dataclass
class PoseSamples:
    """AMIS sample set; holding it fixed makes the loss a deterministic function."""

    params: np.ndarray   # (S, 6) full pose parameters
    log_mix: np.ndarray  # (S,) log density of the deterministic mixture proposal
    active: tuple


@dataclass
class Diagnostics:
    iterations: int = 0
    converged: bool = False
    objective_trace: list = field(default_factory=list)
    amis_resets: int = 0
    log_integral: float = float("nan")
    ess: float = float("nan")

    def to_json(self) -> str:
        return json.dumps({"iterations": self.iterations, "converged": self.converged,
                           "objective_trace": [float(v) for v in self.objective_trace],
                           "amis_resets": self.amis_resets, "log_integral": float(self.log_integral),
                           "ess": float(self.ess)})


def pose_to_params(pose: Pose) -> np.ndarray:
    return np.concatenate([matrix_to_axis_angle(pose.R), pose.t])


def params_to_pose(theta) -> Pose:
    theta = np.asarray(theta, dtype=np.float64)
    return Pose(axis_angle_to_matrix(theta[:3]), theta[3:])


# ---------------------------------------------------------------------------
# residuals and Jacobians (numpy, batched over poses)
# ---------------------------------------------------------------------------
def _skew_batch(v: np.ndarray) -> np.ndarray:
    """(..., 3) -> (..., 3, 3) cross-product matrices."""
    out = np.zeros(v.shape + (3,))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def _rotation_derivatives(w: np.ndarray, R: np.ndarray) -> np.ndarray:
    """dR/dw_i for a batch: (B, 3, 3, 3) indexed [b, i, :, :]."""
    th2 = np.sum(w * w, axis=1)
    small = th2 < 1e-16
    IR = np.eye(3) - R
    # row i of cols holds w x (I - R) e_i
    cols = np.cross(w[:, None, :], IR.transpose(0, 2, 1))
    A = w[:, :, None, None] * _skew_batch(w)[:, None] + _skew_batch(cols)
    out = np.einsum("bijk,bkl->bijl", A, R) / np.where(small, 1.0, th2)[:, None, None, None]
    out[small] = _skew_batch(np.eye(3))
    return out


def _residuals(theta, corr: Correspondences, intr: Intrinsics, min_depth, jac=False):
    """Weighted residual vectors (B, 2M) and optionally Jacobians (B, 2M, 6)."""
    theta = np.atleast_2d(theta)
    R = axis_angle_to_matrix(theta[:, :3])
    X = np.einsum("bij,mj->bmi", R, corr.points) + theta[:, None, 3:]
    Z = X[..., 2]
    clamped = Z < min_depth
    Zc = np.where(clamped, min_depth, Z)
    u = intr.fx * X[..., 0] / Zc + intr.cx
    v = intr.fy * X[..., 1] / Zc + intr.cy
    sw = np.sqrt(corr.weights)
    r = np.stack([(u - corr.pixels[:, 0]) * sw, (v - corr.pixels[:, 1]) * sw], axis=-1)
    B, M = Z.shape
    if not jac:
        return r.reshape(B, 2 * M)
    dZ = np.where(clamped, 0.0, 1.0)
    dr_dX = np.zeros((B, M, 2, 3))
    dr_dX[..., 0, 0] = intr.fx / Zc
    dr_dX[..., 0, 2] = -intr.fx * X[..., 0] / Zc ** 2 * dZ
    dr_dX[..., 1, 1] = intr.fy / Zc
    dr_dX[..., 1, 2] = -intr.fy * X[..., 1] / Zc ** 2 * dZ
    dr_dX *= sw[None, :, None, None]
    dR = _rotation_derivatives(theta[:, :3], R)            # (B, 3, 3, 3)
    dX_dw = np.einsum("bikl,ml->bmki", dR, corr.points)     # (B, M, 3, 3): [.., xyz, i]
    J = np.concatenate([dr_dX @ dX_dw, dr_dX], axis=-1)     # (B, M, 2, 6)
    return r.reshape(B, 2 * M), J.reshape(B, 2 * M, 6)


def objective(theta, corr: Correspondences, intr: Intrinsics, min_depth=0.05) -> np.ndarray:
    """1/2 sum beta ||proj - q||^2 for (6,) or (B, 6) parameters."""
    r = _residuals(theta, corr, intr, min_depth)
    out = 0.5 * np.sum(r * r, axis=1)
    return out[0] if np.ndim(theta) == 1 else out


def objective_grad(theta, corr, intr, min_depth=0.05) -> np.ndarray:
    r, J = _residuals(theta, corr, intr, min_depth, jac=True)
    return np.einsum("bki,bk->bi", J, r)[0]


def residual(pose: Pose, p, q, beta, intr: Intrinsics, min_depth=0.05) -> float:
    """xi = beta * ||project(pose, p) - q||^2 for one correspondence."""
    c = Correspondences(np.asarray(p)[None], np.asarray(q)[None], np.atleast_1d(beta))
    return 2.0 * float(objective(pose_to_params(pose), c, intr, min_depth))


# ---------------------------------------------------------------------------
# Levenberg-Marquardt with multi-start initialization
# ---------------------------------------------------------------------------
def _random_rotations(rng, n) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
        np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
        np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
    ], axis=1)


def initial_guesses(corr: Correspondences, intr: Intrinsics, opts: PnPOptions) -> np.ndarray:
    """Centroid-alignment guess (identity rotation) plus random rotations.

    For each rotation the translation puts the weighted 3D centroid on the
    ray through the weighted 2D centroid, at the depth where the projected
    3D spread matches the observed pixel spread.
    """
    b = corr.weights / corr.weights.sum()
    pbar = b @ corr.points
    qbar = b @ corr.pixels
    s3 = np.sqrt(b @ np.sum((corr.points - pbar) ** 2, axis=1) * 2.0 / 3.0)
    s2 = np.sqrt(b @ np.sum((corr.pixels - qbar) ** 2, axis=1))
    f = 0.5 * (intr.fx + intr.fy)
    depth = f * s3 / s2 if s2 > 1e-9 and s3 > 1e-12 else 2.5
    ray = np.array([(qbar[0] - intr.cx) / intr.fx, (qbar[1] - intr.cy) / intr.fy, 1.0])
    rng = np.random.default_rng(opts.seed)
    rots = np.concatenate([np.eye(3)[None], _random_rotations(rng, max(opts.n_starts - 1, 0))])
    out = np.empty((len(rots), 6))
    for k, R in enumerate(rots):
        out[k, :3] = matrix_to_axis_angle(R)
        out[k, 3:] = depth * ray - R @ pbar
    return out


def _lm(theta, corr, intr, opts, iters, lam=None, active=None):
    """Batched LM; returns (theta, F, lam, grad_norm, iterations_run, trace)."""
    theta = np.array(theta, dtype=np.float64)
    B = theta.shape[0]
    act = np.arange(6) if active is None else np.asarray(active)
    lam = np.full(B, opts.damping) if lam is None else np.array(lam, dtype=np.float64)
    r, J = _residuals(theta, corr, intr, opts.min_depth, jac=True)
    J = J[..., act]
    F = 0.5 * np.sum(r * r, axis=1)
    g = np.einsum("bki,bk->bi", J, r)
    gn = np.linalg.norm(g, axis=1)
    trace = [F.copy()]
    done = gn < opts.tol
    it = 0
    for it in range(1, iters + 1):
        if done.all():
            it -= 1
            break
        H = np.einsum("bki,bkj->bij", J, J)
        d = np.einsum("bii->bi", H)
        A = H + lam[:, None, None] * (np.eye(len(act))[None] * (d[:, None, :] + 1e-12))
        try:
            step = -np.linalg.solve(A, g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = -np.stack([np.linalg.lstsq(A[i], g[i], rcond=None)[0] for i in range(B)])
        cand = theta.copy()
        cand[:, act] += np.where(done[:, None], 0.0, step)
        r2, J2 = _residuals(cand, corr, intr, opts.min_depth, jac=True)
        J2 = J2[..., act]
        F2 = 0.5 * np.sum(r2 * r2, axis=1)
        g2 = np.einsum("bki,bk->bi", J2, r2)
        gn2 = np.linalg.norm(g2, axis=1)
        # at the floor of float precision F stops moving; then a step that
        # shrinks the gradient without raising F is still progress
        flat = (F2 <= F + 16 * np.finfo(float).eps * np.abs(F)) & (gn2 < gn)
        accept = ((F2 < F) | flat) & ~done & np.isfinite(F2)
        theta[accept] = cand[accept]
        F = np.where(accept, F2, F)
        J[accept], r[accept] = J2[accept], r2[accept]
        g[accept], gn[accept] = g2[accept], gn2[accept]
        lam = np.where(accept, np.maximum(lam / 10.0, 1e-12), np.minimum(lam * 10.0, 1e16))
        # a converged or fully stalled start stops changing
        done = done | (gn < opts.tol) | (lam >= 1e16)
        trace.append(F.copy())
    return theta, F, lam, gn, it, trace


def solve(corr: Correspondences, intr: Intrinsics, opts: PnPOptions | None = None, init: Pose | None = None) -> PnPResult:
    """Weighted PnP by multi-start Levenberg-Marquardt.

    All starts run a short batched LM; the best one continues until the
    gradient norm drops below ``opts.tol`` or ``opts.max_iter`` is reached.
    With ``opts.active_dofs`` only those parameters move and the rest are
    held at ``init``.
    """
    opts = opts or PnPOptions()
    eff = corr.weights > 0
    if eff.sum() < 4:
        raise DegeneratePnPError(f"need at least 4 correspondences with positive weight, got {int(eff.sum())}")
    P = corr.points[eff] - corr.points[eff].mean(axis=0)
    if np.linalg.svd(P, compute_uv=False)[1] < 1e-9 * max(1.0, np.abs(P).max()):
        raise DegeneratePnPError("correspondence points are collinear")
    active = None if opts.active_dofs is None else tuple(opts.active_dofs)
    if active is not None:
        if init is None:
            raise ValueError("restricted solve needs an init pose for the fixed parameters")
        starts = pose_to_params(init)[None]
    else:
        starts = initial_guesses(corr, intr, opts)
        if init is not None:
            starts = np.concatenate([pose_to_params(init)[None], starts])
    first = min(opts.multistart_iters, opts.max_iter)
    theta, F, lam, gn, it1, trace = _lm(starts, corr, intr, opts, first, active=active)
    best = int(np.argmin(np.where(np.isfinite(F), F, np.inf)))
    theta, F, lam, gn, it2, trace2 = _lm(theta[best:best + 1], corr, intr, opts,
                                         opts.max_iter - it1, lam=lam[best:best + 1], active=active)
    obj_trace = [float(t[best]) for t in trace] + [float(t[0]) for t in trace2[1:]]
    th = theta[0]
    # wrap to the canonical |w| <= pi representative without a matrix round trip
    ang = np.linalg.norm(th[:3])
    if ang > np.pi:
        th[:3] *= 1.0 - 2.0 * np.pi / ang
    F[0] = objective(th, corr, intr, opts.min_depth)
    r, J = _residuals(th, corr, intr, opts.min_depth, jac=True)
    H = J[0].T @ J[0]
    g = J[0].T @ r[0]
    if active is not None:
        mask = np.zeros(6, bool)
        mask[list(active)] = True
        g = g[mask]
    gnorm = float(np.linalg.norm(g))
    return PnPResult(params_to_pose(th), th, float(F[0]), it1 + it2, gnorm < opts.tol, gnorm, H, obj_trace)


# ---------------------------------------------------------------------------
# adaptive multiple importance sampling
# ---------------------------------------------------------------------------
class _TProposal:
    def __init__(self, mean, scale, dof):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.scale = np.asarray(scale, dtype=np.float64)
        self.dof = float(dof)
        self.L = np.linalg.cholesky(self.scale)
        d = len(self.mean)
        self.logdet = 2.0 * np.sum(np.log(np.diag(self.L)))
        self.lognorm = (special.gammaln((self.dof + d) / 2.0) - special.gammaln(self.dof / 2.0)
                        - 0.5 * d * np.log(self.dof * np.pi) - 0.5 * self.logdet)

    def sample(self, rng, n):
        d = len(self.mean)
        z = rng.standard_normal((n, d)) @ self.L.T
        u = rng.chisquare(self.dof, size=n) / self.dof
        return self.mean + z / np.sqrt(u)[:, None]

    def logpdf(self, x):
        d = len(self.mean)
        diff = np.atleast_2d(x) - self.mean
        sol = np.linalg.solve(self.L, diff.T)
        m = np.sum(sol * sol, axis=0)
        return self.lognorm - 0.5 * (self.dof + d) * np.log1p(m / self.dof)


def _pd_or_none(cov):
    if not np.all(np.isfinite(cov)):
        return None
    cov = 0.5 * (cov + cov.T)
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return None
    if np.linalg.cond(cov) > 1e14:
        return None
    return cov


def _log_target(params_full, corr, intr, min_depth):
    logf = -objective(params_full, corr, intr, min_depth)
    outside = np.linalg.norm(params_full[:, :3], axis=1) > np.pi
    return np.where(outside | ~np.isfinite(logf), -np.inf, logf)


def amis_samples(corr: Correspondences, intr: Intrinsics, center: np.ndarray, hessian: np.ndarray,
                 opts: PnPOptions, diag: Diagnostics | None = None) -> PoseSamples:
    """Draw ``amis_rounds * amis_samples`` poses with adaptive t proposals.

    ``center`` is the full 6-vector the proposals start from; inactive
    parameters stay at their center values.  Each round refits mean and
    covariance from all samples so far, weighted against the deterministic
    mixture of every proposal used.
    """
    diag = diag if diag is not None else Diagnostics()
    active = tuple(range(6)) if opts.active_dofs is None else tuple(opts.active_dofs)
    act = np.array(active)
    rng = np.random.default_rng([opts.seed, 7919])
    fallback = np.diag(np.asarray(opts.fallback_std, dtype=np.float64)[act] ** 2)
    cov = None
    Hs = hessian[np.ix_(act, act)]
    if np.all(np.isfinite(Hs)):
        try:
            cov = _pd_or_none(np.linalg.inv(Hs + 1e-12 * np.eye(len(act))))
        except np.linalg.LinAlgError:
            cov = None
    if cov is None:
        diag.amis_resets += 1
        cov = fallback
    proposals = [_TProposal(center[act], cov, opts.t_dof)]
    xs, logf = [], []
    for rnd in range(opts.amis_rounds):
        q = proposals[-1]
        x = q.sample(rng, opts.amis_samples)
        full = np.repeat(center[None], len(x), axis=0)
        full[:, act] = x
        xs.append(x)
        logf.append(_log_target(full, corr, intr, opts.min_depth))
        X = np.concatenate(xs)
        lf = np.concatenate(logf)
        logq = np.stack([p.logpdf(X) for p in proposals])
        log_mix = special.logsumexp(logq, axis=0) - np.log(len(proposals))
        if rnd == opts.amis_rounds - 1:
            break
        lw = lf - log_mix
        if not np.any(np.isfinite(lw)):
            diag.amis_resets += 1
            proposals.append(_TProposal(center[act], fallback, opts.t_dof))
            continue
        w = np.exp(lw - np.max(lw))
        w /= w.sum()
        mean = w @ X
        diff = X - mean
        new_cov = _pd_or_none((w[:, None] * diff).T @ diff)
        if new_cov is None:
            diag.amis_resets += 1
            new_cov = fallback
        proposals.append(_TProposal(mean, new_cov, opts.t_dof))
    full = np.repeat(center[None], len(X), axis=0)
    full[:, act] = X
    lw = lf - log_mix
    if np.any(np.isfinite(lw)):
        w = np.exp(lw - np.max(lw))
        diag.ess = float(w.sum() ** 2 / np.sum(w * w))
        diag.log_integral = float(special.logsumexp(lw) - np.log(len(lw)))
    return PoseSamples(full, log_mix, active)


def cost_tensor(points, weights, pixels, R: np.ndarray, t: np.ndarray, intr: Intrinsics,
                min_depth=0.05) -> Tensor:
    """1/2 sum_j beta_j ||proj_j - q_j||^2 for a batch of (S,) fixed poses.

    ``points`` (M, 3) and ``weights`` (M,) may be Tensors; the result is (S,).
    """
    points = ad._as_tensor(points)
    weights = ad._as_tensor(weights, points)
    dt = points.dtype
    M = points.shape[0]
    X = ad.matmul(points.reshape(1, M, 3), Tensor(np.swapaxes(R, 1, 2).astype(dt)))
    X = X + Tensor(t[:, None, :].astype(dt))
    Z = ad.maximum(X[:, :, 2], min_depth)
    u = X[:, :, 0] / Z * intr.fx + (intr.cx - pixels[:, 0]).astype(dt)
    v = X[:, :, 1] / Z * intr.fy + (intr.cy - pixels[:, 1]).astype(dt)
    sq = u * u + v * v
    return ad.sum(sq * weights, axis=1) * 0.5


def log_integral_tensor(points, weights, pixels, intr: Intrinsics, samples: PoseSamples,
                        min_depth=0.05) -> Tensor:
    """Importance-sampling estimate of log integral exp(-cost(y)) dy."""
    inside = np.linalg.norm(samples.params[:, :3], axis=1) <= np.pi
    keep = inside & np.isfinite(samples.log_mix)
    P = samples.params[keep]
    if len(P) == 0:
        raise DegeneratePnPError("no usable pose samples inside the chart")
    R = axis_angle_to_matrix(P[:, :3])
    cost = cost_tensor(points, weights, pixels, R, P[:, 3:], intr, min_depth)
    lw = ad.sub(-cost, Tensor(samples.log_mix[keep].astype(cost.dtype)))
    # samples outside the chart contribute zero but still count in the mean
    return ad.logsumexp(lw, axis=0) - np.log(len(samples.params))


def mc_pose_loss(points, weights, pixels, intr: Intrinsics, gt_pose: Pose, opts: PnPOptions | None = None,
                 samples: PoseSamples | None = None, diag: Diagnostics | None = None):
    """Monte-Carlo pose loss; returns ``(loss, samples, diagnostics)``.

    ``points`` (M, 3) and ``weights`` (M,) carry gradients.  Sample poses are
    constants, so gradients reach the points and weights through the
    reprojection costs at the ground truth and at every sample.  Passing a
    previous ``samples`` set freezes the Monte-Carlo estimate.
    """
    opts = opts or PnPOptions()
    diag = diag if diag is not None else Diagnostics()
    points = ad._as_tensor(points)
    weights = ad._as_tensor(weights, points)
    pixels = np.asarray(pixels, dtype=np.float64)
    if samples is None:
        corr = Correspondences(points.data, pixels, np.maximum(weights.data, 0.0))
        gt_params = pose_to_params(gt_pose)
        try:
            res = solve(corr, intr, opts, init=gt_pose if opts.active_dofs is not None else None)
            center, hess = res.params, res.hessian
            diag.iterations, diag.converged = res.iterations, res.converged
            diag.objective_trace = res.trace
        except DegeneratePnPError:
            # too few weighted points to solve: sample broadly around the ground truth
            center, hess = gt_params, np.full((6, 6), np.nan)
        if opts.active_dofs is not None:
            inactive = [i for i in range(6) if i not in opts.active_dofs]
            center = center.copy()
            center[inactive] = gt_params[inactive]
        samples = amis_samples(corr, intr, center, hess, opts, diag)
    gt_cost = cost_tensor(points, weights, pixels, gt_pose.R[None], gt_pose.t[None], intr, opts.min_depth)
    loss = gt_cost.reshape(()) + log_integral_tensor(points, weights, pixels, intr, samples, opts.min_depth)
    return loss, samples, diag
