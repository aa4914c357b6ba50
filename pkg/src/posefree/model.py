"""Single-stream transformer over triplane tokens and image patch tokens.

The sequence is ``[triplane position tokens | view 1 patches | ... | view N
patches]`` (plus one CLS token per view in the ``mlp-pose-cls`` ablation).
Image tokens are modulated by adaptive layer norm driven by each view's
conditioning vector (intrinsics MLP + reference or source view encoding);
triplane tokens get unmodulated normalization.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import Intrinsics, Pose, quaternion_to_matrix
from .layers import MLP, Linear, Module, param
from .triplane import NerfDecoder, Triplane, TriplaneUpsampler, triplane_from_grid

MODES = ("diff-pnp", "mlp-pose-cls", "mlp-pose-patch", "non-diff-pnp", "no-pose")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 16
    dim: int = 64
    layers: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    triplane_tokens: int = 8        # h_t = w_t
    triplane_channels: int = 8      # D_T
    upsample: int = 2
    intr_mlp_layers: int = 2
    intr_mlp_width: int = 64
    point_layers: int = 3
    point_width: int = 128
    decoder_layers: int = 5
    decoder_width: int = 64
    density_gain: float = 10.0
    render_steps: int = 64
    max_views: int = 4
    mode: str = "diff-pnp"
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image size must be divisible by patch size")
        if self.dim % self.heads:
            raise ValueError("token dim must be divisible by the head count")
        if self.mode not in MODES:
            raise ValueError(f"unknown ablation mode {self.mode!r}; expected one of {MODES}")
        if self.upsample not in (1, 2):
            raise ValueError("triplane upsample factor must be 1 or 2")

    @property
    def patches_per_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.patches_per_side ** 2

    @property
    def num_triplane_tokens(self) -> int:
        return 3 * self.triplane_tokens ** 2

    @property
    def triplane_resolution(self) -> int:
        return self.triplane_tokens * self.upsample

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "desk": ModelConfig(),
    # full-size configurations, kept for reference; far beyond CPU budgets
    "S": ModelConfig(image_size=256, dim=1024, layers=24, heads=16, triplane_tokens=32, triplane_channels=32,
                     upsample=1, intr_mlp_layers=5, intr_mlp_width=768, point_layers=4, point_width=512,
                     render_steps=64, density_gain=1.0),
    "L": ModelConfig(image_size=512, dim=1024, layers=36, heads=16, triplane_tokens=32, triplane_channels=32,
                     upsample=2, intr_mlp_layers=5, intr_mlp_width=768, point_layers=4, point_width=512,
                     render_steps=128, density_gain=1.0),
}


def preset(name: str, **overrides) -> ModelConfig:
    return replace(PRESETS[name], **overrides)


class Block(Module):
    """Pre-norm transformer block with adaptive layer-norm modulation."""

    def __init__(self, dim, heads, mlp_ratio, rng, dtype):
        self.heads = heads
        self.mod = Linear(dim, 4 * dim, rng, dtype, scale=0.02)
        self.qkv = Linear(dim, 3 * dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype, scale=np.sqrt(1.0 / dim) * 0.5)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng, dtype)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng, dtype, scale=np.sqrt(1.0 / (mlp_ratio * dim)) * 0.5)

    def modulation(self, cond: Tensor, n_plain: int, counts: list[int]):
        """Per-token (scale1, shift1, scale2, shift2); zeros for the first ``n_plain`` tokens.

        ``cond`` is (N, D); view i's vector covers ``counts[i]`` consecutive tokens.
        """
        mod = self.mod(ad.gelu(cond))
        D = cond.shape[1]
        pieces = [Tensor(np.zeros((n_plain, 4 * D), dtype=cond.dtype))] if n_plain else []
        for i, c in enumerate(counts):
            pieces.append(mod[i:i + 1] + Tensor(np.zeros((c, 1), dtype=cond.dtype)))
        full = ad.concat(pieces, axis=0)
        return [full[:, k * D:(k + 1) * D] for k in range(4)]

    def attention(self, x: Tensor) -> Tensor:
        S, D = x.shape
        H = self.heads
        dh = D // H
        qkv = self.qkv(x).reshape(S, 3, H, dh).transpose(1, 2, 0, 3)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = ad.softmax(ad.matmul(q, k.transpose(0, 2, 1)) * (1.0 / np.sqrt(dh)), axis=-1)
        out = ad.matmul(att, v).transpose(1, 0, 2).reshape(S, D)
        return self.proj(out)

    def __call__(self, x, mods):
        s1, b1, s2, b2 = mods
        h = ad.layer_norm(x) * (s1 + 1.0) + b1
        x = x + self.attention(h)
        h = ad.layer_norm(x) * (s2 + 1.0) + b2
        return x + self.fc2(ad.gelu(self.fc1(h)))


@dataclass
class ModelOutput:
    triplane: Triplane
    points: Tensor | None      # (N, M, 3)
    alpha: Tensor | None       # (N, M) in (0, 1)
    confidence: Tensor | None  # (N, M) > 0
    pixels: np.ndarray         # (M, 2) patch-center pixels
    pose_raw: Tensor | None    # (N, 7) quaternion + translation (regression ablations)
    image_tokens: Tensor       # (N, M, D)

    @property
    def beta(self) -> Tensor:
        return self.alpha * self.confidence


def patch_centers(cfg: ModelConfig) -> np.ndarray:
    n, P = cfg.patches_per_side, cfg.patch_size
    a, b = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    return np.stack([b.reshape(-1) * P + P / 2.0, a.reshape(-1) * P + P / 2.0], axis=1).astype(np.float64)


def patchify(images: np.ndarray, P: int) -> np.ndarray:
    """(N, H, W, 3) -> (N, M, P*P*3) in row-major patch order."""
    N, H, W, C = images.shape
    x = images.reshape(N, H // P, P, W // P, P, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(N, (H // P) * (W // P), P * P * C)


class ReconstructionModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dt = cfg.np_dtype
        D, M = cfg.dim, cfg.num_patches
        self.patch_embed = Linear(cfg.patch_size ** 2 * 3, D, rng, dt)
        self.pos_embed = param(rng.normal(0, 0.5, (M, D)), dt)
        self.triplane_pos = param(rng.normal(0, 1.0, (cfg.num_triplane_tokens, D)), dt)
        self.view_ref = param(rng.normal(0, 1.0, D), dt)
        self.view_src = param(rng.normal(0, 1.0, D), dt)
        self.intr_mlp = MLP(4, cfg.intr_mlp_width, D, cfg.intr_mlp_layers, rng, dt, act="gelu")
        self.blocks = [Block(D, cfg.heads, cfg.mlp_ratio, rng, dt) for _ in range(cfg.layers)]
        self.norm_w = param(np.ones(D), dt)
        self.norm_b = param(np.zeros(D), dt)
        self.triplane_head = Linear(D, cfg.triplane_channels, rng, dt)
        self.upsampler = TriplaneUpsampler(cfg.triplane_channels, cfg.triplane_channels, cfg.upsample, rng, dt)
        self.decoder = NerfDecoder(3 * cfg.triplane_channels, cfg.decoder_width, cfg.decoder_layers, rng, dt,
                                   density_gain=cfg.density_gain)
        if cfg.mode in ("diff-pnp", "non-diff-pnp"):
            self.point_head = MLP(D, cfg.point_width, 5, cfg.point_layers, rng, dt, act="gelu")
        if cfg.mode == "mlp-pose-cls":
            self.cls_token = param(rng.normal(0, 1.0, D), dt)
            self.pose_head = MLP(D, cfg.point_width, 7, cfg.point_layers, rng, dt, act="gelu", out_scale=0.1)
        if cfg.mode == "mlp-pose-patch":
            self.pose_head = MLP(M * D, cfg.point_width, 7, cfg.point_layers, rng, dt, act="gelu", out_scale=0.1)
        if cfg.mode.startswith("mlp-pose"):
            self.pose_head.layers[-1].bias.data[:] = [1.0, 0, 0, 0, 0, 0, 2.7]
        self._pixels = patch_centers(cfg)

    # -- pieces -----------------------------------------------------------------
    def conditioning(self, intrs: list[Intrinsics]) -> Tensor:
        """(N, D) modulation features; view 0 is the reference."""
        dt = self.cfg.np_dtype
        feats = np.array([[k.fx / k.width, k.fy / k.height, k.cx / k.width, k.cy / k.height] for k in intrs], dtype=dt)
        base = self.intr_mlp(Tensor(feats))
        N = len(intrs)
        enc = ad.concat([self.view_ref.reshape(1, -1)] + [self.view_src.reshape(1, -1)] * (N - 1), axis=0)
        return base + enc

    def embed_views(self, images: np.ndarray) -> Tensor:
        """(N, H, W, 3) in [0, 1] -> (N, M, D) tokens."""
        images = np.asarray(images)
        cfg = self.cfg
        if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, 3):
            raise ValueError(f"expected images of shape (N, {cfg.image_size}, {cfg.image_size}, 3), got {images.shape}")
        x = patchify((images.astype(cfg.np_dtype) - 0.5) * 2.0, cfg.patch_size)
        return self.patch_embed(Tensor(x)) + self.pos_embed

    def embed_view(self, image: np.ndarray, intr: Intrinsics, is_reference: bool):
        """Tokens (M, D) and conditioning vector (D,) for one view."""
        tokens = self.embed_views(np.asarray(image)[None])[0]
        feats = np.array([[intr.fx / intr.width, intr.fy / intr.height, intr.cx / intr.width,
                           intr.cy / intr.height]], dtype=self.cfg.np_dtype)
        m = self.intr_mlp(Tensor(feats))[0] + (self.view_ref if is_reference else self.view_src)
        return tokens, m

    # -- forward ----------------------------------------------------------------
    def __call__(self, images, intrs):
        return self.forward(images, intrs)

    def forward(self, images, intrs: list[Intrinsics]) -> ModelOutput:
        cfg = self.cfg
        images = np.asarray(images)
        N = images.shape[0] if images.ndim == 4 else 0
        if not 1 <= N <= cfg.max_views:
            raise ValueError(f"number of views must be in [1, {cfg.max_views}], got {N}")
        if len(intrs) != N:
            raise ValueError(f"{N} images but {len(intrs)} intrinsics")
        M, T, D = cfg.num_patches, cfg.num_triplane_tokens, cfg.dim
        img_tok = self.embed_views(images).reshape(N * M, D)
        cond = self.conditioning(intrs)
        seq = [self.triplane_pos, img_tok]
        counts = [M] * N
        cls = cfg.mode == "mlp-pose-cls"
        if cls:
            seq.append(self.cls_token.reshape(1, D) + Tensor(np.zeros((N, 1), dtype=cfg.np_dtype)))
        x = ad.concat(seq, axis=0)
        for blk in self.blocks:
            mods = blk.modulation(cond, T, counts)
            if cls:
                extra = blk.modulation(cond, 0, [1] * N)
                mods = [ad.concat([a, b], axis=0) for a, b in zip(mods, extra)]
            x = blk(x, mods)
        x = ad.layer_norm(x, self.norm_w, self.norm_b)
        tri_tok = x[:T]
        img_out = x[T:T + N * M].reshape(N, M, D)
        h = cfg.triplane_tokens
        grid = self.triplane_head(tri_tok).reshape(3, h, h, cfg.triplane_channels)
        tri = triplane_from_grid(self.upsampler(grid))
        points = alpha = conf = pose_raw = None
        if cfg.mode in ("diff-pnp", "non-diff-pnp"):
            raw = self.point_head(img_out.reshape(N * M, D)).reshape(N, M, 5)
            points = raw[:, :, 0:3]
            alpha = ad.sigmoid(raw[:, :, 3])
            conf = ad.softplus(raw[:, :, 4])
        elif cls:
            pose_raw = self.pose_head(x[T + N * M:])
        elif cfg.mode == "mlp-pose-patch":
            pose_raw = self.pose_head(img_out.reshape(N, M * D))
        return ModelOutput(tri, points, alpha, conf, self._pixels.copy(), pose_raw, img_out)

    def regress_pose_head(self, out: ModelOutput) -> list[Pose]:
        """Decode (N, 7) regression outputs into poses (ablation modes only)."""
        if not self.cfg.mode.startswith("mlp-pose"):
            raise RuntimeError(f"pose regression head is not available in mode {self.cfg.mode!r}")
        return poses_from_raw(out.pose_raw.data)


def normalize_quaternion(raw) -> Tensor:
    raw = ad._as_tensor(raw)
    norm = ad.sqrt(ad.sum(raw * raw, axis=-1, keepdims=True) + 1e-24)
    return raw / norm


def poses_from_raw(raw: np.ndarray) -> list[Pose]:
    raw = np.asarray(raw, dtype=np.float64)
    out = []
    for r in raw:
        q = r[:4] / np.linalg.norm(r[:4])
        out.append(Pose(quaternion_to_matrix(q), r[4:7]))
    return out
