"""Radiance fields: positional encoding, the original and translated NeRF, volume rendering.

The original NeRF is a ``FieldParams`` with ``code_dim == 0`` and single
linear output heads.  ``translated_from`` keeps its trunk, discards those
heads and attaches fresh two-layer heads that also read the edit code.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .scene import CameraPose, Rays, generate_rays
from .tensor import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GN2N"
CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, what: str = "loss"):
        super().__init__(f"{what} became non-finite at iteration {iteration}")
        self.iteration = iteration


# -- encoding ------------------------------------------------------------

def positional_encode(x, levels: int) -> np.ndarray:
    """Per channel: [x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(...)].

    Accepts (..., 3) and returns (..., 3 * (1 + 2 * levels)).
    """
    if levels < 0:
        raise ValueError("levels must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if levels == 0:
        return x.copy()
    out = np.empty(x.shape + (1 + 2 * levels,))
    out[..., 0] = x
    s, c = np.sin(np.pi * x), np.cos(np.pi * x)
    for k in range(levels):
        out[..., 1 + 2 * k] = s
        out[..., 2 + 2 * k] = c
        # double-angle recurrence; cheaper than fresh sin/cos per octave
        s, c = 2.0 * s * c, 1.0 - 2.0 * s * s
    return out.reshape(*x.shape[:-1], -1)


def encoded_width(levels: int) -> int:
    return 3 * (1 + 2 * levels)


# -- MLP plumbing ----------------------------------------------------------

def init_linear(rng: np.random.Generator, n_in: int, n_out: int, gain: float = 2.0):
    w = rng.normal(0.0, math.sqrt(gain / n_in), size=(n_in, n_out))
    return [T.param(w), T.param(np.zeros(n_out))]


def init_mlp(rng, sizes, final_gain: float = 1.0):
    layers = []
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = k == len(sizes) - 2
        layers.append(init_linear(rng, a, b, final_gain if last else 2.0))
    return layers


def mlp_forward(layers, x: Tensor, relu_last: bool = False, activation: str = "relu") -> Tensor:
    for k, (w, b) in enumerate(layers):
        x = T.dense(x, w, b, activation if k < len(layers) - 1 or relu_last else None)
    return x


def flat_params(layers) -> list[Tensor]:
    return [p for layer in layers for p in layer]


# -- field ---------------------------------------------------------------------

@dataclass
class FieldParams:
    trunk: list
    density_head: list
    color_head: list
    pos_levels: int = 4
    dir_levels: int = 2
    code_dim: int = 0
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    @property
    def feature_width(self) -> int:
        return self.trunk[-1][0].shape[1]

    def parameters(self, include_trunk: bool = True) -> list[Tensor]:
        ps = flat_params(self.trunk) if include_trunk else []
        return ps + flat_params(self.density_head) + flat_params(self.color_head)

    def copy(self) -> "FieldParams":
        dup = lambda layers: [[T.param(p.data.copy()) for p in layer] for layer in layers]
        return FieldParams(dup(self.trunk), dup(self.density_head), dup(self.color_head),
                           self.pos_levels, self.dir_levels, self.code_dim, self.center.copy(), self.scale)


def init_original_field(rng: np.random.Generator, pos_levels: int = 4, dir_levels: int = 2,
                        width: int = 64, depth: int = 4, feature: int = 32,
                        center=(0.0, 0.0, 0.0), scale: float = 1.0) -> FieldParams:
    """Original NeRF: trunk of ``depth`` relu layers ending at ``feature`` units, linear heads."""
    n_in = encoded_width(pos_levels) + encoded_width(dir_levels)
    trunk = init_mlp(rng, [n_in] + [width] * (depth - 1) + [feature], final_gain=2.0)
    return FieldParams(trunk, init_mlp(rng, [feature, 1]), init_mlp(rng, [feature, 3]),
                       pos_levels, dir_levels, 0, np.asarray(center, dtype=np.float64), float(scale))


def translated_from(original: FieldParams, code_dim: int, rng: np.random.Generator,
                    head_width: int = 32, head_depth: int = 2) -> FieldParams:
    """Keep the pretrained trunk; replace its output layers with z-conditioned heads."""
    if code_dim < 1:
        raise ValueError("translated field needs code_dim >= 1")
    trunk = [[T.param(p.data.copy()) for p in layer] for layer in original.trunk]
    n_in = original.feature_width + code_dim
    sizes = [n_in] + [head_width] * (head_depth - 1)
    return FieldParams(trunk, init_mlp(rng, sizes + [1]), init_mlp(rng, sizes + [3]),
                       original.pos_levels, original.dir_levels, code_dim,
                       original.center.copy(), original.scale)


def field_inputs(params: FieldParams, pts: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    x = (pts - params.center) / params.scale
    return np.concatenate([positional_encode(x, params.pos_levels),
                           positional_encode(dirs, params.dir_levels)], axis=-1)


def _broadcast_code(z, n: int, code_dim: int) -> Tensor:
    z = T.as_tensor(z)
    if z.size != code_dim:
        raise T.ShapeError("edit code", (code_dim,), z.shape)
    return T.matmul(Tensor(np.ones((n, 1))), z.reshape(1, code_dim))


def translated_field_eval(params: FieldParams, pts: np.ndarray, dirs: np.ndarray, z=None):
    """Density and color at (P, 3) points/directions; returns (sigma (P,1), rgb (P,3))."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    feat = mlp_forward(params.trunk, Tensor(field_inputs(params, pts, dirs)), relu_last=True)
    if params.code_dim:
        if z is None:
            raise T.ShapeError("edit code", (params.code_dim,), ())
        feat = T.concat([feat, _broadcast_code(z, feat.shape[0], params.code_dim)])
    elif z is not None and T.as_tensor(z).size:
        raise T.ShapeError("edit code", (0,), T.as_tensor(z).shape)
    sigma = T.softplus(mlp_forward(params.density_head, feat))
    rgb = T.sigmoid(mlp_forward(params.color_head, feat))
    return sigma, rgb


# -- volume rendering ----------------------------------------------------------------

@dataclass(frozen=True)
class RenderConfig:
    n_samples_per_ray: int = 32
    stratified: bool = True
    white_background: bool = False
    background: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if self.n_samples_per_ray < 2:
            raise ValueError("need at least 2 samples per ray")

    @property
    def bg(self) -> np.ndarray:
        return np.ones(3) if self.white_background else np.asarray(self.background, dtype=np.float64)


@dataclass
class RenderOutput:
    rgb: Tensor  # (R, 3)
    weights: Tensor  # (R, S)
    t_edges: np.ndarray  # (R, S + 1)
    optical_depth: Tensor  # (R,)


def sample_bins(n_rays: int, t_near: float, t_far: float, n: int, stratified: bool,
                rng: np.random.Generator | None):
    """Equal bins over [t_near, t_far]; one sample per bin (jittered when stratified)."""
    edges = np.broadcast_to(np.linspace(t_near, t_far, n + 1), (n_rays, n + 1))
    if stratified:
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        u = rng.random((n_rays, n))
    else:
        u = np.full((n_rays, n), 0.5)
    t = edges[:, :-1] + u * (edges[:, 1:] - edges[:, :-1])
    return np.ascontiguousarray(edges), t


_tri_cache: dict[int, np.ndarray] = {}


def _exclusive_cumsum_matrix(n: int) -> np.ndarray:
    if n not in _tri_cache:
        _tri_cache[n] = np.triu(np.ones((n, n)), k=1)
    return _tri_cache[n]


def composite(sigma: Tensor, rgb: Tensor, deltas: np.ndarray, background: np.ndarray):
    """Emission-absorption quadrature over (R, S) densities and (R, S, 3) colors."""
    n_rays, n = deltas.shape
    tau = sigma * Tensor(deltas)
    before = T.matmul(tau, Tensor(_exclusive_cumsum_matrix(n)))
    trans = T.exp(-before)
    alpha = 1.0 - T.exp(-tau)
    w = trans * alpha
    pix = T.matmul(w.reshape(n_rays, 1, n), rgb).reshape(n_rays, 3)
    total = tau.sum(axis=-1)
    t_final = T.exp(-total)
    pix = pix + T.matmul(t_final.reshape(n_rays, 1), Tensor(np.asarray(background).reshape(1, 3)))
    return pix, w, total


def volume_render(params: FieldParams, rays: Rays, z, cfg: RenderConfig,
                  rng: np.random.Generator | None = None) -> RenderOutput:
    flat = rays.reshape(-1)
    n_rays, n = flat.origins.shape[0], cfg.n_samples_per_ray
    edges, t = sample_bins(n_rays, rays.t_near, rays.t_far, n, cfg.stratified, rng)
    pts = flat.origins[:, None, :] + t[..., None] * flat.directions[:, None, :]
    dirs = np.broadcast_to(flat.directions[:, None, :], pts.shape)
    sigma, rgb = translated_field_eval(params, pts, dirs, z)
    deltas = edges[:, 1:] - edges[:, :-1]
    pix, w, total = composite(sigma.reshape(n_rays, n), rgb.reshape(n_rays, n, 3), deltas, cfg.bg)
    return RenderOutput(pix, w, edges, total)


def render_image(params: FieldParams, pose: CameraPose, t_near: float, t_far: float, z,
                 cfg: RenderConfig, chunk: int = 4096, rng=None) -> np.ndarray:
    """Full image render without building a graph; deterministic when not stratified."""
    rays = generate_rays(pose, t_near, t_far).reshape(-1)
    out = []
    with T.no_grad():
        for s in range(0, rays.shape[0], chunk):
            out.append(volume_render(params, rays[s:s + chunk], z, cfg, rng).rgb.data)
    return np.concatenate(out).reshape(pose.height, pose.width, 3)


# -- pretraining -------------------------------------------------------------------

@dataclass
class PretrainConfig:
    iters: int = 2000
    rays_per_step: int = 1024
    samples_per_ray: int = 32
    lr: float = 5e-3
    seed: int = 0
    pos_levels: int = 4
    dir_levels: int = 2
    log_every: int = 200


def psnr_from_mse(mse: float) -> float:
    return 99.0 if mse < 1e-10 else float(-10.0 * np.log10(mse))


def pretrain_original_nerf(images, poses, bounds, config: PretrainConfig | None = None,
                           background=(0.5, 0.5, 0.5), center=(0.0, 0.0, 0.0), scale: float = 1.0):
    """Fit an unconditional field to posed images with an L2 photometric loss.

    ``bounds`` is (t_near, t_far).  Returns (params, train_psnr).
    """
    cfg = config or PretrainConfig()
    if len(images) < 2 or len(images) != len(poses):
        raise ValueError("pretraining needs >= 2 posed images")
    rng = np.random.default_rng(cfg.seed)
    params = init_original_field(rng, cfg.pos_levels, cfg.dir_levels, center=center, scale=scale)
    opt = T.Adam(params.parameters(), lr=cfg.lr)
    rcfg = RenderConfig(cfg.samples_per_ray, stratified=True, background=tuple(background))
    all_rays = [generate_rays(p, *bounds).reshape(-1) for p in poses]
    targets = [np.asarray(im).reshape(-1, 3) for im in images]
    order: list[int] = []
    for it in range(cfg.iters):
        if not order:
            order = list(rng.permutation(len(images)))
        v = order.pop()
        idx = rng.choice(targets[v].shape[0], size=min(cfg.rays_per_step, targets[v].shape[0]),
                         replace=False)
        out = volume_render(params, all_rays[v][idx], None, rcfg, rng)
        loss = T.mean(T.square(out.rgb - targets[v][idx]))
        if not np.isfinite(loss.data):
            raise DivergenceError(it)
        opt.zero_grad()
        T.backward(loss)
        opt.step()
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("pretrain it=%d loss=%.5f psnr=%.2f", it, loss.item(), psnr_from_mse(loss.item()))
    eval_cfg = RenderConfig(cfg.samples_per_ray, stratified=False, background=tuple(background))
    mse = np.mean([np.mean((render_image(params, p, *bounds, None, eval_cfg) - im) ** 2)
                   for p, im in zip(poses, images)])
    return params, psnr_from_mse(float(mse))


# -- checkpoint I/O ----------------------------------------------------------------

def write_arrays(path, meta: list[int], arrays: list[np.ndarray]) -> None:
    """GN2N container: magic, u32 version, u32 meta count + values, then shape-prefixed float64 arrays.

    Written to a temporary file and renamed so readers never see partial files.
    """
    path = Path(path)
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<II", CHECKPOINT_VERSION, len(meta))
    buf += struct.pack(f"<{len(meta)}I", *meta)
    buf += struct.pack("<I", len(arrays))
    for a in arrays:
        a = np.asarray(a, dtype="<f8")
        buf += struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
        buf += a.tobytes(order="C")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


def read_arrays(path) -> tuple[list[int], list[np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a GN2N checkpoint")
    version, n_meta = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    meta = list(struct.unpack_from(f"<{n_meta}I", raw, pos))
    pos += 4 * n_meta
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    arrays = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays.append(np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64))
        pos += 8 * n
    return meta, arrays


def save_field(params: FieldParams, path) -> None:
    meta = [params.pos_levels, params.dir_levels, params.code_dim,
            len(params.trunk), len(params.density_head), len(params.color_head)]
    arrays = [params.center, np.array([params.scale])] + [p.data for p in params.parameters()]
    write_arrays(path, meta, arrays)


def load_field(path) -> FieldParams:
    meta, arrays = read_arrays(path)
    pos_levels, dir_levels, code_dim, n_trunk, n_dens, n_col = meta
    center, scale, rest = arrays[0], float(arrays[1][0]), arrays[2:]
    it = iter(rest)
    take = lambda n: [[T.param(next(it)), T.param(next(it))] for _ in range(n)]
    trunk, dens, col = take(n_trunk), take(n_dens), take(n_col)
    return FieldParams(trunk, dens, col, pos_levels, dir_levels, code_dim, center, scale)
