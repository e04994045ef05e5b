"""Inference (sampling, interpolation) and in-repo evaluation metrics."""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field

import numpy as np

from .field import FieldParams, RenderConfig, render_image
from .latent import EncoderParams, encode

FEATURE_SEED = 8675309
FEATURE_DIM = 64


# -- inference ------------------------------------------------------------------

@dataclass
class Sample:
    z: np.ndarray
    renders: list[np.ndarray]


def render_views(fld: FieldParams, z, poses, t_near: float, t_far: float,
                 cfg: RenderConfig) -> list[np.ndarray]:
    det = RenderConfig(cfg.n_samples_per_ray, stratified=False, white_background=cfg.white_background,
                       background=cfg.background)
    return [render_image(fld, p, t_near, t_far, z, det) for p in poses]


def sample_and_render(fld: FieldParams, n_samples: int, poses, seed: int, t_near: float, t_far: float,
                      cfg: RenderConfig) -> list[Sample]:
    """Draw z ~ N(0, I) from a seeded stream and render every pose deterministically."""
    rng = np.random.default_rng(seed)
    zs = rng.standard_normal((n_samples, fld.code_dim))
    return [Sample(z, render_views(fld, z, poses, t_near, t_far, cfg)) for z in zs]


def interpolation_codes(z1, z2, n_steps: int) -> tuple[np.ndarray, np.ndarray]:
    """alpha uniform on [0, 1]; code = alpha * z1 + (1 - alpha) * z2."""
    z1, z2 = np.asarray(z1, dtype=np.float64), np.asarray(z2, dtype=np.float64)
    if z1.shape != z2.shape:
        raise ValueError(f"code shapes differ: {z1.shape} vs {z2.shape}")
    if n_steps < 2:
        raise ValueError("interpolation needs n_steps >= 2")
    alphas = np.linspace(0.0, 1.0, n_steps)
    return alphas, np.stack([a * z1 + (1.0 - a) * z2 for a in alphas])


def interpolate_codes(fld: FieldParams, z1, z2, n_steps: int, pose, t_near: float, t_far: float,
                      cfg: RenderConfig) -> tuple[np.ndarray, list[np.ndarray]]:
    alphas, codes = interpolation_codes(z1, z2, n_steps)
    return alphas, [render_views(fld, z, [pose], t_near, t_far, cfg)[0] for z in codes]


# -- pixel metrics ------------------------------------------------------------------

def _same_shape(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    return 99.0 if mse < 1e-10 else 10.0 * math.log10(1.0 / mse)


def _window_sums(x: np.ndarray, win: int) -> np.ndarray:
    """Sum over every valid win x win window of an (H, W, C) array via integral images."""
    c = np.pad(x, ((1, 0), (1, 0), (0, 0))).cumsum(0).cumsum(1)
    return c[win:, win:] - c[:-win, win:] - c[win:, :-win] + c[:-win, :-win]


def ssim(a, b, win: int = 8, k1: float = 0.01, k2: float = 0.03, L: float = 1.0) -> float:
    """Mean SSIM over all valid win x win windows and channels (population statistics)."""
    a, b = _same_shape(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    n = win * win
    mu_a, mu_b = _window_sums(a, win) / n, _window_sums(b, win) / n
    var_a = _window_sums(a * a, win) / n - mu_a ** 2
    var_b = _window_sums(b * b, win) / n - mu_b ** 2
    cov = _window_sums(a * b, win) / n - mu_a * mu_b
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


def colorfulness(img) -> float:
    """Hasler-Suesstrunk colorfulness on 0-255 channels."""
    x = np.asarray(img, dtype=np.float64) * 255.0
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    rg = r - g
    yb = 0.5 * (r + g) - b
    return float(math.sqrt(rg.std() ** 2 + yb.std() ** 2) + 0.3 * math.sqrt(rg.mean() ** 2 + yb.mean() ** 2))


# -- distribution metrics -------------------------------------------------------------

def projection_features(images, dim: int = FEATURE_DIM, seed: int = FEATURE_SEED) -> np.ndarray:
    """Pinned Gaussian random projection of flattened images to ``dim`` features."""
    x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    proj = np.random.default_rng(seed).normal(0.0, 1.0 / math.sqrt(x.shape[1]), size=(x.shape[1], dim))
    return x @ proj


def _psd_sqrt(mat: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    sym = (mat + mat.T) / 2
    vals, vecs = np.linalg.eigh(sym)
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -tol * scale:
        raise ValueError(f"matrix is not positive semidefinite (min eigenvalue {vals.min():.3g})")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_from_stats(mu_a, cov_a, mu_b, cov_b) -> float:
    """||mu_a - mu_b||^2 + Tr(cov_a + cov_b - 2 (cov_a cov_b)^{1/2}).

    The trace of (cov_a cov_b)^{1/2} equals that of (A^{1/2} cov_b A^{1/2})^{1/2}
    with A = cov_a, which keeps every square root symmetric.
    """
    sa = _psd_sqrt(cov_a)
    inner = sa @ cov_b @ sa
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -1e-8 * scale:
        raise ValueError("cross-covariance product is not positive semidefinite")
    tr_sqrt = float(np.sqrt(np.clip(vals, 0.0, None)).sum())
    diff = np.asarray(mu_a) - np.asarray(mu_b)
    return max(0.0, float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt))


def frechet_distance_features(fa, fb) -> float:
    fa, fb = np.asarray(fa, dtype=np.float64), np.asarray(fb, dtype=np.float64)
    if len(fa) < 2 or len(fb) < 2:
        raise ValueError("each set needs at least 2 samples")
    return frechet_from_stats(fa.mean(0), np.cov(fa, rowvar=False), fb.mean(0), np.cov(fb, rowvar=False))


def frechet_distance(set_a, set_b) -> float:
    """FD-proxy between two image sets over pinned random-projection features."""
    if len(set_a) < 2 or len(set_b) < 2:
        raise ValueError("each image set needs at least 2 images")
    fa = projection_features(set_a)
    fb = projection_features(set_b)
    d1 = frechet_distance_features(fa, fb)
    d2 = frechet_distance_features(fb, fa)
    # average the two orderings so the result is symmetric to rounding
    return 0.5 * (d1 + d2)


# -- consistency ----------------------------------------------------------------------------

def view_consistency(fld: FieldParams, enc: EncoderParams, z, poses, t_near: float, t_far: float,
                     cfg: RenderConfig) -> float:
    """Render z from every pose, re-encode, and return the mean per-dimension std of the codes."""
    if len(poses) < 2:
        raise ValueError("view consistency needs at least 2 poses")
    renders = render_views(fld, z, poses, t_near, t_far, cfg)
    return code_spread(enc, renders)


def code_spread(enc: EncoderParams, images) -> float:
    codes = encode(enc, np.stack(images)).mean.data
    return float(codes.std(axis=0).mean())


# -- hue utilities ----------------------------------------------------------------------------

def mean_hue(img) -> float:
    """Hue (turns in [0, 1)) of the image's mean color."""
    r, g, b = np.asarray(img, dtype=np.float64).reshape(-1, 3).mean(axis=0)
    return colorsys.rgb_to_hsv(r, g, b)[0]


def hue_distance(a, b):
    d = np.abs(np.asarray(a) - np.asarray(b)) % 1.0
    return np.minimum(d, 1.0 - d)


def circular_std(hues) -> float:
    """Circular standard deviation of hues, in turns."""
    ang = 2 * np.pi * np.asarray(hues, dtype=np.float64)
    r = np.hypot(np.cos(ang).mean(), np.sin(ang).mean())
    r = min(max(r, 1e-300), 1.0)
    return float(math.sqrt(-2.0 * math.log(r)) / (2 * np.pi))


def assign_modes(hues, mode_hues) -> np.ndarray:
    """Nearest reference hue for each sample hue (circular distance)."""
    hues = np.asarray(hues)[:, None]
    return np.argmin(hue_distance(hues, np.asarray(mode_hues)[None, :]), axis=1)


def kmeans_hues(hues, k: int, iters: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """k-means on the hue circle, seeded by farthest-point initialisation."""
    hues = np.asarray(hues, dtype=np.float64) % 1.0
    centers = [hues[0]]
    while len(centers) < k:
        d = np.min(hue_distance(hues[:, None], np.array(centers)[None, :]), axis=1)
        centers.append(hues[int(np.argmax(d))])
    centers = np.array(centers)
    for _ in range(iters):
        labels = assign_modes(hues, centers)
        new = centers.copy()
        for c in range(k):
            pts = hues[labels == c]
            if len(pts):
                ang = 2 * np.pi * pts
                new[c] = (math.atan2(np.sin(ang).mean(), np.cos(ang).mean()) / (2 * np.pi)) % 1.0
        if np.allclose(new, centers):
            break
        centers = new
    return assign_modes(hues, centers), centers


# -- reports --------------------------------------------------------------------------------

@dataclass
class MetricReport:
    psnr: float = float("nan")
    ssim: float = float("nan")
    cf: float = float("nan")
    fd_proxy: float = float("nan")
    view_consistency: float = float("nan")
    per_sample: list = field(default_factory=list)

    COLUMNS = ("psnr", "ssim", "cf", "fd_proxy", "view_consistency")

    def to_csv(self) -> str:
        head = ",".join(self.COLUMNS)
        row = ",".join(repr(float(getattr(self, c))) for c in self.COLUMNS)
        lines = [head, row]
        if self.per_sample:
            keys = sorted(self.per_sample[0])
            lines += ["", "sample," + ",".join(keys)]
            lines += [f"{k}," + ",".join(repr(float(s[c])) for c in keys) for k, s in enumerate(self.per_sample)]
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        labels = {"psnr": "PSNR (dB)", "ssim": "SSIM", "cf": "CF", "fd_proxy": "FD-proxy",
                  "view_consistency": "view consistency"}
        return "\n".join(f"{labels[c]:>18}: {getattr(self, c):.4f}" for c in self.COLUMNS) + "\n"
