"""Seeded parametric 2D translators standing in for pretrained image editors.

Every translator emits, for each source view ``i``, ``M`` edits ``S_i^j``.
Edit ``j`` belongs to discrete mode ``j % mode_count``; the mode fixes the
edit's look.  Two perturbations are layered on top, both scaled by the
inconsistency ``epsilon``: a per-edit variation drawn from
``hash(seed, i, j)`` and a per-view jitter drawn from ``hash(seed, i)``.
With ``epsilon == 0`` an edit looks the same from every view.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imageio import read_ppm, write_ppm

TASKS = ("stylize", "colorize", "super_resolve", "inpaint")
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class TranslatorSpec:
    task: str = "colorize"
    mode_count: int = 2
    epsilon: float = 0.0
    mask: np.ndarray | None = field(default=None, compare=False)
    scale: int = 4
    background: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.mode_count < 1:
            raise ValueError("mode_count must be >= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


@dataclass
class EditedImageSet:
    sources: np.ndarray  # (N, H, W, 3)
    edits: np.ndarray  # (N, M, H, W, 3)
    task: str
    seeds: np.ndarray  # (N, M) per-edit seeds
    modes: np.ndarray  # (M,) mode label of each edit index
    epsilon: float = 0.0
    seed: int = 0

    @property
    def n_views(self) -> int:
        return self.edits.shape[0]

    @property
    def n_edits(self) -> int:
        return self.edits.shape[1]

    def __post_init__(self):
        if self.edits.ndim != 5 or self.edits.shape[0] != self.sources.shape[0]:
            raise ValueError("edits must form a dense N x M grid matching the sources")
        if self.edits.shape[2:] != self.sources.shape[1:]:
            raise ValueError("edits and sources must share H x W")


# -- seeding -------------------------------------------------------------

def edit_seed(seed: int, i: int, j: int) -> int:
    return int(np.random.SeedSequence([seed, i, j]).generate_state(1)[0])


def view_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([seed, i, 0x7669657]).generate_state(1)[0])


def mode_of(j: int, mode_count: int) -> int:
    return j % mode_count


def mode_hue(seed: int, m: int, mode_count: int) -> float:
    """Mode hues are evenly spaced (at least a third of the wheel apart) from a seeded base."""
    base = np.random.default_rng(np.random.SeedSequence([seed, 0x6d6f6465])).random()
    return float((base + m / max(mode_count, 3)) % 1.0)


# -- image primitives ------------------------------------------------------------

def grayscale(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    luma = img @ LUMA
    return np.repeat(luma[..., None], 3, axis=-1)


def downscale(img: np.ndarray, factor: int) -> np.ndarray:
    """Box-filter average over ``factor`` x ``factor`` blocks."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"image {h}x{w} not divisible by factor {factor}")
    return img.reshape(h // factor, factor, w // factor, factor, -1).mean(axis=(1, 3))


def upscale(img: np.ndarray, factor: int, method: str = "bicubic") -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if method == "nearest":
        return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)
    if method != "bicubic":
        raise ValueError(f"unknown upscale method {method!r}")
    return np.clip(ndimage.zoom(img, (factor, factor, 1), order=3, mode="nearest", grid_mode=True), 0.0, 1.0)


def hue_rotation_matrix(turns: float) -> np.ndarray:
    """Rotation about the gray axis of RGB space (gray stays gray)."""
    a = 2 * math.pi * turns
    k = np.ones(3) / math.sqrt(3)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(a) * K + (1 - math.cos(a)) * (K @ K)


def rotate_hue(img: np.ndarray, turns: float) -> np.ndarray:
    return np.clip(img @ hue_rotation_matrix(turns).T, 0.0, 1.0)


def tint(luma: np.ndarray, hue: float, saturation: float) -> np.ndarray:
    """Color a luma map with a single hue while keeping luma where the gamut allows."""
    ref = np.array(colorsys.hsv_to_rgb(hue % 1.0, 1.0, 1.0))
    chroma = ref - ref @ LUMA
    chroma /= np.abs(chroma).max()
    amount = saturation * np.minimum(luma, 1.0 - luma)
    return np.clip(luma[..., None] + amount[..., None] * chroma, 0.0, 1.0)


def _background_mask(src: np.ndarray, background) -> np.ndarray:
    if background is None:
        return np.zeros(src.shape[:2], dtype=bool)
    return np.all(np.abs(src - np.asarray(background)) < 1e-9, axis=-1)


# -- per-task edits -----------------------------------------------------------------

def _jitter(seed: int, i: int, j: int):
    """Unit-scale perturbations: (per-edit normal draws, per-view uniform draws)."""
    per_edit = np.random.default_rng(edit_seed(seed, i, j)).normal(size=4)
    per_view = np.random.default_rng(view_seed(seed, i)).uniform(-1.0, 1.0, size=4)
    return per_edit, per_view


def _stylize(src, spec, seed, i, j):
    m = mode_of(j, spec.mode_count)
    e, v = _jitter(seed, i, j)
    eps = spec.epsilon
    turns = mode_hue(seed, m, spec.mode_count) + eps * (0.05 * e[0] + 0.25 * v[0])
    gamma = (0.7 if m % 2 == 0 else 1.4) * (1.0 + eps * (0.1 * e[1] + 0.3 * v[1]))
    out = rotate_hue(src, turns)
    return np.clip(out, 0.0, 1.0) ** gamma


def _colorize(src, spec, seed, i, j):
    m = mode_of(j, spec.mode_count)
    e, v = _jitter(seed, i, j)
    eps = spec.epsilon
    luma = grayscale(src)[..., 0]
    hue = mode_hue(seed, m, spec.mode_count) + eps * (0.05 * e[0] + 0.25 * v[0])
    sat = float(np.clip(0.9 * (1.0 + eps * (0.1 * e[1] + 0.3 * v[1])), 0.0, 1.0))
    out = tint(luma, hue, sat)
    gain = 1.0 + eps * (0.05 * e[2] + 0.3 * v[2])
    out = np.clip(out * gain, 0.0, 1.0)
    keep = _background_mask(src, spec.background)
    out[keep] = np.repeat(luma[keep][:, None], 3, axis=-1)
    return out


def _super_resolve(src, spec, seed, i, j):
    if spec.scale not in (2, 4):
        raise ValueError(f"super-resolution scale must be 2 or 4, got {spec.scale}")
    m = mode_of(j, spec.mode_count)
    e, v = _jitter(seed, i, j)
    eps = spec.epsilon
    up = upscale(downscale(src, spec.scale), spec.scale, "bicubic")
    amount = (0.5 + 1.5 * m / max(spec.mode_count - 1, 1)) * (1.0 + eps * (0.1 * e[0] + 0.5 * v[0]))
    blur = ndimage.gaussian_filter(up, sigma=(1.0, 1.0, 0.0), mode="nearest")
    out = up + amount * (up - blur)
    out = out * (1.0 + eps * 0.3 * v[1])
    return np.clip(out, 0.0, 1.0)


def _inpaint(src, spec, seed, i, j):
    if spec.mask is None:
        raise ValueError("inpaint translator needs a mask")
    mask = np.asarray(spec.mask, dtype=bool)
    if mask.shape != src.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {src.shape[:2]}")
    m = mode_of(j, spec.mode_count)
    e, v = _jitter(seed, i, j)
    eps = spec.epsilon
    h, w = mask.shape
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    theta = math.pi * m / max(spec.mode_count, 2)
    freq = 3.0 + 2.0 * m
    phase = 2 * math.pi * eps * (0.1 * e[0] + 0.5 * v[0])
    wave = 0.5 + 0.5 * np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    base = np.array(colorsys.hsv_to_rgb(mode_hue(seed, m, spec.mode_count), 0.7, 0.85))
    texture = np.clip(base * (0.6 + 0.4 * wave[..., None]), 0.0, 1.0)
    out = src.copy()
    out[mask] = texture[mask]
    return out


_TASK_FN = {"stylize": _stylize, "colorize": _colorize,
            "super_resolve": _super_resolve, "inpaint": _inpaint}


def translate(spec: TranslatorSpec, sources, M: int, seed: int = 0) -> EditedImageSet:
    """Produce the dense N x M grid of edits for the given source views."""
    sources = np.asarray(sources, dtype=np.float64)
    if M < 1:
        raise ValueError("M must be >= 1")
    if sources.ndim != 4 or sources.shape[0] == 0:
        raise ValueError("sources must be a nonempty (N, H, W, 3) stack")
    fn = _TASK_FN[spec.task]
    n = sources.shape[0]
    edits = np.empty((n, M) + sources.shape[1:])
    seeds = np.empty((n, M), dtype=np.uint64)
    for i in range(n):
        for j in range(M):
            seeds[i, j] = edit_seed(seed, i, j)
            edits[i, j] = fn(sources[i], spec, seed, i, j)
    modes = np.array([mode_of(j, spec.mode_count) for j in range(M)])
    return EditedImageSet(sources.copy(), edits, spec.task, seeds, modes, spec.epsilon, seed)


# -- persistence --------------------------------------------------------------------

def save_edited_set(es: EditedImageSet, root) -> None:
    """Layout: sources/view_iii.ppm, edits/view_iii/edit_jj.ppm, manifest.txt."""
    root = Path(root)
    for i in range(es.n_views):
        (root / "edits" / f"view_{i:03}").mkdir(parents=True, exist_ok=True)
        (root / "sources").mkdir(parents=True, exist_ok=True)
        write_ppm(root / "sources" / f"view_{i:03}.ppm", es.sources[i])
        for j in range(es.n_edits):
            write_ppm(root / "edits" / f"view_{i:03}" / f"edit_{j:02}.ppm", es.edits[i, j])
    lines = [f"task={es.task}", f"seed={es.seed}", f"epsilon={es.epsilon!r}",
             f"M={es.n_edits}", f"N={es.n_views}",
             "modes=" + ",".join(str(int(m)) for m in es.modes)]
    for i in range(es.n_views):
        lines.append(f"seeds_{i:03}=" + ",".join(str(int(s)) for s in es.seeds[i]))
    (root / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_edited_set(root) -> EditedImageSet:
    root = Path(root)
    kv = {}
    for line in (root / "manifest.txt").read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
    n, m = int(kv["N"]), int(kv["M"])
    sources = np.stack([read_ppm(root / "sources" / f"view_{i:03}.ppm") for i in range(n)])
    edits = np.stack([np.stack([read_ppm(root / "edits" / f"view_{i:03}" / f"edit_{j:02}.ppm")
                                for j in range(m)]) for i in range(n)])
    seeds = np.array([[int(s) for s in kv[f"seeds_{i:03}"].split(",")] for i in range(n)], dtype=np.uint64)
    modes = np.array([int(s) for s in kv["modes"].split(",")])
    return EditedImageSet(sources, edits, kv["task"], seeds, modes, float(kv["epsilon"]), int(kv["seed"]))
