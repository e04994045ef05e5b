"""Joint optimization of the translated field, the edit-code encoder and the discriminator."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .adversarial import (DiscriminatorParams, RenderedView, build_pairs, d_loss, g_loss,
                          init_discriminator)
from .field import (FieldParams, RenderConfig, flat_params, read_arrays, save_field,
                    translated_from, volume_render, write_arrays)
from .latent import (EncoderParams, contrastive_loss, encode, init_encoder, kl_loss, patch_indices,
                     prepare_images)
from .scene import CameraPose, Rays, generate_rays
from .tensor import Tensor
from .translator import EditedImageSet

log = logging.getLogger(__name__)

LOSS_TERMS = ("kl", "recon", "adg", "add", "contr")


class NumericalAbort(RuntimeError):
    def __init__(self, term: str, iteration: int):
        super().__init__(f"loss term {term!r} is non-finite at iteration {iteration}")
        self.term = term
        self.iteration = iteration


# -- perceptual stand-in -------------------------------------------------------

PERCEPTUAL_SEED = 20240517
_conv_cache: dict[tuple[int, int, int], np.ndarray] = {}


def filter_bank(n_filters: int = 16, size: int = 5, seed: int = PERCEPTUAL_SEED) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, 1.0 / np.sqrt(size * size * 3), size=(n_filters, size, size, 3))


def conv_matrix(patch: int, n_filters: int = 16, size: int = 5) -> np.ndarray:
    """Valid 2-D correlation with the pinned filter bank as one dense (p*p*3, q*q*F) matrix."""
    key = (patch, n_filters, size)
    if key not in _conv_cache:
        bank = filter_bank(n_filters, size)
        q = patch - size + 1
        mat = np.zeros((patch, patch, 3, q, q, n_filters))
        for y in range(q):
            for x in range(q):
                mat[y:y + size, x:x + size, :, y, x, :] = bank.transpose(1, 2, 3, 0)
        _conv_cache[key] = mat.reshape(patch * patch * 3, q * q * n_filters)
    return _conv_cache[key]


def _as_patches(img: Tensor, patch: int) -> Tensor:
    """(h, w, 3) or (B, h, w, 3) -> (n, patch*patch*3) tiles, row-major."""

    img = T.as_tensor(img)
    if img.ndim == 3:
        img = img.reshape(1, *img.shape)
    b, h, w, c = img.shape
    if h != w or h % patch:
        raise T.ShapeError("perceptual patches", img.shape, (b, patch, patch, c))
    flat = img.reshape(b, h * w * c)
    tiles = T.slice_(flat, (slice(None), patch_indices(h, patch, c)))
    return tiles.reshape(-1, patch * patch * c)


def perceptual_distance(a, b, patch: int = 16) -> Tensor:
    """L2 distance between relu(random-filter) feature maps, averaged over matched patches."""
    conv = Tensor(conv_matrix(patch))
    fa = T.relu(T.matmul(_as_patches(a, patch), conv))
    fb = T.relu(T.matmul(_as_patches(b, patch), conv))
    return T.sqrt(T.square(fa - fb).sum(axis=-1)).mean()


def recon_loss(render, target, patch: int = 16) -> Tensor:
    """Mean absolute error plus the patch perceptual distance."""
    render = T.as_tensor(render)
    target = T.as_tensor(target)
    if render.shape != target.shape:
        raise T.ShapeError("recon_loss", render.shape, target.shape)
    return T.abs_(render - target).mean() + perceptual_distance(render, target, patch)


# -- configuration -------------------------------------------------------------------

@dataclass
class TrainConfig:
    w_kl: float = 1.0
    w_recon: float = 1.0
    w_adg: float = 0.1
    w_add: float = 0.1
    w_contr: float = 0.1
    lr: float = 1e-2
    # per-group multipliers of lr; 0 freezes a group
    encoder_lr_scale: float = 0.2
    field_lr_scale: float = 0.2
    trunk_lr_scale: float = 0.1
    disc_lr_scale: float = 0.02
    iters: int = 2000
    rays_per_step: int = 2048
    samples_per_ray: int = 32
    patch_size: int = 16
    code_dim: int = 8
    margin: float = 1.0
    attract_views: int = 2
    attract_factor: int = 4
    d_steps_per_g: int = 1
    seed: int = 0
    freeze_encoder: bool = False
    detach_renders: bool = False
    log_every: int = 100

    @property
    def weights(self) -> tuple[float, ...]:
        return (self.w_kl, self.w_recon, self.w_adg, self.w_add, self.w_contr)

    def validate(self, height: int | None = None, width: int | None = None) -> None:
        if any(w < 0 for w in self.weights):
            raise ValueError("loss weights must be >= 0")
        if min(self.lr, self.encoder_lr_scale, self.field_lr_scale, self.trunk_lr_scale, self.disc_lr_scale) < 0:
            raise ValueError("learning rates and their scales must be >= 0 (0 freezes a group)")
        if self.rays_per_step < self.patch_size ** 2 or self.rays_per_step % self.patch_size ** 2:
            raise ValueError("rays_per_step must be a positive multiple of patch_size**2")
        if height is not None and self.rays_per_step > height * width:
            raise ValueError("rays_per_step exceeds the pixel count")
        if self.iters < 0 or self.samples_per_ray < 2 or self.d_steps_per_g < 1:
            raise ValueError("invalid schedule settings")

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)!r}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_pairs(cls, pairs: dict[str, str]) -> "TrainConfig":
        kw = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for k, v in pairs.items():
            if k not in types:
                raise KeyError(f"unknown train config key {k!r}")
            default = getattr(cls(), k)
            if isinstance(default, bool):
                kw[k] = str(v).lower() in ("1", "true", "yes", "on")
            else:
                kw[k] = type(default)(v)
        return cls(**kw)


@dataclass
class SceneSetup:
    """Posed views the edits were rendered from, plus ray bounds and background."""

    poses: list[CameraPose]
    t_near: float
    t_far: float
    background: tuple[float, float, float] = (0.5, 0.5, 0.5)


@dataclass
class TrainState:
    field: FieldParams
    encoder: EncoderParams
    disc: DiscriminatorParams
    opt_g: list  # Adam per generator group: encoder, field heads, trunk
    opt_d: T.Adam
    iteration: int = 0
    view_queue: list = field(default_factory=list)
    epoch_rng: np.random.Generator | None = None


@dataclass
class TrainResult:
    state: TrainState
    records: list[dict]
    manifest: dict


def generator_groups(state_field: FieldParams, enc: EncoderParams, cfg: TrainConfig):
    """(params, lr) for the encoder, the new field heads and the pretrained trunk; lr 0 freezes a group."""
    groups = [(enc.parameters(freeze_embed=cfg.freeze_encoder), cfg.lr * cfg.encoder_lr_scale),
              (state_field.parameters(include_trunk=False), cfg.lr * cfg.field_lr_scale),
              (flat_params(state_field.trunk), cfg.lr * cfg.trunk_lr_scale)]
    return [(ps, lr) for ps, lr in groups if lr > 0 and ps]


def generator_params(state_field: FieldParams, enc: EncoderParams, cfg: TrainConfig) -> list[Tensor]:
    return [p for ps, _ in generator_groups(state_field, enc, cfg) for p in ps]


def init_state(original: FieldParams, cfg: TrainConfig) -> TrainState:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x696e6974]))
    fld = translated_from(original, cfg.code_dim, rng)
    enc = init_encoder(rng, cfg.code_dim)
    disc = init_discriminator(rng, cfg.patch_size)
    opt_g = [T.Adam(ps, lr=lr) for ps, lr in generator_groups(fld, enc, cfg)]
    opt_d = T.Adam(disc.parameters(), lr=cfg.lr * cfg.disc_lr_scale)
    epoch_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x65706f63]))
    return TrainState(fld, enc, disc, opt_g, opt_d, 0, [], epoch_rng)


# -- one iteration -------------------------------------------------------------------------

def _patch_rays(pose: CameraPose, t_near, t_far, origins, p: int):
    rays = generate_rays(pose, t_near, t_far)
    return [rays[y:y + p, x:x + p].reshape(-1) for y, x in origins]


def _check(term: str, value: Tensor, it: int) -> float:
    v = float(value.data)
    if not np.isfinite(v):
        raise NumericalAbort(term, it)
    return v


def encoder_inputs(enc: EncoderParams, edits: EditedImageSet) -> np.ndarray:
    """Every edit box-filtered to the encoder resolution, shaped (N, M, r, r, 3)."""
    n, m, h, w = edits.edits.shape[:4]
    return prepare_images(enc, edits.edits.reshape(n * m, h, w, 3)).reshape(
        n, m, enc.resolution, enc.resolution, 3)


def next_view(state: TrainState, n_views: int) -> int:
    """Views are drawn without replacement within each epoch."""
    if not state.view_queue:
        state.view_queue = list(state.epoch_rng.permutation(n_views))
    return int(state.view_queue.pop())


@dataclass
class StepTerms:
    terms: dict
    pairs: object
    view: int
    edit: int


def step_terms(state: TrainState, edits: EditedImageSet, setup: SceneSetup, cfg: TrainConfig,
               enc_inputs: np.ndarray, it: int, i: int) -> StepTerms:
    """Build every loss term of iteration ``it`` at view ``i`` (pure given parameters and seeds)."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, it]))
    m = edits.n_edits
    h, w = edits.edits.shape[2:4]
    p = cfg.patch_size
    j = int(rng.integers(m))
    others = [k for k in range(m) if k != j]
    rcfg = RenderConfig(cfg.samples_per_ray, stratified=True, background=setup.background)
    wkl, wrec, wadg, wadd, wcon = cfg.weights

    # edit codes: anchor sampled, other same-view edits as repel set
    anchor = encode(state.encoder, enc_inputs[i, j], rng)
    repel = encode(state.encoder, enc_inputs[i, others]) if others else None
    z = anchor.sample.reshape(cfg.code_dim)

    # same-view patches rendered under the anchor's code
    n_patches = cfg.rays_per_step // (p * p)
    origins = [(int(rng.integers(h - p + 1)), int(rng.integers(w - p + 1))) for _ in range(n_patches)]
    rays = _patch_rays(setup.poses[i], setup.t_near, setup.t_far, origins, p)

    batch = Rays(np.concatenate([r.origins for r in rays]), np.concatenate([r.directions for r in rays]),
                 setup.t_near, setup.t_far)
    render = volume_render(state.field, batch, z, rcfg, rng).rgb.reshape(n_patches, p, p, 3)
    target = np.stack([edits.edits[i, j, y:y + p, x:x + p] for y, x in origins])

    terms: dict[str, Tensor] = {}
    terms["recon"] = recon_loss(render, target, p)
    terms["kl"] = kl_loss([anchor] + ([repel] if repel is not None else []))

    pairs = None
    if (wadg > 0 or wadd > 0) and m >= 2:
        views = [RenderedView(i, j, render[b], origins[b]) for b in range(n_patches)]
        pairs = build_pairs(edits, views, rng)
        terms["adg"] = g_loss(state.disc, pairs.fake)
    else:
        if wadg > 0 or wadd > 0:
            raise ValueError("adversarial loss needs M >= 2; set w_adg = w_add = 0")
        terms["adg"] = Tensor(0.0)

    if wcon > 0:
        pool = [l for l in range(edits.n_views) if l != i]
        picks = rng.choice(pool, size=min(cfg.attract_views, len(pool)), replace=False)
        small = []
        for l in picks:
            pose = setup.poses[int(l)].scaled(cfg.attract_factor)
            out = volume_render(state.field, generate_rays(pose, setup.t_near, setup.t_far).reshape(-1), z,
                                rcfg, rng).rgb
            if cfg.detach_renders:
                out = out.detach()
            small.append(out.reshape(1, pose.height, pose.width, 3))
        stacked = T.concat([s.reshape(1, -1) for s in small]).reshape(len(small), *small[0].shape[1:])
        attract = encode(state.encoder, stacked).mean
        terms["contr"] = contrastive_loss(anchor.mean, attract, repel.mean if repel is not None else None,
                                          cfg.margin)
    else:
        terms["contr"] = Tensor(0.0)
    return StepTerms(terms, pairs, i, j)


def generator_objective(terms: dict, cfg: TrainConfig) -> Tensor:
    """Weighted sum of the generator-side terms; zero-weight terms stay out of the graph."""
    total = Tensor(0.0)
    for name, wt in zip(LOSS_TERMS, cfg.weights):
        if name != "add" and wt > 0:
            total = total + wt * terms[name]
    return total


def train_step(state: TrainState, edits: EditedImageSet, setup: SceneSetup, cfg: TrainConfig,
               enc_inputs: np.ndarray | None = None) -> dict:
    """Run one generator update and ``d_steps_per_g`` discriminator updates; return the loss record."""
    it = state.iteration
    if enc_inputs is None:
        enc_inputs = encoder_inputs(state.encoder, edits)
    i = next_view(state, edits.n_views)
    st = step_terms(state, edits, setup, cfg, enc_inputs, it, i)
    terms, pairs = st.terms, st.pairs
    wadd = cfg.w_add

    for name in ("kl", "recon", "adg", "contr"):
        _check(name, terms[name], it)

    # generator side: field + encoder
    g_total = generator_objective(terms, cfg)
    T.zero_grads(state.field.parameters() + state.encoder.parameters())  # frozen groups too
    T.backward(g_total)
    for opt in state.opt_g:
        opt.step()

    # discriminator side, against renders from before the generator update
    add_value = 0.0
    if pairs is not None:
        for step in range(cfg.d_steps_per_g):
            dl = d_loss(state.disc, pairs)
            value = _check("add", dl, it)
            if step == 0:
                add_value = value
            if wadd > 0:
                state.opt_d.zero_grad()
                T.backward(wadd * dl)
                state.opt_d.step()

    record = {"iter": it, "kl": float(terms["kl"].data), "recon": float(terms["recon"].data),
              "adg": float(terms["adg"].data), "add": add_value, "contr": float(terms["contr"].data)}
    record["total"] = sum(wt * record[k] for wt, k in zip(cfg.weights, LOSS_TERMS))
    record["view"], record["edit"] = st.view, st.edit
    state.iteration += 1
    return record


# -- persistence ---------------------------------------------------------------------------

CSV_HEADER = "iter,total,kl,recon,adg,add,contr"


def records_to_csv(records: list[dict]) -> str:
    rows = [CSV_HEADER]
    for r in records:
        rows.append(",".join([str(r["iter"])] + [repr(float(r[k])) for k in ("total",) + LOSS_TERMS]))
    return "\n".join(rows) + "\n"


def save_encoder(enc: EncoderParams, path) -> None:
    write_arrays(path, [enc.code_dim, enc.resolution, enc.patch, len(enc.mlp)],
                 [p.data for p in enc.parameters()])


def load_encoder(path) -> EncoderParams:
    meta, arrays = read_arrays(path)
    code_dim, resolution, patch, n_mlp = meta
    ps = [T.param(a) for a in arrays]
    return EncoderParams(ps[:2], [ps[2 + 2 * k: 4 + 2 * k] for k in range(n_mlp)], code_dim, resolution, patch)


def save_discriminator(disc: DiscriminatorParams, path) -> None:
    write_arrays(path, [disc.patch, len(disc.layers)], [p.data for p in disc.parameters()])


def load_discriminator(path) -> DiscriminatorParams:
    meta, arrays = read_arrays(path)
    patch, n = meta
    ps = [T.param(a) for a in arrays]
    return DiscriminatorParams([ps[2 * k: 2 * k + 2] for k in range(n)], patch)


def params_digest(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def inputs_digest(original: FieldParams, edits: EditedImageSet, setup: SceneSetup) -> str:
    h = hashlib.sha256()
    h.update(params_digest(original.parameters()).encode())
    h.update(np.ascontiguousarray(edits.edits).tobytes())
    for pose in setup.poses:
        h.update(repr(pose).encode())
    h.update(repr((setup.t_near, setup.t_far, setup.background)).encode())
    return h.hexdigest()


def write_manifest(path, manifest: dict) -> None:
    lines = [f"{k}={v}" for k, v in manifest.items() if k != "config"]
    lines += [f"config.{line}" for line in manifest["config"].splitlines()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_checkpoint(state: TrainState, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"field": out / "field.gn2n", "encoder": out / "encoder.gn2n",
             "discriminator": out / "discriminator.gn2n"}
    save_field(state.field, paths["field"])
    save_encoder(state.encoder, paths["encoder"])
    save_discriminator(state.disc, paths["discriminator"])
    return {k: str(v) for k, v in paths.items()}


# -- full run ---------------------------------------------------------------------------------

def train(config: TrainConfig, original: FieldParams, edits: EditedImageSet, setup: SceneSetup,
          out_dir=None, progress=None) -> TrainResult:
    """Run ``config.iters`` steps from the pretrained field; optionally write checkpoint + manifest."""
    h, w = edits.edits.shape[2:4]
    config.validate(h, w)
    if len(setup.poses) != edits.n_views:
        raise ValueError("one pose per edited view is required")
    state = init_state(original, config)
    enc_inputs = encoder_inputs(state.encoder, edits)
    manifest = {
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "inputs_sha256": inputs_digest(original, edits, setup),
        "weights": "(" + ", ".join(repr(x) for x in config.weights) + ")",
        "config": config.to_text(),
    }
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out / "manifest.txt", manifest)
    records = []
    t0 = time.time()
    for _ in range(config.iters):
        rec = train_step(state, edits, setup, config, enc_inputs)
        records.append(rec)
        if progress is not None:
            progress(rec)
        if config.log_every and rec["iter"] % config.log_every == 0:
            log.info("it=%d total=%.4f kl=%.4f recon=%.4f adg=%.4f add=%.4f contr=%.4f (%.1fs)",
                     rec["iter"], rec["total"], rec["kl"], rec["recon"], rec["adg"], rec["add"],
                     rec["contr"], time.time() - t0)
    if out is not None:
        (out / "losses.csv").write_text(records_to_csv(records), encoding="utf-8")
        manifest["losses"] = "losses.csv"
        # recorded relative to the run directory so the tree can be moved
        manifest.update({f"checkpoint.{k}": Path(v).name for k, v in save_checkpoint(state, out).items()})
        write_manifest(out / "manifest.txt", manifest)
    return TrainResult(state, records, manifest)
