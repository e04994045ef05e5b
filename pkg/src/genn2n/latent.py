"""Edit-code extraction: image -> (mean, log-variance) -> reparameterized code.

The encoder box-filters images to a small working resolution, embeds
non-overlapping patches with a shared linear map, and feeds the
concatenated patch features to a three-layer MLP.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .field import flat_params, init_linear, init_mlp, mlp_forward
from .tensor import Tensor
from .translator import downscale

LOG_VAR_RANGE = (-10.0, 10.0)


@dataclass
class EncoderParams:
    patch_embed: list  # [W (patch_dim, embed), b (embed,)]
    mlp: list
    code_dim: int = 8
    resolution: int = 16
    patch: int = 4

    @property
    def n_patches(self) -> int:
        return (self.resolution // self.patch) ** 2

    def parameters(self, freeze_embed: bool = False) -> list[Tensor]:
        head = flat_params(self.mlp)
        return head if freeze_embed else list(self.patch_embed) + head


@dataclass
class EditCode:
    mean: Tensor  # (B, d)
    log_var: Tensor  # (B, d)
    sample: Tensor  # (B, d)
    eta: np.ndarray | None = None

    @property
    def d(self) -> int:
        return self.mean.shape[-1]

    def __len__(self) -> int:
        return self.mean.shape[0]


def init_encoder(rng: np.random.Generator, code_dim: int = 8, resolution: int = 16, patch: int = 4,
                 embed: int = 16, hidden: int = 64) -> EncoderParams:
    if resolution % patch:
        raise ValueError("encoder resolution must be a multiple of the patch size")
    n_patches = (resolution // patch) ** 2
    embed_layer = init_linear(rng, patch * patch * 3, embed)
    mlp = init_mlp(rng, [n_patches * embed, hidden, hidden, 2 * code_dim])
    return EncoderParams(embed_layer, mlp, code_dim, resolution, patch)


_patch_index_cache: dict[tuple[int, int], np.ndarray] = {}


def patch_indices(resolution: int, patch: int, channels: int = 3) -> np.ndarray:
    """Flat indices gathering an (r, r, c) image into (n_patches, patch*patch*c) rows."""
    key = (resolution, patch, channels)
    if key not in _patch_index_cache:
        flat = np.arange(resolution * resolution * channels).reshape(resolution, resolution, channels)
        g = resolution // patch
        rows = flat.reshape(g, patch, g, patch, channels).transpose(0, 2, 1, 3, 4)
        _patch_index_cache[key] = rows.reshape(g * g, patch * patch * channels)
    return _patch_index_cache[key]


def prepare_images(enc: EncoderParams, imgs) -> np.ndarray:
    """Box-filter a batch of arrays to the encoder resolution."""
    imgs = np.asarray(imgs, dtype=np.float64)
    if imgs.ndim == 3:
        imgs = imgs[None]
    h, w = imgs.shape[1:3]
    if h != w or h % enc.resolution:
        raise T.ShapeError("encode", imgs.shape, (enc.resolution, enc.resolution, 3))
    f = h // enc.resolution
    return imgs if f == 1 else np.stack([downscale(im, f) for im in imgs])


def encode(enc: EncoderParams, imgs, rng: np.random.Generator | None = None) -> EditCode:
    """Map images to edit codes.

    ``imgs`` is an array (any multiple of the encoder resolution, box-filtered
    down) or a Tensor already at the encoder resolution, shaped (B, r, r, 3)
    or (r, r, 3).  With ``rng=None`` the code is its mean (eval mode).
    """
    if isinstance(imgs, Tensor):
        x = imgs if imgs.ndim == 4 else imgs.reshape(1, *imgs.shape)
        if x.shape[1:] != (enc.resolution, enc.resolution, 3):
            raise T.ShapeError("encode", x.shape, (enc.resolution, enc.resolution, 3))
    else:
        x = Tensor(prepare_images(enc, imgs))
    b = x.shape[0]
    flat = x.reshape(b, -1)
    patches = T.slice_(flat, (slice(None), patch_indices(enc.resolution, enc.patch)))
    w, bias = enc.patch_embed
    # leaky units: with plain relu the KL pull can silence every unit, and a
    # dead encoder never recovers (all edits then share one code)
    feats = T.dense(patches, w, bias, "leaky_relu").reshape(b, -1)
    out = mlp_forward(enc.mlp, feats, activation="leaky_relu")
    d = enc.code_dim
    mean = out[:, :d]
    log_var = T.clip(out[:, d:], *LOG_VAR_RANGE)
    if rng is None:
        return EditCode(mean, log_var, mean)
    eta = rng.standard_normal(mean.shape)
    sample = mean + T.exp(0.5 * log_var) * Tensor(eta)
    return EditCode(mean, log_var, sample, eta)


def kl_loss(codes) -> Tensor:
    """Batch mean of KL(N(mean, exp(log_var)) || N(0, I)) in closed form."""
    if isinstance(codes, EditCode):
        codes = [codes]
    means = [c.mean for c in codes]
    log_vars = [c.log_var for c in codes]
    n = sum(m.shape[0] for m in means)
    if n == 0:
        raise ValueError("kl_loss needs at least one code")
    total = None
    for m, lv in zip(means, log_vars):
        # expm1(v) - v rounds to >= 0, so the sum can never dip below zero
        term = (T.square(m) + (T.expm1(lv) - lv)).sum()
        total = term if total is None else total + term
    return total * (0.5 / n)


def contrastive_loss(anchor, attract, repel, margin: float = 1.0) -> Tensor:
    """Pull ``attract`` codes onto the anchor; hinge ``repel`` codes beyond squared distance ``margin``.

    anchor: (d,) or (1, d); attract: (A, d); repel: (K, d).  Either set may be empty (None).
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    anchor = T.as_tensor(anchor)
    anchor = anchor.reshape(anchor.size)
    has_att = attract is not None and T.as_tensor(attract).shape[0] > 0
    has_rep = repel is not None and T.as_tensor(repel).shape[0] > 0
    if not has_att and not has_rep:
        raise ValueError("contrastive loss needs attract or repel codes")
    loss = Tensor(0.0)
    if has_att:
        loss = loss + T.square(T.as_tensor(attract) - anchor).sum()
    if has_rep:
        d2 = T.square(T.as_tensor(repel) - anchor).sum(axis=-1)
        loss = loss + T.relu(margin - d2).sum()
    return loss
