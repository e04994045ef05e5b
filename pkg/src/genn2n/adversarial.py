"""Conditional patch discriminator over (image, same-view difference) pairs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .field import flat_params, init_mlp, mlp_forward
from .latent import patch_indices
from .tensor import Tensor

PROB_CLAMP = 1e-6


@dataclass
class DiscriminatorParams:
    layers: list
    patch: int = 16

    def parameters(self) -> list[Tensor]:
        return flat_params(self.layers)

    def frozen(self) -> "DiscriminatorParams":
        """Constant view of the weights: gradients stop at the discriminator."""
        return DiscriminatorParams([[p.detach() for p in layer] for layer in self.layers], self.patch)


def init_discriminator(rng: np.random.Generator, patch: int = 16, hidden: int = 64) -> DiscriminatorParams:
    return DiscriminatorParams(init_mlp(rng, [patch * patch * 6, hidden, hidden // 2, 1]), patch)


class RenderedView(NamedTuple):
    """A rendered image (or crop) of edit ``j`` at view ``i``; ``origin`` is the crop's top-left pixel."""

    i: int
    j: int
    image: Tensor
    origin: tuple[int, int] = (0, 0)


@dataclass
class PairBatch:
    real: Tensor  # (B, h, w, 6)
    fake: Tensor  # (B, h, w, 6)
    index: list = field(default_factory=list)  # (i, j, k) per pair


def build_pairs(edits, renders, rng: np.random.Generator) -> PairBatch:
    """Real (S_i^j, S_i^j - S_i^k) and fake (C_i^j, C_i^j - S_i^k) pairs, k != j drawn uniformly."""
    m = edits.n_edits
    if m < 2:
        raise ValueError("adversarial pairs need M >= 2 edits per view; set the adversarial "
                         "weights to 0 to train without them")
    if not renders:
        raise ValueError("no renders to pair")
    reals, fakes, index = [], [], []
    for r in renders:
        k = int(rng.integers(m - 1))
        k += k >= r.j
        c = T.as_tensor(r.image)
        h, w = c.shape[:2]
        y, x = r.origin
        s_j = edits.edits[r.i, r.j, y:y + h, x:x + w]
        s_k = edits.edits[r.i, k, y:y + h, x:x + w]
        reals.append(np.concatenate([s_j, s_j - s_k], axis=-1))
        fakes.append(T.concat([c, c - s_k]))
        index.append((r.i, r.j, k))
    fake = T.concat([f.reshape(1, h * w * 6) for f in fakes])  # shape (1, B*h*w*6)
    fake = fake.reshape(len(fakes), h, w, 6)
    return PairBatch(Tensor(np.stack(reals)), fake, index)


def discriminate(disc: DiscriminatorParams, pairs: Tensor) -> Tensor:
    """Per-pair probability of being real: sigmoid score per patch, averaged over patches."""
    pairs = T.as_tensor(pairs)
    b, h, w, c = pairs.shape
    p = disc.patch
    if c != 6 or h != w or h % p:
        raise T.ShapeError("discriminate", pairs.shape, (b, p, p, 6))
    flat = pairs.reshape(b, h * w * c)
    idx = patch_indices(h, p, channels=6)  # (n_patches, p*p*6)
    patches = T.slice_(flat, (slice(None), idx))
    logits = mlp_forward(disc.layers, patches, activation="leaky_relu")  # (b, n_patches, 1)
    return T.sigmoid(logits).mean(axis=(1, 2))


def _safe_log(p: Tensor) -> Tensor:
    # affine squash into [c, 1 - c]: same range as a hard clamp, but the gradient
    # never vanishes, so a saturated discriminator can still recover
    return T.log(PROB_CLAMP + (1.0 - 2.0 * PROB_CLAMP) * T.as_tensor(p))


def d_loss(disc: DiscriminatorParams, batch: PairBatch) -> Tensor:
    """E_R[-log D(R)] + E_F[-log(1 - D(F))] with fake renders detached."""
    real = discriminate(disc, batch.real)
    fake = discriminate(disc, batch.fake.detach())
    return -(_safe_log(real).mean() + _safe_log(1.0 - fake).mean())


def g_loss(disc: DiscriminatorParams, fake: Tensor) -> Tensor:
    """E_F[-log D(F)]; the discriminator is frozen so gradients reach only the renders."""
    return -_safe_log(discriminate(disc.frozen(), fake)).mean()


def d_loss_from_probs(p_real, p_fake) -> Tensor:
    return -(_safe_log(T.as_tensor(p_real)).mean() + _safe_log(1.0 - T.as_tensor(p_fake)).mean())


def g_loss_from_probs(p_fake) -> Tensor:
    return -_safe_log(T.as_tensor(p_fake)).mean()
