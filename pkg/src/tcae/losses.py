"""Reconstruction terms (pixel l1, random-feature perceptual distance, hinge
adversarial pair) and the weighted joint objective."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, Module
from .rng import Stream
from .tensor import Tensor


def pixel_l1(x: Tensor, x_hat: Tensor) -> Tensor:
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    return T.mean(T.absolute(x_hat - x))


class PerceptualNet(Module):
    """Frozen random conv features standing in for a pretrained perceptual network.

    Four stride-2 stages (16/32/64/128 channels, ReLU). Feature maps are
    normalized to unit length along channels before comparison.
    """

    CHANNELS = (16, 32, 64, 128)

    def __init__(self, seed: int = 1234):
        self.seed = seed
        rng = Stream(seed, ("perceptual",))
        chans = (3,) + self.CHANNELS
        self.convs = [Conv2d(chans[i], chans[i + 1], 3, rng.split(str(i)), stride=2, padding=1)
                      for i in range(4)]
        for p in self.parameters():
            p.requires_grad = False

    def features(self, x: Tensor) -> list[Tensor]:
        out = []
        for c in self.convs:
            x = T.relu(c(x))
            out.append(T.l2_normalize(x, axis=1, eps=1e-10))
        return out

    def parameters_frozen(self) -> bool:
        return all(not p.requires_grad for p in self.parameters())


def perceptual(x: Tensor, x_hat: Tensor, net: PerceptualNet) -> Tensor:
    """Sum over stages of the mean squared difference of unit-normalized features."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    with T.no_grad():
        fx = net.features(x.detach())
    total = None
    for a, b in zip(fx, net.features(x_hat)):
        d = T.mean((b - a) ** 2)
        total = d if total is None else total + d
    return total


class PatchDiscriminator(Module):
    """Four conv layers with leaky ReLU -> one real/fake logit per patch."""

    def __init__(self, seed: int = 0, width: int = 32):
        rng = Stream(seed, ("discriminator",))
        self.c1 = Conv2d(3, width, 4, rng.split("c1"), stride=2, padding=1)
        self.c2 = Conv2d(width, 2 * width, 4, rng.split("c2"), stride=2, padding=1)
        self.c3 = Conv2d(2 * width, 4 * width, 3, rng.split("c3"), stride=1, padding=1)
        self.c4 = Conv2d(4 * width, 1, 3, rng.split("c4"), stride=1, padding=1)

    def __call__(self, x: Tensor) -> Tensor:
        x = T.leaky_relu(self.c1(x), 0.2)
        x = T.leaky_relu(self.c2(x), 0.2)
        x = T.leaky_relu(self.c3(x), 0.2)
        return self.c4(x)


def hinge_d_loss(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    return T.mean(T.relu(1.0 - real_logits)) + T.mean(T.relu(1.0 + fake_logits))


def hinge_g_loss(fake_logits: Tensor) -> Tensor:
    return -T.mean(fake_logits)


def adversarial_pair(x: Tensor, x_hat: Tensor, disc) -> tuple[Tensor, Tensor]:
    """(generator loss, discriminator loss). ``x_hat`` is detached for the latter.

    The two losses own separate graphs, so each can be passed to ``backward``.
    """
    gen = hinge_g_loss(disc(x_hat))
    d_loss = hinge_d_loss(disc(x.detach()), disc(x_hat.detach()))
    return gen, d_loss


@dataclass
class LossWeights:
    alpha: float = 0.1
    lambda_p: float = 1.0
    lambda_g: float = 0.0
    disc_start_epoch: int = 0
    adv_start_epoch: int = 0

    def __post_init__(self):
        for k in ("alpha", "lambda_p", "lambda_g"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be nonnegative")
        if self.disc_start_epoch < 0 or self.adv_start_epoch < 0:
            raise ValueError("start epochs must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


# joint training and decoder-finetune weights; in the finetune phase
# alpha 1 means SSL branch off with reconstruction weight 1
JOINT_WEIGHTS = LossWeights(alpha=0.1, lambda_p=1.0, lambda_g=0.0)
FINETUNE_WEIGHTS = LossWeights(alpha=1.0, lambda_p=1.0, lambda_g=0.75,
                               disc_start_epoch=6, adv_start_epoch=8)


def total_loss(rec_terms: dict, ibot_loss, weights: LossWeights):
    """alpha * (pix + lambda_p * perceptual + lambda_g * gen) + ibot.

    ``rec_terms`` maps "pix", "perceptual", "gen" to scalars or Tensors; missing
    terms count as zero. Works on floats and Tensors alike.
    """
    for k in ("alpha", "lambda_p", "lambda_g"):
        if getattr(weights, k) < 0:
            raise ValueError(f"{k} must be nonnegative")
    rec = rec_terms.get("pix", 0.0)
    if "perceptual" in rec_terms and weights.lambda_p:
        rec = rec + weights.lambda_p * rec_terms["perceptual"]
    if "gen" in rec_terms and weights.lambda_g:
        rec = rec + weights.lambda_g * rec_terms["gen"]
    out = weights.alpha * rec if weights.alpha else 0.0
    if ibot_loss is not None:
        out = ibot_loss + out if isinstance(ibot_loss, Tensor) else out + ibot_loss
    return out


def param_hash(module: Module) -> str:
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
