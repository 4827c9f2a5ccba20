"""Transmission and dehazing objectives, built from tensor ops so they differentiate."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, DegenerateInputError, DimensionError
from .tensor import Tensor

LOG_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    lambda_a: float = 0.003
    lambda_G: float = 1.0
    lambda_p: float = 1.5
    enable_adv: bool = True
    enable_grad: bool = True
    enable_perc: bool = True
    enable_transmission_branch: bool = True
    # "batch": pixel sums divided by batch size; "sum": raw sums
    normalize: str = "batch"

    def __post_init__(self):
        if min(self.lambda_a, self.lambda_G, self.lambda_p) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.normalize not in ("batch", "sum"):
            raise ConfigError(f"unknown normalization {self.normalize!r}")


PRESETS: dict[str, LossWeights] = {
    "T-L2": LossWeights(enable_adv=False, enable_grad=False, enable_perc=False),
    "T-L2-G": LossWeights(enable_adv=False, enable_grad=True, enable_perc=False),
    "T-L2-G-GAN": LossWeights(enable_adv=True, enable_grad=True, enable_perc=False),
    "I-L2-noT": LossWeights(enable_perc=False, enable_transmission_branch=False),
    "I-L2-T": LossWeights(enable_perc=False),
    "I-L2-Per-T": LossWeights(),
}
TRANSMISSION_PRESETS = ("T-L2", "T-L2-G", "T-L2-G-GAN")
DEHAZING_PRESETS = ("I-L2-noT", "I-L2-T", "I-L2-Per-T")


def preset(name: str, **overrides) -> LossWeights:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return replace(PRESETS[name], **overrides)


# -----------------------------------------------------------------------------
# term operators
# -----------------------------------------------------------------------------
def euclidean_loss(pred: Tensor, target, normalize: str = "batch") -> Tensor:
    """Sum of squared errors over all elements, divided by the batch size."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"euclidean loss shape mismatch {pred.shape} vs {target.shape}")
    total = T.tsum(T.square(T.sub(pred, target)))
    return total / pred.shape[0] if normalize == "batch" else total


def adversarial_g_loss(d_out_on_fake: Tensor) -> Tensor:
    return T.tmean(T.log(d_out_on_fake, LOG_EPS)) * -1.0


def adversarial_d_loss(d_out_real: Tensor, d_out_fake: Tensor) -> Tensor:
    real = T.log(d_out_real, LOG_EPS)
    fake = T.log(T.sub(1.0, d_out_fake), LOG_EPS)
    return T.tmean(T.add(real, fake)) * -1.0


def gradient_ops(img: Tensor) -> tuple[Tensor, Tensor]:
    """Forward differences along width (``Hx``) and height (``Hy``), no padding."""
    if img.shape[-1] < 2 or img.shape[-2] < 2:
        raise DegenerateInputError(f"image gradients need H, W >= 2, got {img.shape[-2:]}")
    hx = T.sub(img[..., :, 1:], img[..., :, :-1])
    hy = T.sub(img[..., 1:, :], img[..., :-1, :])
    return hx, hy


def gradient_loss(pred_t: Tensor, target_t, normalize: str = "batch") -> Tensor:
    target_t = target_t if isinstance(target_t, Tensor) else Tensor(target_t)
    if pred_t.shape != target_t.shape:
        raise DimensionError(f"gradient loss shape mismatch {pred_t.shape} vs {target_t.shape}")
    px, py = gradient_ops(pred_t)
    tx, ty = gradient_ops(target_t)
    return T.add(euclidean_loss(px, tx, normalize), euclidean_loss(py, ty, normalize))


# -----------------------------------------------------------------------------
# fixed feature network
# -----------------------------------------------------------------------------
class FeatureNet:
    """Frozen conv feature extractor standing in for a pretrained classifier.

    Three 3x3 stride-1 conv + ReLU stages (16/32/64 channels) with 2x2
    average pooling between them; the tap is the last ReLU. With
    ``identity=True`` the tap is the input itself.
    """

    channels = (16, 32, 64)

    def __init__(self, seed: int = 1234, identity: bool = False, in_channels: int = 3):
        self.identity = identity
        self.in_channels = in_channels
        self.weights: list[tuple[Tensor, Tensor]] = []
        rng = np.random.default_rng(seed)
        c = in_channels
        for co in self.channels:
            w = rng.normal(0.0, np.sqrt(2.0 / (c * 9)), size=(co, c, 3, 3))
            self.weights.append((Tensor(w), Tensor(np.zeros(co))))
            c = co

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise DimensionError(f"feature net expects {self.in_channels} channels, got {x.shape[1]}")
        if self.identity:
            return x
        for i, (w, b) in enumerate(self.weights):
            if i:
                x = T.avg_pool2d(x, 2)
            x = T.relu(T.conv2d(x, w, b, 1, 1))
        return x


def perceptual_loss(pred_img: Tensor, target_img, feat: FeatureNet) -> Tensor:
    """Squared feature distance at the tap, averaged over feature elements."""
    target_img = target_img if isinstance(target_img, Tensor) else Tensor(target_img)
    fp = feat(pred_img)
    with T.no_grad():
        ft = feat(target_img)
    return euclidean_loss(fp, ft, normalize="sum") / fp.size


# -----------------------------------------------------------------------------
# combined objectives
# -----------------------------------------------------------------------------
def transmission_terms(pred_t: Tensor, target_t, d_out_on_fake: Tensor | None, w: LossWeights) -> dict[str, Tensor]:
    terms = {"e": euclidean_loss(pred_t, target_t, w.normalize)}
    if w.enable_adv:
        if d_out_on_fake is None:
            raise ConfigError("adversarial loss enabled but no discriminator output given")
        terms["a"] = adversarial_g_loss(d_out_on_fake)
    if w.enable_grad:
        terms["g"] = gradient_loss(pred_t, target_t, w.normalize)
    return terms


def combine_transmission(terms: dict[str, Tensor], w: LossWeights) -> Tensor:
    total = terms["e"]
    if "a" in terms:
        total = T.add(total, terms["a"] * w.lambda_a)
    if "g" in terms:
        total = T.add(total, terms["g"] * w.lambda_G)
    return total


def transmission_loss(pred_t: Tensor, target_t, d_out_on_fake: Tensor | None, w: LossWeights) -> Tensor:
    return combine_transmission(transmission_terms(pred_t, target_t, d_out_on_fake, w), w)


def dehazing_terms(pred_J: Tensor, target_J, feat: FeatureNet | None, w: LossWeights) -> dict[str, Tensor]:
    terms = {"e": euclidean_loss(pred_J, target_J, w.normalize)}
    if w.enable_perc:
        if feat is None:
            raise ConfigError("perceptual loss enabled without a feature network")
        terms["p"] = perceptual_loss(pred_J, target_J, feat)
    return terms


def combine_dehazing(terms: dict[str, Tensor], w: LossWeights) -> Tensor:
    total = terms["e"]
    if "p" in terms:
        total = T.add(total, terms["p"] * w.lambda_p)
    return total


def dehazing_loss(pred_J: Tensor, target_J, feat: FeatureNet | None, w: LossWeights) -> Tensor:
    return combine_dehazing(dehazing_terms(pred_J, target_J, feat, w), w)
