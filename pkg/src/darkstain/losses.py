"""Training objectives for the distilled staining generator.

The student minimizes a hybrid of three terms:
  adv   adversarial realism from a global critic on full images and a local
        critic on random crops,
  kd    mean L1 between student and teacher colorizations of the same
        enhanced input,
  con   mean L1 between the enhanced input and the luma of the student
        output, anchoring cell positions,
combined as  total = adv + lambda1 * kd + lambda2 * con.

The global critic uses the relativistic-average least-squares form: scores
are compared against the mean score of the opposite batch before the squared
targets are applied. The local critic uses plain least squares with targets
1 (real) and 0 (fake). A plain least-squares global form is available behind
``gan_global="lsgan"``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import NumericalError
from .imaging import LUMA_B, LUMA_G, LUMA_R
from .networks import DiscriminatorPair, ConvEmbedder

GAN_GLOBAL_MODES = ("relativistic-lsgan", "lsgan")


@dataclass
class LossWeights:
    lambda1: float = 10.0
    lambda2: float = 10.0

    def __post_init__(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    adv: float
    kd: float
    con: float
    total: float
    con_perceptual: float | None = None


def luma_t(img: torch.Tensor) -> torch.Tensor:
    """Rec.601 luma of an (N, 3, H, W) tensor, differentiable."""
    if img.dim() != 4 or img.shape[1] != 3:
        raise ValueError(f"expected (N, 3, H, W), got {tuple(img.shape)}")
    r, g, b = img[:, 0:1], img[:, 1:2], img[:, 2:3]
    return LUMA_R * r + LUMA_G * g + LUMA_B * b


def kd_loss(y: torch.Tensor, y_t: torch.Tensor) -> torch.Tensor:
    """Distillation term: mean absolute difference between the student output
    and the (frozen) teacher output."""
    if y.shape != y_t.shape:
        raise ValueError(f"shape mismatch: {tuple(y.shape)} vs {tuple(y_t.shape)}")
    return (y - y_t).abs().mean()


def content_loss(z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Content consistency: mean absolute difference between the enhanced
    grayscale input and the luma of the colorized output."""
    if z.dim() != 4 or z.shape[1] != 1:
        raise ValueError(f"expected z of shape (N, 1, H, W), got {tuple(z.shape)}")
    y_gray = luma_t(y)
    if y_gray.shape != z.shape:
        raise ValueError(f"spatial mismatch: {tuple(z.shape)} vs {tuple(y.shape)}")
    return (z - y_gray).abs().mean()


def perceptual_content_loss(embedder: ConvEmbedder, z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Deep-feature variant of the content term: mean absolute difference
    between embedder features of z and of the output's luma. Grayscale maps
    are replicated to three channels before embedding."""
    y_gray = luma_t(y)
    fz = embedder(z.repeat(1, 3, 1, 1))
    fy = embedder(y_gray.repeat(1, 3, 1, 1))
    return (fz - fy).abs().mean()


def _lsq(x: torch.Tensor, target: float) -> torch.Tensor:
    return ((x - target) ** 2).mean()


def adv_losses(
    d: DiscriminatorPair,
    real: torch.Tensor,
    fake: torch.Tensor,
    crop_seed: int,
    gan_global: str = "relativistic-lsgan",
) -> tuple[torch.Tensor, torch.Tensor]:
    """Generator-side and critic-side adversarial objectives.

    Returns (g_adv, d_adv). The critic-side term detaches the fake batch;
    the generator-side term keeps its graph. Local crops are drawn from a
    generator seeded with ``crop_seed``, so a repeated call reproduces the
    same crops.

    With every critic score identically zero the closed forms are:
      relativistic global: g = 0.5, d = 0.5;  plain global: g = 1.0, d = 0.5
      local:               g = 1.0, d = 0.5
    """
    if gan_global not in GAN_GLOBAL_MODES:
        raise ValueError(f"unknown gan_global {gan_global!r}")
    if real.shape[0] == 0 or fake.shape[0] == 0:
        raise ValueError("empty batch")

    gen = torch.Generator().manual_seed(crop_seed)
    real_crops = d.sample_crops(real, gen)
    fake_crops = d.sample_crops(fake, gen)

    # critic side (fake detached)
    dr = d.global_d(real)
    df_det = d.global_d(fake.detach())
    if gan_global == "relativistic-lsgan":
        d_global = 0.5 * (_lsq(dr - df_det.mean(), 1.0) + _lsq(df_det - dr.mean(), 0.0))
    else:
        d_global = 0.5 * (_lsq(dr, 1.0) + _lsq(df_det, 0.0))
    lr_ = d.local_d(real_crops)
    lf_det = d.local_d(fake_crops.detach())
    d_local = 0.5 * (_lsq(lr_, 1.0) + _lsq(lf_det, 0.0))
    d_adv = d_global + d_local

    # generator side (graph through fake)
    df = d.global_d(fake)
    if gan_global == "relativistic-lsgan":
        g_global = 0.5 * (_lsq(df - dr.detach().mean(), 1.0) + _lsq(dr.detach() - df.mean(), 0.0))
    else:
        g_global = _lsq(df, 1.0)
    lf = d.local_d(fake_crops)
    g_local = _lsq(lf, 1.0)
    g_adv = g_global + g_local

    if not (torch.isfinite(g_adv) and torch.isfinite(d_adv)):
        raise NumericalError("adversarial loss is non-finite")
    return g_adv, d_adv


def total_loss(adv, kd, con, w: LossWeights):
    """Hybrid objective: adv + lambda1 * kd + lambda2 * con.

    Terms with a zero weight are excluded from the sum entirely, so they
    contribute no gradient. Accepts floats or scalar tensors."""
    for name, v in (("adv", adv), ("kd", kd), ("con", con)):
        x = float(v.detach()) if torch.is_tensor(v) else float(v)
        if x != x or x in (float("inf"), float("-inf")):
            raise NumericalError(f"non-finite {name} loss: {x}")
    total = adv
    if w.lambda1 > 0:
        total = total + w.lambda1 * kd
    if w.lambda2 > 0:
        total = total + w.lambda2 * con
    return total
