"""Generator and discriminator objectives.

The generator objective is ``alpha*mse + beta*adv + gamma*vgg + omega*rate``
with least-squares adversarial terms; rate is in bits per pixel.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch

from .entropy import LatentCode


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value):
        super().__init__(f"non-finite loss term {term!r}: {value}")
        self.term = term


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 0.04
    omega: float = 1.0 / 256

    def __post_init__(self):
        for name, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {v}")


@dataclass
class LossBreakdown:
    mse: float = 0.0
    adv: float = 0.0
    vgg: float = 0.0
    rate: float = 0.0
    total: float = 0.0
    d_loss: Optional[float] = None

    CSV_FIELDS = ("mse", "adv", "vgg", "rate_bpp", "total", "d_loss")

    def csv_values(self) -> list:
        d = "" if self.d_loss is None else f"{self.d_loss:.9g}"
        return [f"{self.mse:.9g}", f"{self.adv:.9g}", f"{self.vgg:.9g}",
                f"{self.rate:.9g}", f"{self.total:.9g}", d]


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def mse_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    _same_shape(x, x_hat)
    return torch.mean((x - x_hat) ** 2)


def adversarial_loss(d_fake: torch.Tensor) -> torch.Tensor:
    return torch.mean((d_fake - 1.0) ** 2)


def vgg_loss(x: torch.Tensor, x_hat: torch.Tensor, extractor) -> torch.Tensor:
    """Mean absolute feature difference (L1 divided by element count)."""
    _same_shape(x, x_hat)
    return torch.mean(torch.abs(extractor(x) - extractor(x_hat)))


def rate_loss(residual: Optional[LatentCode], mv: Optional[LatentCode], pixel_count: int) -> torch.Tensor:
    """Bits per pixel of both latents under their entropy models.

    Either code may be ``None`` while its branch is not yet trained.
    """
    if pixel_count <= 0:
        raise ValueError("pixel_count must be positive")
    bits = None
    for code in (residual, mv):
        if code is None:
            continue
        if torch.any(code.likelihoods <= 0):
            raise ValueError(f"nonpositive likelihood in {code.role} latent")
        b = -torch.log2(code.likelihoods).sum()
        bits = b if bits is None else bits + b
    if bits is None:
        return torch.zeros(())
    return bits / pixel_count


def discriminator_loss(d_fake: torch.Tensor, d_real: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.mean(d_fake ** 2) + 0.5 * torch.mean((d_real - 1.0) ** 2)


def _check_finite(name: str, value) -> None:
    v = value.detach() if torch.is_tensor(value) else torch.tensor(float(value))
    if not torch.all(torch.isfinite(v)):
        raise NonFiniteLossError(name, v)


def generator_loss(mse, adv, vgg, rate, w: LossWeights):
    """Weighted sum of the four terms; returns ``(total, LossBreakdown)``.

    Terms may be tensors (kept differentiable in ``total``) or plain floats.
    A term whose weight is zero is left out of ``total`` entirely so that no
    gradient flows through its branch.
    """
    parts = {"mse": mse, "adv": adv, "vgg": vgg, "rate": rate}
    weights = {"mse": w.alpha, "adv": w.beta, "vgg": w.gamma, "rate": w.omega}
    for name, value in parts.items():
        _check_finite(name, value)
    total = 0.0
    for name, value in parts.items():
        if weights[name] != 0:
            total = total + weights[name] * value
    _check_finite("total", total)

    def as_float(v):
        return float(v.detach()) if torch.is_tensor(v) else float(v)

    breakdown = LossBreakdown(mse=as_float(mse), adv=as_float(adv), vgg=as_float(vgg),
                              rate=as_float(rate), total=as_float(total))
    return total, breakdown


def recompose(b: LossBreakdown, w: LossWeights) -> float:
    return w.alpha * b.mse + w.beta * b.adv + w.gamma * b.vgg + w.omega * b.rate


def is_finite_number(x) -> bool:
    return x is not None and math.isfinite(x)
