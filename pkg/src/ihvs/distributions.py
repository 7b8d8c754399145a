"""Diagonal Gaussians and the closed-form terms used by the ELBO."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class DiagonalGaussian:
    mean: torch.Tensor
    log_std: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_std.shape:
            raise ValueError(f"mean {tuple(self.mean.shape)} and log_std "
                             f"{tuple(self.log_std.shape)} differ in shape")

    @property
    def std(self) -> torch.Tensor:
        return self.log_std.exp()

    @classmethod
    def isotropic(cls, mean: torch.Tensor, std: float) -> "DiagonalGaussian":
        return cls(mean, torch.full_like(mean, math.log(std)))

    def detach(self) -> "DiagonalGaussian":
        return DiagonalGaussian(self.mean.detach(), self.log_std.detach())


def sample(g: DiagonalGaussian, rng: torch.Generator | None = None,
           noise: torch.Tensor | None = None) -> torch.Tensor:
    """Reparameterised draw ``mean + std * eps``; pass ``noise`` to fix ``eps``."""
    if noise is None:
        noise = torch.randn(g.mean.shape, generator=rng, dtype=g.mean.dtype, device=g.mean.device)
    return g.mean + g.std * noise


def kl_diag_gaussian_per_dim(q: DiagonalGaussian, p: DiagonalGaussian) -> torch.Tensor:
    var_q = torch.exp(2 * q.log_std)
    var_p = torch.exp(2 * p.log_std)
    return (p.log_std - q.log_std) + (var_q + (q.mean - p.mean) ** 2) / (2 * var_p) - 0.5


def kl_diag_gaussian(q: DiagonalGaussian, p: DiagonalGaussian) -> torch.Tensor:
    """KL(q || p) summed over the last axis."""
    return kl_diag_gaussian_per_dim(q, p).sum(-1)


def gaussian_image_loglik(image: torch.Tensor, mean_image: torch.Tensor, std: float) -> torch.Tensor:
    """Sum of per-pixel log N(pixel | mean, std^2) over the trailing (C, H, W) axes."""
    if image.shape != mean_image.shape:
        raise ValueError(f"image {tuple(image.shape)} vs mean {tuple(mean_image.shape)}")
    n_pix = image.shape[-1] * image.shape[-2] * image.shape[-3]
    sq = ((image - mean_image) ** 2).flatten(-3).sum(-1)
    return -0.5 * sq / std ** 2 - n_pix * (math.log(std) + 0.5 * math.log(2 * math.pi))


def gaussian_image_nll_per_pixel(image: torch.Tensor, mean_image: torch.Tensor, std: float) -> torch.Tensor:
    """Per-value -log N(pixel | mean, std^2), flattened over (C, H, W)."""
    if image.shape != mean_image.shape:
        raise ValueError(f"image {tuple(image.shape)} vs mean {tuple(mean_image.shape)}")
    const = math.log(std) + 0.5 * math.log(2 * math.pi)
    return (0.5 * ((image - mean_image) / std) ** 2 + const).flatten(-3)


def gaussian_nll_constant(n_pix: int, std: float) -> float:
    """-log-likelihood of a perfect reconstruction of ``n_pix`` values."""
    return n_pix * (math.log(std) + 0.5 * math.log(2 * math.pi))
