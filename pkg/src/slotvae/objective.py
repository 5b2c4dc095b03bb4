"""Training objective: Gaussian reconstruction NLL of the mixture mean plus
three KL terms (hierarchical slot KL, beta-weighted global KL, auxiliary
standard-normal slot KL). Everything is minimized.

Reduction: sum over pixels/latent coordinates, mean over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .model import DecodedScene, DiagGaussian, ForwardOutput

SIGMA_X = 0.1


@dataclass
class LossBreakdown:
    recon_nll: torch.Tensor
    kl_slots_hier: torch.Tensor
    kl_global: torch.Tensor
    kl_slots_aux: torch.Tensor
    total: torch.Tensor
    beta: float
    sigma_x: float

    def as_floats(self) -> dict[str, float]:
        return {
            "recon_nll": self.recon_nll.item(),
            "kl_slots_hier": self.kl_slots_hier.item(),
            "kl_global": self.kl_global.item(),
            "kl_slots_aux": self.kl_slots_aux.item(),
            "total": self.total.item(),
            "beta": self.beta,
            "sigma_x": self.sigma_x,
        }


def recon_nll(x: torch.Tensor, scene: DecodedScene, sigma_x: float = SIGMA_X) -> torch.Tensor:
    """-log N(x; composed, sigma_x^2) summed over pixels and channels, batch-averaged."""
    if sigma_x <= 0:
        raise ValueError("sigma_x must be positive")
    composed = scene.composed if isinstance(scene, DecodedScene) else scene
    if composed.shape != x.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(composed.shape)}")
    r = (x - composed) / sigma_x
    nll = 0.5 * r * r + math.log(sigma_x) + 0.5 * math.log(2 * math.pi)
    return nll.flatten(1).sum(1).mean()


def kl_diag_gaussians(q: DiagGaussian, p: DiagGaussian, batched: bool = True) -> torch.Tensor:
    """Closed-form KL(q || p), summed over latent coordinates.

    With ``batched`` the leading axis is a batch and the result is its mean;
    otherwise everything is summed. Slot k of ``q`` is matched with slot k
    of ``p``.
    """
    if q.mean.shape != p.mean.shape:
        raise ValueError(f"shape mismatch: {tuple(q.mean.shape)} vs {tuple(p.mean.shape)}")
    var_ratio = (q.std / p.std) ** 2
    diff = (q.mean - p.mean) / p.std
    kl = 0.5 * (var_ratio + diff * diff - 1.0 - torch.log(var_ratio))
    if batched and kl.dim() > 1:
        return kl.flatten(1).sum(1).mean()
    return kl.sum()


def total_loss(
    x: torch.Tensor,
    out: ForwardOutput,
    beta: float = 0.1,
    sigma_x: float = SIGMA_X,
    hier_weight: float = 1.0,
    aux_weight: float = 1.0,
    recon_weight: float = 1.0,
) -> LossBreakdown:
    nll = recon_nll(x, out.scene, sigma_x)
    kl_hier = kl_diag_gaussians(out.q_slots, out.p_slots)
    q_g = out.q_global
    kl_g = kl_diag_gaussians(q_g, DiagGaussian.standard(q_g.mean.shape, q_g.mean))
    q_s = out.q_slots
    kl_aux = kl_diag_gaussians(q_s, DiagGaussian.standard(q_s.mean.shape, q_s.mean))
    total = recon_weight * nll + hier_weight * kl_hier + beta * kl_g + aux_weight * kl_aux
    return LossBreakdown(nll, kl_hier, kl_g, kl_aux, total, beta, sigma_x)
