"""
Negative variational lower bound: masked Bernoulli reconstruction error plus
lambda-weighted KL terms against N(0, I) and the uniform categorical prior.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict

import torch
import torch.nn.functional as F

from ..errors import NonFiniteError, ShapeError, UserError
from .model import GaussianPosterior

logger = logging.getLogger(__name__)


class LossError(UserError):
    """Inputs violate a loss precondition."""
    pass


class EmptyMaskError(LossError):
    """Every frame of the batch is masked out."""
    pass


@dataclass
class LossBreakdown:
    """Batch-averaged terms; total = recon + lam * (kl_gauss + kl_cat)."""
    recon: torch.Tensor
    kl_gauss: torch.Tensor
    kl_cat: torch.Tensor
    lam: float
    total: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        return {
            "recon": float(self.recon.detach()),
            "kl_gauss": float(self.kl_gauss.detach()),
            "kl_cat": float(self.kl_cat.detach()),
            "lambda": float(self.lam),
            "total": float(self.total.detach()),
        }


def reconstruction_error(x: torch.Tensor, x_hat: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """
    Elementwise binary cross-entropy averaged over valid frames x frequency bins.

    Args:
        x: (batch, T, F) or (T, F) targets in [0, 1]
        x_hat: Reconstruction of the same shape, entries in (0, 1)
        mask: (batch, T) or (T,) frame validity, 1 = valid

    Raises:
        EmptyMaskError: "empty mask" when no frame is valid
        NonFiniteError: If the reconstruction holds NaN or infinite values
    """
    if x.shape != x_hat.shape:
        raise ShapeError(f"reconstruction shape {tuple(x_hat.shape)} does not match input {tuple(x.shape)}")
    if x.dim() == 2:
        x, x_hat, mask = x.unsqueeze(0), x_hat.unsqueeze(0), mask.reshape(1, -1)
    if mask.shape != x.shape[:2]:
        raise ShapeError(f"mask shape {tuple(mask.shape)} does not match frames {tuple(x.shape[:2])}")

    if not torch.isfinite(x_hat).all():
        raise NonFiniteError("reconstruction holds NaN or infinite values")

    valid = mask.to(x_hat.dtype)
    n_valid = valid.sum()
    if n_valid <= 0:
        raise EmptyMaskError("empty mask")

    elementwise = F.binary_cross_entropy(x_hat, x.to(x_hat.dtype), reduction="none")
    return (elementwise * valid.unsqueeze(-1)).sum() / (n_valid * x.shape[-1])


def kl_gaussian(post: GaussianPosterior) -> torch.Tensor:
    """Closed-form KL(N(mu, diag(exp(log_var))) || N(0, I)) per item (summed over d_z)."""
    return 0.5 * (torch.exp(post.log_var) + post.mu.pow(2) - 1.0 - post.log_var).sum(dim=-1)


def kl_categorical(probs: torch.Tensor) -> torch.Tensor:
    """
    KL(pi || uniform over K) = sum_k pi_k (log pi_k - log(1/K)) per item, 0 log 0 := 0.

    Raises:
        LossError: If any probability is negative
    """
    if (probs < 0).any():
        raise LossError("probabilities must be nonnegative")
    tiny = torch.finfo(probs.dtype).tiny
    plogp = torch.where(probs > 0, probs * torch.log(probs.clamp_min(tiny)), torch.zeros_like(probs))
    return plogp.sum(dim=-1) + math.log(probs.shape[-1]) * probs.sum(dim=-1)


def total_loss(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    post: GaussianPosterior,
    probs: torch.Tensor,
    mask: torch.Tensor,
    lam: float,
) -> LossBreakdown:
    """Minimization objective: recon + lam * (KL_gauss + KL_cat), KL terms averaged over the batch."""
    if lam < 0:
        raise LossError(f"lambda must be nonnegative, got {lam}")

    recon = reconstruction_error(x, x_hat, mask)
    kl_g = kl_gaussian(post).mean()
    kl_c = kl_categorical(probs).mean()
    total = recon + lam * (kl_g + kl_c)
    return LossBreakdown(recon=recon, kl_gauss=kl_g, kl_cat=kl_c, lam=float(lam), total=total)
