"""Non-saturating logistic GAN losses and the R1 gradient penalty.

Shared by both stages. Logits go in, scalar losses come out:
 - generator:      softplus(-D(fake))
 - discriminator:  softplus(-D(real)) + softplus(D(fake))
 - R1:             mean over batch of ||grad_x D(x)||^2 at real samples
Each stage decides how R1 is weighted (gamma/2, lazy interval).
"""
from __future__ import annotations
from typing import Callable, Optional

import torch
from torch.nn import functional as F


def generator_loss(fake_logits: torch.Tensor, weight: Optional[torch.Tensor] = None) -> torch.Tensor:
    return _weighted_mean(F.softplus(-fake_logits), weight)


def discriminator_real_loss(real_logits: torch.Tensor) -> torch.Tensor:
    return F.softplus(-real_logits).mean()


def discriminator_fake_loss(fake_logits: torch.Tensor, weight: Optional[torch.Tensor] = None) -> torch.Tensor:
    return _weighted_mean(F.softplus(fake_logits), weight)


def r1_penalty(discriminator: Callable[[torch.Tensor], torch.Tensor], reals: torch.Tensor,
               create_graph: bool = True) -> torch.Tensor:
    """Mean over the batch of the squared gradient norm of D at real samples."""
    reals = reals.detach().requires_grad_(True)
    logits = discriminator(reals)
    grad, = torch.autograd.grad(outputs=logits.sum(), inputs=reals, create_graph=create_graph)
    return grad.pow(2).reshape(grad.shape[0], -1).sum(dim=1).mean()


def _weighted_mean(values: torch.Tensor, weight: Optional[torch.Tensor]) -> torch.Tensor:
    if weight is None:
        return values.mean()
    weight = weight.to(values.dtype)
    return (values * weight).sum() / weight.sum().clamp(min=1.0)
