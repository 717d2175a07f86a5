"""Conditional adversarial alignment: multilinear conditioning and gradient reversal."""

from __future__ import annotations

import math

import torch

from .errors import ParameterError
from .nets import DTYPE

CLIP = 1e-7


def multilinear_condition(f, probs) -> torch.Tensor:
    """Row-wise flattened outer product f[i] (x) probs[i], shape [b, d_f * C]."""
    f = torch.as_tensor(f, dtype=DTYPE)
    probs = torch.as_tensor(probs, dtype=DTYPE)
    if f.dim() != 2 or probs.dim() != 2 or f.shape[0] != probs.shape[0]:
        raise ParameterError("features and probabilities must be matrices with equal row counts")
    return torch.einsum("bi,bj->bij", f, probs).reshape(f.shape[0], -1)


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, coeff):
        ctx.coeff = coeff
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.coeff * grad_output, None


def grl(x: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    """Identity going forward; multiplies the incoming gradient by -lam going back."""
    if lam < 0:
        raise ParameterError("reversal coefficient must be >= 0")
    return _GradReverse.apply(x, float(lam))


def grl_coefficient(progress: float, gamma: float = 10.0) -> float:
    """2 / (1 + exp(-gamma p)) - 1, rising from 0 to ~1 over training."""
    return 2.0 / (1.0 + math.exp(-gamma * progress)) - 1.0


def domain_bce(d_source, d_target) -> torch.Tensor:
    """Mean binary cross-entropy with source labelled 1 and target labelled 0."""
    parts = []
    if d_source is not None and d_source.numel():
        parts.append(-torch.log(d_source.reshape(-1).clamp(CLIP, 1 - CLIP)))
    if d_target is not None and d_target.numel():
        parts.append(-torch.log1p(-d_target.reshape(-1).clamp(CLIP, 1 - CLIP)))
    if not parts:
        return torch.zeros((), dtype=DTYPE)
    return torch.cat(parts).mean()


def adversarial_loss(h_source, h_target, discriminator, lam: float = 1.0, generator=None) -> torch.Tensor:
    """Discriminator BCE on conditioned features passed through gradient reversal.

    `discriminator` is any callable mapping [b, d_h] to sigmoid outputs.
    """
    h = [t for t in (h_source, h_target) if t is not None and t.shape[0]]
    if not h:
        return torch.zeros((), dtype=DTYPE)
    out = discriminator(grl(torch.cat(h), lam)) if generator is None else \
        discriminator(grl(torch.cat(h), lam), generator=generator)
    n_s = 0 if h_source is None else h_source.shape[0]
    return domain_bce(out[:n_s], out[n_s:])
