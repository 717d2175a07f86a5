"""Global discrete codebook with soft assignment and Gumbel-Softmax sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from .errors import ParameterError
from .nets import DTYPE

DISTANCES = ("squared_euclidean", "cosine")
COMMITMENT_BETA = 0.25


class Codebook(nn.Module):
    def __init__(self, K: int = 32, d_e: int = 16, distance_kind: str = "squared_euclidean",
                 seed: int = 0, init_scale: float = 1.0, entries=None):
        super().__init__()
        if K < 1 or d_e < 1:
            raise ParameterError("codebook needs K >= 1 and d_e >= 1")
        if distance_kind not in DISTANCES:
            raise ParameterError(f"unknown distance {distance_kind!r}")
        if entries is None:
            g = torch.Generator().manual_seed(int(seed))
            entries = init_scale * torch.randn(K, d_e, generator=g, dtype=DTYPE)
        else:
            entries = torch.as_tensor(np.asarray(entries, dtype=np.float64)).clone()
            if entries.shape != (K, d_e):
                raise ParameterError(f"entries must have shape ({K}, {d_e})")
        self.entries = nn.Parameter(entries)
        self.distance_kind = distance_kind

    @property
    def K(self) -> int:
        return self.entries.shape[0]

    @property
    def d_e(self) -> int:
        return self.entries.shape[1]


@dataclass
class AssignmentDistribution:
    probs: torch.Tensor
    temperature: float = 1.0
    sampled: bool = False
    log_probs: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.log_probs is None:
            p = torch.as_tensor(self.probs, dtype=DTYPE)
            self.probs = p
            self.log_probs = torch.log(p)


def _check_dims(z, cb):
    z = torch.as_tensor(z, dtype=DTYPE)
    if z.dim() != 2 or z.shape[1] != cb.d_e:
        raise ParameterError(f"expected encodings of shape [b, {cb.d_e}], got {tuple(z.shape)}")
    return z


def pairwise_distance(z: torch.Tensor, entries: torch.Tensor, kind: str = "squared_euclidean") -> torch.Tensor:
    if kind == "cosine":
        zn = z / z.norm(dim=1, keepdim=True).clamp_min(1e-12)
        en = entries / entries.norm(dim=1, keepdim=True).clamp_min(1e-12)
        return 1.0 - zn @ en.T
    return ((z[:, None, :] - entries[None, :, :]) ** 2).sum(dim=-1)


def quantize(z, cb: Codebook) -> np.ndarray:
    """Index of the nearest entry per row; ties go to the lowest index."""
    z = _check_dims(z, cb)
    with torch.no_grad():
        d = pairwise_distance(z, cb.entries, cb.distance_kind)
    return np.argmin(d.numpy(), axis=1)


def assignment_from_distances(d: torch.Tensor) -> AssignmentDistribution:
    logp = torch.log_softmax(-d, dim=1)
    return AssignmentDistribution(torch.exp(logp), 1.0, False, logp)


def soft_assign(z, cb: Codebook) -> AssignmentDistribution:
    z = _check_dims(z, cb)
    return assignment_from_distances(pairwise_distance(z, cb.entries, cb.distance_kind))


def assignment_entropy(a: AssignmentDistribution) -> torch.Tensor:
    """Mean row entropy in nats, with 0 log 0 taken as 0."""
    plogp = torch.where(a.probs > 0, a.probs * a.log_probs, torch.zeros_like(a.probs))
    return -plogp.sum(dim=1).mean()


def gumbel_noise(shape, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=DTYPE).clamp_min(1e-300)
    return -torch.log(-torch.log(u))


def gumbel_sample(a: AssignmentDistribution, tau: float, seed: Optional[int] = None,
                  noise: Optional[torch.Tensor] = None,
                  generator: Optional[torch.Generator] = None) -> AssignmentDistribution:
    """Gumbel-Softmax relaxation of the assignment rows.

    Noise comes from `noise` if given, else from `generator`, else from a
    generator seeded with `seed`.
    """
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    if noise is None:
        if generator is None:
            generator = torch.Generator().manual_seed(int(seed or 0))
        noise = gumbel_noise(a.probs.shape, generator)
    logits = (a.log_probs + noise) / tau
    logp = torch.log_softmax(logits, dim=1)
    return AssignmentDistribution(torch.exp(logp), float(tau), True, logp)


def codebook_forward(z, cb: Codebook, tau: float = 1.0, mode: str = "train", seed: Optional[int] = None,
                     noise: Optional[torch.Tensor] = None,
                     generator: Optional[torch.Generator] = None) -> Tuple[torch.Tensor, AssignmentDistribution]:
    """Map encodings onto the codebook.

    Train mode returns the convex combination of entries under the Gumbel-
    sampled assignment. Eval mode returns the most probable entry, passing
    gradients straight through to `z`. The returned distribution is always the
    unsampled soft assignment.
    """
    z = _check_dims(z, cb)
    a = soft_assign(z, cb)
    if mode == "train":
        sampled = gumbel_sample(a, tau, seed=seed, noise=noise, generator=generator)
        return sampled.probs @ cb.entries, a
    if mode != "eval":
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    hard = cb.entries[torch.argmax(a.probs, dim=1)]
    if z.requires_grad:
        hard = z + (hard - z).detach()
    return hard, a


def vq_loss(z: torch.Tensor, quantized: torch.Tensor, beta: float = COMMITMENT_BETA,
            z_sg: Optional[torch.Tensor] = None, q_sg: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Codebook term ||sg(z) - q||^2 plus commitment beta * ||z - sg(q)||^2, batch mean.

    `z_sg` and `q_sg` override the stop-gradient copies (default: detach).
    """
    z_sg = z.detach() if z_sg is None else z_sg
    q_sg = quantized.detach() if q_sg is None else q_sg
    codebook_term = ((z_sg - quantized) ** 2).sum(dim=1).mean()
    commitment = ((z - q_sg) ** 2).sum(dim=1).mean()
    return codebook_term + beta * commitment


def usage_perplexity(probs) -> float:
    """exp of the entropy of the mean assignment over all accumulated rows."""
    p = torch.as_tensor(probs, dtype=DTYPE).detach()
    if p.dim() != 2 or p.shape[0] < 1:
        raise ParameterError("need at least one assignment row")
    mean = p.mean(dim=0)
    nz = mean[mean > 0]
    return float(math.exp(-(nz * torch.log(nz)).sum().item()))


def tau_schedule(progress: float, start: float = 1.0, end: float = 0.5) -> float:
    """Linear anneal from `start` to `end` as progress runs 0 -> 1."""
    p = min(max(progress, 0.0), 1.0)
    return start + (end - start) * p


def elbo_constant(d_e: int, K: int) -> float:
    return d_e * math.log(K)
