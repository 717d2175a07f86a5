"""Entropy-filtered pseudo-labels and generative augmentation of confident target features."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np
import torch

from .codebook import Codebook, codebook_forward
from .errors import ParameterError
from .nets import DTYPE

PERTURBED, REGENERATED = "perturbed", "regenerated"


@dataclass
class PseudoLabelSet:
    indices: np.ndarray
    labels: np.ndarray
    entropies: np.ndarray
    accepted: np.ndarray

    @property
    def accepted_fraction(self) -> float:
        return float(self.accepted.mean()) if self.accepted.size else 0.0

    def sentinel_labels(self, n: Optional[int] = None) -> np.ndarray:
        """Full-length label vector with -1 for every rejected (or unlisted) row."""
        n = int(self.indices.max()) + 1 if n is None else n
        out = np.full(n, -1, dtype=np.int64)
        keep = self.indices[self.accepted]
        out[keep] = self.labels[self.accepted]
        return out

    def entropy_histogram(self, C: int, bins: int = 10):
        return np.histogram(self.entropies, bins=bins, range=(0.0, math.log(C)))


@dataclass
class AugmentedBatch:
    features: torch.Tensor
    labels: np.ndarray
    provenance: str

    def __len__(self):
        return self.features.shape[0]


def default_threshold(C: int) -> float:
    return 0.5 * math.log(C)


def prediction_entropy(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    logp = np.log(np.where(p > 0, p, 1.0))
    return -(p * logp).sum(axis=1)


def pseudo_label(classifier_probs, threshold: float) -> PseudoLabelSet:
    """Argmax labels with entropies in nats; accepted iff entropy <= threshold."""
    if isinstance(classifier_probs, torch.Tensor):
        classifier_probs = classifier_probs.detach().cpu().numpy()
    p = np.asarray(classifier_probs, dtype=np.float64)
    if p.ndim != 2:
        raise ParameterError("classifier probabilities must be a matrix [n, C]")
    bad = np.flatnonzero((np.abs(p.sum(axis=1) - 1.0) > 1e-6) | np.any(p < 0, axis=1) | ~np.all(np.isfinite(p), axis=1))
    if bad.size:
        raise ParameterError(f"row {bad[0]} is not a probability distribution")
    ent = np.clip(prediction_entropy(p), 0.0, math.log(p.shape[1]))
    return PseudoLabelSet(np.arange(p.shape[0]), p.argmax(axis=1), ent, ent <= threshold)


def perturb(accepted_feats, sigma, seed: int, labels=None) -> AugmentedBatch:
    """Add seeded N(0, sigma^2) noise; `sigma` may be a scalar or a per-dim vector."""
    x = torch.as_tensor(accepted_feats, dtype=DTYPE).detach()
    sigma_t = torch.as_tensor(sigma, dtype=DTYPE)
    if torch.any(sigma_t < 0):
        raise ParameterError("sigma must be >= 0")
    g = torch.Generator().manual_seed(int(seed))
    noise = torch.randn(x.shape, generator=g, dtype=DTYPE)
    labels = np.zeros(x.shape[0], dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    return AugmentedBatch(x + sigma_t * noise, labels, PERTURBED)


def default_sigma(accepted_feats) -> torch.Tensor:
    """0.1 x the per-dimension standard deviation of the accepted features."""
    x = torch.as_tensor(accepted_feats, dtype=DTYPE)
    if x.shape[0] < 2:
        return torch.zeros(x.shape[1], dtype=DTYPE)
    return 0.1 * x.std(dim=0, unbiased=False)


def regenerate(accepted_feats, labels, cb: Codebook, decoder: Callable, tau: float, seed: int,
               encoder: Optional[Callable] = None, sigma=None) -> AugmentedBatch:
    """Perturb, encode, resample through the codebook and decode.

    `encoder` defaults to the identity, for features that already live in the
    codebook space.
    """
    x = torch.as_tensor(accepted_feats, dtype=DTYPE).detach()
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if x.shape[0] == 0:
        return AugmentedBatch(x.reshape(0, x.shape[1] if x.dim() == 2 else 0), labels[:0], REGENERATED)
    if sigma is None:
        sigma = default_sigma(x)
    with torch.no_grad():
        pert = perturb(x, sigma, seed, labels).features
        z = pert if encoder is None else encoder(pert)
        q, _ = codebook_forward(z, cb, tau, "train", generator=torch.Generator().manual_seed(int(seed) + 1))
        out = decoder(q)
    return AugmentedBatch(out.detach(), labels, REGENERATED)


def class_mean_shift(original, regenerated, labels) -> Dict[int, Dict[str, float]]:
    """Per class: distance between original and regenerated means, and the original spread."""
    a = torch.as_tensor(original, dtype=DTYPE).detach().numpy()
    b = torch.as_tensor(regenerated, dtype=DTYPE).detach().numpy()
    labels = np.asarray(labels)
    out = {}
    for c in np.unique(labels):
        m = labels == c
        out[int(c)] = {
            "shift": float(np.linalg.norm(a[m].mean(axis=0) - b[m].mean(axis=0))),
            "std": float(np.sqrt(((a[m] - a[m].mean(axis=0)) ** 2).sum(axis=1).mean())),
        }
    return out
