"""Comparison and ablation variants: source-only, CDAN, NPA-DA and VI-DA."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .errors import ConfigurationError, ParameterError
from .nets import DTYPE
from .priors import BatchClassStats, ClassPrior, global_alignment_loss

VIDA_PRIOR_MEANS = (1.5, 1.2, 0.9, 0.6, 0.3, 0.0, -0.3, -0.6, -0.9, -1.2)
VIDA_VARIANCES = (0.0001, 0.01, 1.0)
NPA_NOISE_LEVELS = (0.0, 0.01, 0.1, 0.5, 1.0, 2.0)
WIDE_SLOT_WIDTH = 51


@dataclass(frozen=True)
class Variant:
    name: str
    alignment: str = "none"  # none | epoch_prior | fixed_prior | anchor
    adversarial: bool = False
    codebook: bool = False
    reconstruction: bool = False
    augmentation: bool = False
    npa_noise: float = 0.0
    prior_variance: float = 0.01

    @property
    def pseudo_labels(self) -> bool:
        return self.alignment != "none"

    def mask_lambdas(self, lambdas: Sequence[float]) -> Tuple[float, ...]:
        active = (True, self.adversarial, self.alignment != "none", self.codebook, self.reconstruction)
        return tuple(float(lam) if on else 0.0 for lam, on in zip(lambdas, active))


_NPA = re.compile(r"^npa\+([0-9]*\.?[0-9]+)$")
_VIDA = re.compile(r"^vida(?:\(([0-9]*\.?[0-9]+(?:e-?[0-9]+)?)\))?$")


def parse_variant(name: str) -> Variant:
    """Map a CLI variant string to the set of active components.

    Accepted: source_only, cdan, npa+X, vida, vida(VAR), gvida.
    """
    if name == "source_only":
        return Variant(name)
    if name == "cdan":
        return Variant(name, adversarial=True)
    if name == "gvida":
        return Variant(name, "epoch_prior", adversarial=True, codebook=True, reconstruction=True,
                       augmentation=True)
    m = _NPA.match(name)
    if m:
        return Variant(name, "anchor", adversarial=True, npa_noise=float(m.group(1)))
    m = _VIDA.match(name)
    if m:
        var = float(m.group(1)) if m.group(1) else 0.01
        if var <= 0:
            raise ConfigurationError(f"variant {name!r}: prior variance must be positive")
        return Variant(name, "fixed_prior", adversarial=True, reconstruction=True, prior_variance=var)
    raise ConfigurationError(f"unknown variant {name!r}; expected source_only, cdan, npa+X, vida(VAR) or gvida")


def npa_sweep_names() -> List[str]:
    return [f"npa+{x:g}" for x in NPA_NOISE_LEVELS]


def vida_sweep_names() -> List[str]:
    return [f"vida({v:g})" for v in VIDA_VARIANCES]


@dataclass
class AnchorSet:
    anchors: np.ndarray
    width: int
    noise_std: float = 0.0
    seed: int = 0

    @property
    def dim(self) -> int:
        return self.anchors.shape[1]

    def sample(self, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """Anchor rows, plus fresh N(0, X^2) noise when X > 0."""
        a = torch.as_tensor(self.anchors, dtype=DTYPE)
        if self.noise_std > 0:
            a = a + self.noise_std * torch.randn(a.shape, generator=generator, dtype=DTYPE)
        return a


def build_anchors(C: int, w: int, X: float = 0.0, seed: int = 0) -> AnchorSet:
    """Block-binary anchors: row c is one on columns [c*w, (c+1)*w) and zero elsewhere."""
    if C < 2 or w < 1:
        raise ParameterError("anchors need C >= 2 and w >= 1")
    if X < 0:
        raise ParameterError("anchor noise must be >= 0")
    a = np.zeros((C, C * w))
    for c in range(C):
        a[c, c * w:(c + 1) * w] = 1.0
    return AnchorSet(a, w, float(X), seed)


def anchor_width(latent_dim: int, C: int) -> int:
    """Slot width scaled to the latent size: ceil(d_z / C)."""
    if latent_dim < 1 or C < 1:
        raise ParameterError("anchor width needs latent_dim >= 1 and C >= 1")
    return -(-latent_dim // C)


def npa_loss(stats: Sequence[BatchClassStats], anchors: AnchorSet,
             generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """(1/C) * sum over present classes of ||class mean - anchor||^2.

    Means and anchors of different width are zero-padded to a common width.
    """
    C = anchors.anchors.shape[0]
    if not stats:
        return torch.zeros((), dtype=DTYPE)
    a = anchors.sample(generator)
    total = torch.zeros((), dtype=DTYPE)
    for s in stats:
        if not 0 <= s.class_id < C:
            raise ConfigurationError(f"no anchor for class {s.class_id}")
        m = torch.as_tensor(s.mean, dtype=DTYPE)
        width = max(m.shape[0], a.shape[1])
        m = torch.nn.functional.pad(m, (0, width - m.shape[0]))
        target = torch.nn.functional.pad(a[s.class_id], (0, width - a.shape[1]))
        total = total + ((m - target) ** 2).sum()
    return total / C


@dataclass(frozen=True)
class FixedPriorSet:
    means: Tuple[float, ...]
    variance: float

    def __post_init__(self):
        if self.variance <= 0:
            raise ParameterError("prior variance must be positive")
        if len(set(self.means)) != len(self.means):
            raise ParameterError("prior means must be pairwise distinct")

    @classmethod
    def build(cls, C: int, variance: float = 0.01) -> "FixedPriorSet":
        """The ten reference means, extended by the same -0.3 step beyond ten classes."""
        means = [VIDA_PRIOR_MEANS[c] if c < len(VIDA_PRIOR_MEANS) else round(1.5 - 0.3 * c, 10)
                 for c in range(C)]
        return cls(tuple(means), float(variance))

    def priors(self, latent_dim: int) -> List[ClassPrior]:
        return [ClassPrior(c, torch.full((latent_dim,), m, dtype=DTYPE), self.variance)
                for c, m in enumerate(self.means)]


def vida_loss(stats: Sequence[BatchClassStats], fixed: FixedPriorSet) -> torch.Tensor:
    """Summed Gaussian KL of batch class statistics against the fixed priors."""
    if not stats:
        return torch.zeros((), dtype=DTYPE)
    d = torch.as_tensor(stats[0].mean).shape[0]
    for s in stats:
        if s.class_id >= len(fixed.means) or s.class_id < 0:
            raise ConfigurationError(f"no fixed prior for class {s.class_id}")
    return global_alignment_loss(stats, fixed.priors(d))


def run_variant(name: str, config, source, target, out_dir=None):
    """Train `name` with everything else taken from `config`; returns the FitResult."""
    from .trainer import fit

    parse_variant(name)
    cfg = config.model_copy(deep=True)
    cfg.variant.name = name
    return fit(cfg, source, target, out_dir=out_dir)
