"""Epoch-level class priors and KL alignment of batch class statistics to them."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import torch

from .errors import ConfigurationError, NumericError, ParameterError, PriorEstimationError
from .nets import DTYPE

VAR_FLOOR = 1e-6


@dataclass
class ClassPrior:
    class_id: int
    mean: torch.Tensor
    variance: float

    def to_dict(self) -> dict:
        return {"class_id": self.class_id, "mean": self.mean.tolist(), "variance": self.variance}


@dataclass
class BatchClassStats:
    class_id: int
    mean: torch.Tensor
    var: torch.Tensor
    count: int


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def estimate_epoch_priors(encoded_source, labels, C: int) -> List[ClassPrior]:
    """Class means of the source encodings with isotropic variance 1/C."""
    z = _as_tensor(encoded_source).detach()
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    priors = []
    for c in range(C):
        rows = np.flatnonzero(labels == c)
        if rows.size == 0:
            raise PriorEstimationError(f"class {c} has no source samples in the epoch buffer")
        priors.append(ClassPrior(c, z[torch.as_tensor(rows)].mean(dim=0), 1.0 / C))
    return priors


def batch_class_stats(encoded, labels) -> List[BatchClassStats]:
    """Per-class mean and floored population variance; rows labelled -1 are skipped."""
    z = _as_tensor(encoded)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    stats = []
    for c in np.unique(labels[labels >= 0]):
        idx = torch.as_tensor(np.flatnonzero(labels == c))
        rows = z[idx]
        mean = rows.mean(dim=0)
        var = ((rows - mean) ** 2).mean(dim=0).clamp_min(VAR_FLOOR)
        stats.append(BatchClassStats(int(c), mean, var, int(idx.numel())))
    return stats


def gaussian_kl(q: BatchClassStats, p: ClassPrior) -> torch.Tensor:
    """KL(q || p) between diagonal Gaussians; p has the same variance in every dim."""
    mu_q, var_q = _as_tensor(q.mean), _as_tensor(q.var)
    mu_p = _as_tensor(p.mean)
    var_p = torch.as_tensor(p.variance, dtype=DTYPE)
    if not (torch.all(torch.isfinite(mu_q)) and torch.all(torch.isfinite(var_q)) and torch.all(torch.isfinite(mu_p))):
        raise NumericError(f"non-finite statistics for class {q.class_id}")
    if p.variance <= 0 or torch.any(var_q <= 0):
        raise ParameterError("variances must be positive")
    terms = 0.5 * torch.log(var_p / var_q) + (var_q + (mu_q - mu_p) ** 2) / (2 * var_p) - 0.5
    return terms.sum().clamp_min(0.0)


def global_alignment_loss(stats: Sequence[BatchClassStats], priors: Sequence[ClassPrior]) -> torch.Tensor:
    by_class = {p.class_id: p for p in priors}
    total = torch.zeros((), dtype=DTYPE)
    for s in stats:
        if s.class_id not in by_class:
            raise ConfigurationError(f"no prior for class {s.class_id}")
        total = total + gaussian_kl(s, by_class[s.class_id])
    return total


def mean_class_variance(encoded, labels) -> float:
    """Mean over classes of the per-dim population variance, averaged over dims."""
    stats = batch_class_stats(encoded, labels)
    if not stats:
        return float("nan")
    return float(np.mean([s.var.detach().mean().item() for s in stats]))


def _total_variation(p, q) -> float:
    return 0.5 * float(np.abs(p - q).sum())


def lemma1_check(joint_S, joint_T, atol: float = 1e-9) -> Tuple[float, float]:
    """Conditional and marginal total-variation gaps between two discrete joints.

    Rows index classes, columns index feature bins. Returns the largest
    class-conditional TV distance and the TV distance between the feature
    marginals.
    """
    js = np.asarray(joint_S, dtype=np.float64)
    jt = np.asarray(joint_T, dtype=np.float64)
    if js.shape != jt.shape or js.ndim != 2:
        raise ParameterError("joints must be matrices of equal shape [C, m]")
    for name, j in (("source", js), ("target", jt)):
        if np.any(j < 0) or abs(j.sum() - 1.0) > atol:
            raise ParameterError(f"{name} joint is not a normalized distribution")
        if np.any(j.sum(axis=1) <= 0):
            raise ParameterError(f"{name} joint has a class with zero mass")
    cond_s = js / js.sum(axis=1, keepdims=True)
    cond_t = jt / jt.sum(axis=1, keepdims=True)
    condi = max(_total_variation(a, b) for a, b in zip(cond_s, cond_t))
    marg = _total_variation(js.sum(axis=0), jt.sum(axis=0))
    return condi, marg


def priors_to_json(priors: Sequence[ClassPrior]) -> str:
    return json.dumps([p.to_dict() for p in priors], indent=1)


def priors_from_json(text: str) -> List[ClassPrior]:
    return [ClassPrior(d["class_id"], torch.tensor(d["mean"], dtype=DTYPE), float(d["variance"]))
            for d in json.loads(text)]
