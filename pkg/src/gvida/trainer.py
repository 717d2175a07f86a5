"""Five-term objective, the epoch/batch loop, evaluation and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import baselines
from .adversarial import adversarial_loss, domain_bce, grl_coefficient, multilinear_condition
from .codebook import (Codebook, assignment_entropy, codebook_forward, elbo_constant, tau_schedule,
                       usage_perplexity, vq_loss)
from .config import ExperimentConfig, ModelConfig
from .data import DomainDataset, check_compatible, cycle_batches
from .errors import ConfigurationError, FormatError, NumericError
from .nets import (DTYPE, Network, classifier_spec, decoder_spec, discriminator_spec, encoder_spec,
                   generator_spec, load_checkpoint, vida512_specs, save_checkpoint)
from .priors import (ClassPrior, batch_class_stats, estimate_epoch_priors, global_alignment_loss,
                     mean_class_variance)
from .robust_target import default_threshold, pseudo_label, regenerate

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "step", "l1", "l2", "l3", "l4", "l5", "total", "acc_target",
                  "perplexity", "mean_class_var", "accepted_frac"]
PROB_CLIP = 1e-12


@dataclass
class LossBreakdown:
    l1_srm: float
    l2_adv: float
    l3_align: float
    l4_entropy: float
    l5_recon: float
    elbo_constant: float
    total: float
    step: int
    epoch: int

    def terms(self):
        return (self.l1_srm, self.l2_adv, self.l3_align, self.l4_entropy, self.l5_recon)


def srm_loss(classifier_probs, labels_source) -> torch.Tensor:
    """Mean negative log-likelihood of the true source labels."""
    p = torch.as_tensor(classifier_probs, dtype=DTYPE)
    y = torch.as_tensor(np.asarray(labels_source, dtype=np.int64))
    if p.shape[0] == 0:
        return torch.zeros((), dtype=DTYPE)
    picked = p.gather(1, y.view(-1, 1)).clamp_min(PROB_CLIP)
    return -torch.log(picked).mean()


def reconstruction_loss(x, x_hat) -> torch.Tensor:
    """Batch mean of the squared Euclidean residual."""
    x = torch.as_tensor(x, dtype=DTYPE)
    x_hat = torch.as_tensor(x_hat, dtype=DTYPE)
    if x.shape != x_hat.shape:
        raise ConfigurationError(f"reconstruction shapes differ: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if x.shape[0] == 0:
        return torch.zeros((), dtype=DTYPE)
    return ((x - x_hat) ** 2).sum(dim=1).mean()


def accuracy(predicted, truth) -> float:
    predicted, truth = np.asarray(predicted), np.asarray(truth)
    return float((predicted == truth).mean()) if truth.size else 0.0


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


class GVIDAModel(nn.Module):
    """Generator G, encoder E, decoder, classifier, discriminator and codebook.

    Component seeds depend only on `seed`, so every variant built from the
    same seed starts from identical weights.
    """

    def __init__(self, d_in: int, C: int, mc: ModelConfig = ModelConfig(), seed: int = 0,
                 vida512: bool = False):
        super().__init__()
        s = np.random.SeedSequence(seed).generate_state(6)
        gh = mc.generator_hidden
        self.d_in, self.C, self.seed = d_in, C, seed
        self.model_config = mc
        self.vida512 = vida512 and gh == 512
        if self.vida512:
            enc, dec = vida512_specs()
            self.latent_dim = 64
        else:
            enc = encoder_spec(gh, mc.encoder_hidden, mc.latent_dim)
            dec = decoder_spec(mc.latent_dim, mc.encoder_hidden, gh)
            self.latent_dim = mc.latent_dim
        self.G = Network(generator_spec(d_in, gh), int(s[0]))
        self.E = Network(enc, int(s[1]))
        self.dec = Network(dec, int(s[2]))
        self.F = Network(classifier_spec(self.latent_dim, C), int(s[3]))
        self.D = Network(discriminator_spec(self.latent_dim * C, mc.discriminator_hidden,
                                            mc.discriminator_dropout), int(s[4]))
        self.codebook = Codebook(mc.codebook_size, self.latent_dim, mc.distance, seed=int(s[5]),
                                 init_scale=mc.codebook_init_scale)

    def latent(self, g, generator=None):
        return self.E(g, generator=generator)[:, :self.latent_dim]

    def embed(self, x):
        """Eval-mode (generator features, latent codes) without gradients."""
        was = self.training
        self.eval()
        try:
            with torch.no_grad():
                g = self.G(torch.as_tensor(x, dtype=DTYPE))
                return g, self.latent(g)
        finally:
            self.train(was)

    def predict_proba(self, x) -> torch.Tensor:
        _, z = self.embed(x)
        with torch.no_grad():
            return self.F(z)

    def predict(self, x) -> np.ndarray:
        return self.predict_proba(x).argmax(dim=1).numpy()


TrainedModel = GVIDAModel


def evaluate(model: GVIDAModel, ds: DomainDataset) -> float:
    """Fraction of rows whose predicted label equals the held-out truth."""
    return accuracy(model.predict(ds.features), ds.labels)


@dataclass
class StepInputs:
    xs: torch.Tensor
    ys: np.ndarray
    xt: torch.Tensor
    yt: np.ndarray
    aug_x: Optional[torch.Tensor] = None
    aug_y: Optional[np.ndarray] = None


@dataclass
class Alignment:
    """What the third loss term aligns batch statistics against."""
    priors: Optional[List[ClassPrior]] = None
    anchors: Optional["baselines.AnchorSet"] = None


def compute_losses(model: GVIDAModel, variant: "baselines.Variant", inp: StepInputs, align: Alignment,
                   tau: float = 1.0, grl_coeff: Optional[float] = 1.0,
                   generator: Optional[torch.Generator] = None,
                   frozen: Optional[Dict[str, torch.Tensor]] = None) -> Dict[str, torch.Tensor]:
    """All five loss terms for one paired batch.

    Terms of inactive components are returned as zeros. With
    `grl_coeff=None` the adversarial term is computed without gradient
    reversal. Passing a dict as `frozen` records every stop-gradient value on
    the first call and reuses it afterwards, so finite differences see the
    same function autograd differentiates.
    """
    def sg(key, t):
        if frozen is None:
            return t.detach()
        if key not in frozen:
            frozen[key] = t.detach().clone()
        return frozen[key]

    zero = torch.zeros((), dtype=DTYPE)
    beta = model.model_config.commitment_beta
    gs = model.G(inp.xs, generator=generator)
    gt = model.G(inp.xt, generator=generator)
    zs = model.latent(gs, generator)
    zt = model.latent(gt, generator)
    ps = model.F(zs)
    pt = model.F(zt)
    has_aug = inp.aug_x is not None and inp.aug_x.shape[0] > 0
    if has_aug:
        za = model.latent(inp.aug_x, generator)
        pa = model.F(za)
    out = {"z_source": zs}

    out["l1"] = srm_loss(ps, inp.ys)

    if variant.adversarial:
        zt_adv = torch.cat([zt, za]) if has_aug else zt
        pt_adv = torch.cat([pt, pa]) if has_aug else pt
        h_s = multilinear_condition(zs, sg("ps", ps))
        h_t = multilinear_condition(zt_adv, sg("pt", pt_adv))
        if grl_coeff is None:
            d = model.D(torch.cat([h_s, h_t]), generator=generator)
            out["l2"] = domain_bce(d[:h_s.shape[0]], d[h_s.shape[0]:])
        else:
            out["l2"] = adversarial_loss(h_s, h_t, model.D, grl_coeff, generator=generator)
    else:
        out["l2"] = zero

    if variant.alignment != "none":
        parts_z, parts_y = [zs, zt], [np.asarray(inp.ys), np.asarray(inp.yt)]
        if has_aug:
            parts_z.append(za)
            parts_y.append(np.asarray(inp.aug_y))
        stats = batch_class_stats(torch.cat(parts_z), np.concatenate(parts_y))
        if variant.alignment == "anchor":
            out["l3"] = baselines.npa_loss(stats, align.anchors, generator=generator)
        else:
            out["l3"] = global_alignment_loss(stats, align.priors)
    else:
        out["l3"] = zero

    z_real = torch.cat([zs, zt])
    g_real = sg("g", torch.cat([gs, gt]))
    if variant.codebook:
        q, a = codebook_forward(z_real, model.codebook, tau, "train", generator=generator)
        out["assign"] = a.probs.detach()
        out["l4"] = -assignment_entropy(a)
        if variant.reconstruction:
            out["l5"] = reconstruction_loss(g_real, model.dec(q, generator=generator)) \
                + vq_loss(z_real, q, beta, sg("z", z_real), sg("q", q))
        else:
            out["l5"] = zero
    else:
        out["l4"] = zero
        out["l5"] = reconstruction_loss(g_real, model.dec(z_real, generator=generator)) \
            if variant.reconstruction else zero
    return out


def weighted_total(terms: Dict[str, torch.Tensor], lambdas: Sequence[float]) -> torch.Tensor:
    total = torch.zeros((), dtype=DTYPE)
    for lam, key in zip(lambdas, ("l1", "l2", "l3", "l4", "l5")):
        if lam != 0:
            total = total + lam * terms[key]
    return total


class Trainer:
    """Owns the model, optimizer and schedule state for one run."""

    def __init__(self, config: ExperimentConfig, d_in: int, C: int, model: Optional[GVIDAModel] = None):
        self.config = config
        self.variant = baselines.parse_variant(config.variant.name)
        tc = config.train
        self.lambdas = self.variant.mask_lambdas(tc.lambdas)
        self.C = C
        self.seed = tc.seed
        self.model = model or GVIDAModel(d_in, C, config.model, seed=tc.seed,
                                         vida512=self.variant.alignment == "fixed_prior")
        self.opt = torch.optim.SGD(self.model.parameters(), lr=tc.learning_rate, momentum=tc.momentum,
                                   weight_decay=tc.weight_decay)
        self.step = 0
        self.epoch = 0
        self.total_steps = 1
        self.elbo_constant = elbo_constant(self.model.latent_dim, config.model.codebook_size)
        self.align = Alignment()
        if self.variant.alignment == "fixed_prior":
            self.align.priors = baselines.FixedPriorSet.build(C, self.variant.prior_variance).priors(
                self.model.latent_dim)
        elif self.variant.alignment == "anchor":
            self.align.anchors = baselines.build_anchors(
                C, baselines.anchor_width(self.model.latent_dim, C), self.variant.npa_noise, tc.seed)
        self.accepted: Optional[np.ndarray] = None

    @property
    def progress(self) -> float:
        return min(self.step / max(self.total_steps, 1), 1.0)

    def _set_lr(self):
        tc = self.config.train
        lr = tc.learning_rate
        if tc.lr_decay:
            lr = lr / (1.0 + 10.0 * self.progress) ** 0.75
        for group in self.opt.param_groups:
            group["lr"] = lr

    def _check_target_labels(self, batch):
        known = batch.labels >= 0
        if not known.any():
            return
        if self.accepted is None or not np.all(self.accepted[batch.indices[known]]):
            raise AssertionError("a rejected target pseudo-label reached the training losses")

    def train_step(self, batch_source, batch_target, aug_x=None, aug_y=None) -> LossBreakdown:
        self._check_target_labels(batch_target)
        tc = self.config.train
        self.model.train()
        self._set_lr()
        gen = torch.Generator().manual_seed(derive_seed(self.seed, 1, self.step))
        inp = StepInputs(torch.as_tensor(batch_source.features, dtype=DTYPE), batch_source.labels,
                         torch.as_tensor(batch_target.features, dtype=DTYPE), batch_target.labels,
                         aug_x, aug_y)
        tau = tau_schedule(self.progress, tc.tau_start, tc.tau_end)
        coeff = grl_coefficient(self.progress, tc.grl_gamma)
        terms = compute_losses(self.model, self.variant, inp, self.align, tau, coeff, gen)
        for key, name in (("l1", "source risk"), ("l2", "adversarial"), ("l3", "alignment"),
                          ("l4", "codebook entropy"), ("l5", "reconstruction")):
            if not torch.isfinite(terms[key]):
                raise NumericError(f"non-finite {name} loss ({key}) at step {self.step}")
        total = weighted_total(terms, self.lambdas)
        self.opt.zero_grad()
        total.backward()
        if tc.grad_clip is not None:
            nn.utils.clip_grad_norm_(self.model.parameters(), tc.grad_clip)
        self.opt.step()
        self.last_terms = {k: v.detach() if torch.is_tensor(v) else v for k, v in terms.items()}
        out = LossBreakdown(terms["l1"].item(), terms["l2"].item(), terms["l3"].item(), terms["l4"].item(),
                            terms["l5"].item(), self.elbo_constant, total.item(), self.step, self.epoch)
        self.step += 1
        return out


@dataclass
class FitResult:
    model: GVIDAModel
    metrics: List[dict]
    priors: Optional[List[ClassPrior]] = None
    breakdowns: List[LossBreakdown] = field(default_factory=list)
    elbo_constant: float = 0.0
    prior_digests: List[str] = field(default_factory=list)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_metrics(rows: List[dict], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in METRICS_HEADER])


def read_metrics(path) -> List[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_HEADER:
            raise FormatError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return [{k: (int(v) if k in ("epoch", "step") else float(v)) for k, v in row.items()} for row in reader]


def priors_digest(priors: Sequence[ClassPrior]) -> str:
    h = hashlib.sha256()
    for p in priors:
        h.update(np.asarray(p.mean.detach().numpy(), dtype="<f8").tobytes())
        h.update(repr(p.variance).encode())
    return h.hexdigest()


def fit(config: ExperimentConfig, source: DomainDataset, target: DomainDataset,
        out_dir=None, trainer: Optional[Trainer] = None) -> FitResult:
    """Train one variant end to end and return the model and per-epoch metrics.

    Each epoch refreshes the priors, refreshes pseudo-labels once warm-up is
    over, runs paired source/target batches (the shorter stream restarts) and
    logs one metrics row. With `out_dir`, the metrics CSV and checkpoint are
    written there.
    """
    check_compatible(source, target)
    if config.train.epochs < 1:
        raise ConfigurationError("train.epochs must be >= 1")
    tc = config.train
    tr = trainer or Trainer(config, source.dim, source.class_count)
    model, variant, C = tr.model, tr.variant, source.class_count
    b = tc.batch_size
    steps_per_epoch = max(math.ceil(source.n / b), math.ceil(target.n / b))
    tr.total_steps = tc.epochs * steps_per_epoch
    threshold = tc.entropy_threshold if tc.entropy_threshold is not None else default_threshold(C)
    fixed_digest = priors_digest(tr.align.priors) if variant.alignment == "fixed_prior" else None

    buf_z, buf_y = None, None
    rows, breakdowns = [], []
    pl_log, digests = [], []
    for epoch in range(tc.epochs):
        tr.epoch = epoch
        if variant.alignment == "epoch_prior":
            if buf_z is None:
                _, z_src = model.embed(source.features)
                tr.align.priors = estimate_epoch_priors(z_src, source.labels, C)
            else:
                tr.align.priors = estimate_epoch_priors(buf_z, buf_y, C)
        elif fixed_digest is not None and priors_digest(tr.align.priors) != fixed_digest:
            raise AssertionError("fixed priors changed between epochs")
        if tr.align.priors:
            digests.append(priors_digest(tr.align.priors))

        target_labels = np.full(target.n, -1, dtype=np.int64)
        tr.accepted = np.zeros(target.n, dtype=bool)
        aug_x = aug_y = None
        if variant.pseudo_labels and epoch >= tc.warmup_epochs:
            pls = pseudo_label(model.predict_proba(target.features), threshold)
            tr.accepted = pls.accepted.copy()
            target_labels = pls.sentinel_labels(target.n)
            if np.any(target_labels[~tr.accepted] != -1):
                raise AssertionError("rejected pseudo-labels leaked into the target label vector")
            counts, _ = pls.entropy_histogram(C)
            pl_log.append({"epoch": epoch, "accepted": int(pls.accepted.sum()),
                           "rejected": int((~pls.accepted).sum()), "entropy_histogram": counts.tolist()})
            if variant.augmentation and pls.accepted.any():
                g_acc, _ = model.embed(target.features[pls.accepted])
                sigma = tc.sigma_scale * g_acc.std(dim=0, unbiased=False) if g_acc.shape[0] > 1 \
                    else torch.zeros(g_acc.shape[1], dtype=DTYPE)
                model.eval()
                aug = regenerate(g_acc, pls.labels[pls.accepted], model.codebook, model.dec,
                                 tau_schedule(tr.progress, tc.tau_start, tc.tau_end),
                                 derive_seed(tc.seed, 2, epoch), encoder=model.latent, sigma=sigma)
                model.train()
                aug_x, aug_y = aug.features, aug.labels

        src_stream = cycle_batches(source, b, derive_seed(tc.seed, 3, epoch) % (2 ** 31), steps_per_epoch)
        tgt_stream = cycle_batches(target, b, derive_seed(tc.seed, 4, epoch) % (2 ** 31), steps_per_epoch,
                                   labels=target_labels)
        aug_order = None
        if aug_x is not None:
            aug_order = np.random.default_rng(derive_seed(tc.seed, 5, epoch)).permutation(aug_x.shape[0])
        sums = np.zeros(6)
        z_parts, y_parts, assign_parts = [], [], []
        for i, (bs, bt) in enumerate(zip(src_stream, tgt_stream)):
            ax = ay = None
            if aug_order is not None:
                take = np.take(aug_order, np.arange(i * b, (i + 1) * b), mode="wrap")[:min(b, aug_order.size)]
                ax, ay = aug_x[torch.as_tensor(take)], aug_y[take]
            br = tr.train_step(bs, bt, ax, ay)
            breakdowns.append(br)
            sums += np.array(br.terms() + (br.total,))
            z_parts.append(tr.last_terms["z_source"].detach())
            y_parts.append(bs.labels)
            if "assign" in tr.last_terms:
                assign_parts.append(tr.last_terms["assign"])
        buf_z, buf_y = torch.cat(z_parts), np.concatenate(y_parts)
        means = sums / steps_per_epoch
        row = {"epoch": epoch, "step": tr.step,
               "l1": means[0], "l2": means[1], "l3": means[2], "l4": means[3], "l5": means[4], "total": means[5],
               "acc_target": evaluate(model, target),
               "perplexity": usage_perplexity(torch.cat(assign_parts)) if assign_parts else float("nan"),
               "mean_class_var": mean_class_variance(buf_z, buf_y),
               "accepted_frac": float(tr.accepted.mean())}
        rows.append(row)
        log.info("epoch %d acc_target=%.4f total=%.4f", epoch, row["acc_target"], row["total"])

    if variant.alignment == "epoch_prior":
        tr.align.priors = estimate_epoch_priors(buf_z, buf_y, C)
    result = FitResult(model, rows, tr.align.priors, breakdowns, tr.elbo_constant, digests)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(rows, out / "metrics.csv")
        if pl_log:
            (out / "pseudo_labels.json").write_text(json.dumps(pl_log, indent=1), encoding="utf-8")
        if config.output.checkpoint:
            save_model(model, out / "checkpoint.bin", priors=tr.align.priors, variant=variant.name)
    return result


def save_model(model: GVIDAModel, path, priors=None, variant: str = "") -> None:
    meta = {"d_in": model.d_in, "C": model.C, "seed": model.seed, "vida512": model.vida512,
            "model": model.model_config.model_dump(mode="json"), "variant": variant,
            "elbo_constant": elbo_constant(model.latent_dim, model.codebook.K),
            "priors": [p.to_dict() for p in priors] if priors else None}
    save_checkpoint(path, model.state_dict(), meta)


def load_model(path) -> GVIDAModel:
    tensors, meta = load_checkpoint(path)
    try:
        model = GVIDAModel(meta["d_in"], meta["C"], ModelConfig(**meta["model"]), seed=meta["seed"],
                           vida512=meta["vida512"])
        model.load_state_dict(tensors)
    except (KeyError, RuntimeError, TypeError) as exc:
        raise ConfigurationError(f"{path}: checkpoint does not describe a model: {exc}") from None
    model.eval()
    return model
