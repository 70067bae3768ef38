"""Loss terms for the translation system, non-conditional and conditional.

Conventions (shared by every term so the arithmetic in the tests is exact):

* L1 distances are summed per sample over all feature/pixel components,
  then averaged over the batch; the equations normalize by batch size only.
* The discriminator's per-patch probabilities are averaged into one scalar
  per image before the log, and clamped to [eps, 1-eps] against log(0).
* The generator's optimization uses the non-saturating surrogate
  (maximize log d(fake)); the reported adversarial value keeps the
  log d(real) + log(1 - d(fake)) form, where the real term carries no
  generator gradient anyway.

All functions are pure, dtype-preserving and reentrant.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import LossWeights

LOG_EPS = 1e-7


def _check_finite(name: str, *tensors: torch.Tensor):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise ValueError(f"{name}: non-finite input")


def _per_sample_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Sum of |a-b| over everything but the batch axis -> [K]."""
    return (a - b).abs().flatten(1).sum(dim=1)


def classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of the true domain under softmax(logits)."""
    _check_finite("classification_loss", logits)
    return F.cross_entropy(logits, labels)


def patch_scalar(adv: torch.Tensor) -> torch.Tensor:
    """Per-image probability: mean over the patch grid -> [K]."""
    return adv.flatten(1).mean(dim=1)


def adversarial_loss(adv_real: torch.Tensor, adv_fake: torch.Tensor) -> torch.Tensor:
    """log d(real) + log(1 - d(fake)), patch-mean aggregation, batch mean.

    The discriminator maximizes this (its total carries the minus sign);
    the generator minimizes it.
    """
    _check_finite("adversarial_loss", adv_real, adv_fake)
    p_real = patch_scalar(adv_real).clamp(LOG_EPS, 1.0 - LOG_EPS)
    p_fake = patch_scalar(adv_fake).clamp(LOG_EPS, 1.0 - LOG_EPS)
    return (torch.log(p_real) + torch.log(1.0 - p_fake)).mean()


def generator_adv_surrogate(adv_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator objective: minimize -log d(fake)."""
    _check_finite("generator_adv_surrogate", adv_fake)
    p_fake = patch_scalar(adv_fake).clamp(LOG_EPS, 1.0 - LOG_EPS)
    return -torch.log(p_fake).mean()


def ds_recon_real(d_feats_real: torch.Tensor, styles_real: torch.Tensor) -> torch.Tensor:
    """L1 between the discriminator's predicted features of real images and
    the extractor's features (the discriminator's feature-head target)."""
    _check_finite("ds_recon_real", d_feats_real, styles_real)
    return _per_sample_l1(d_feats_real, styles_real).mean()


def ds_recon_fake(d_feats_fake: torch.Tensor, target_style: torch.Tensor) -> torch.Tensor:
    """L1 between predicted features of translations and the target style.

    ``target_style`` is a single [F] vector (broadcast domain style) or a
    per-image [K, F] matrix (conditional targets).
    """
    _check_finite("ds_recon_fake", d_feats_fake, target_style)
    if target_style.ndim == 1:
        target_style = target_style.unsqueeze(0).expand_as(d_feats_fake)
    return _per_sample_l1(d_feats_fake, target_style).mean()


def image_recon_loss(x: torch.Tensor, x_self: torch.Tensor, x_cycle: torch.Tensor) -> torch.Tensor:
    """Self plus cross-domain (cycle) L1 reconstruction."""
    _check_finite("image_recon_loss", x, x_self, x_cycle)
    return (_per_sample_l1(x, x_self) + _per_sample_l1(x, x_cycle)).mean()


def ablation_feat_loss(alpha_feats_of_fake: torch.Tensor, target_style: torch.Tensor) -> torch.Tensor:
    """Feature loss through the extractor itself instead of the
    discriminator's feature head (the extractor-loss ablation variant)."""
    return ds_recon_fake(alpha_feats_of_fake, target_style)


def total_net_loss(gan: torch.Tensor, ds_fake: torch.Tensor, im: torch.Tensor,
                   w: LossWeights) -> torch.Tensor:
    """Generator/encoder total: gan + lambda_f * ds_fake + lambda_im * im."""
    return gan + w.lambda_f * ds_fake + w.lambda_im * im


def total_d_loss(gan: torch.Tensor, ds_real: torch.Tensor, w: LossWeights) -> torch.Tensor:
    """Discriminator total: -gan + lambda_f * ds_real."""
    return -gan + w.lambda_f * ds_real


def joint_cls_term(logits: torch.Tensor, labels: torch.Tensor,
                   literal_prob: bool = False) -> torch.Tensor:
    """Classifier term for joint training.

    Default is the negative log-probability (consistent with pre-training);
    ``literal_prob=True`` selects the plain negated probability, which the
    joint-training variant's write-up states literally.
    """
    _check_finite("joint_cls_term", logits)
    if literal_prob:
        probs = F.softmax(logits, dim=1)
        return -probs.gather(1, labels.unsqueeze(1)).mean()
    return classification_loss(logits, labels)


def joint_train_net_loss(gan: torch.Tensor, ds_fake: torch.Tensor, im: torch.Tensor,
                         cls_term: torch.Tensor, w: LossWeights) -> torch.Tensor:
    """Joint-training total: gan + cls + lambda_f * ds_fake + lambda_im * im."""
    return gan + cls_term + w.lambda_f * ds_fake + w.lambda_im * im


@dataclass
class LossBreakdown:
    """Reported per-step loss values.

    ``total_net``/``total_d`` always satisfy the weighted-sum identities of
    the loss definitions; the joint-training classifier term is carried
    separately so the identities stay exact.  Conditional steps report each
    field with both directions already summed.
    """

    gan: float
    ds_fake: float
    ds_real: float
    im: float
    total_net: float
    total_d: float
    cls: float = 0.0

    def validate(self, w: LossWeights, rtol: float = 1e-6):
        want_net = self.gan + w.lambda_f * self.ds_fake + w.lambda_im * self.im
        want_d = -self.gan + w.lambda_f * self.ds_real
        for got, want, name in ((self.total_net, want_net, "total_net"),
                                (self.total_d, want_d, "total_d")):
            if abs(got - want) > rtol * max(1.0, abs(want)):
                raise AssertionError(f"{name} identity violated: {got} vs {want}")
        return self

    def as_log_record(self, iteration: int, lr: float) -> dict:
        return {
            "iter": iteration,
            "gan": self.gan,
            "ds_real": self.ds_real,
            "ds_fake": self.ds_fake,
            "im": self.im,
            "total_net": self.total_net,
            "total_d": self.total_d,
            "lr": lr,
        }
