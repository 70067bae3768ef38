"""Training drivers: classifier pre-training, domain-style estimation, and
the translation update loops (non-conditional, conditional, and the loss
ablation variants).

One driver owns all mutable state.  Sampling randomness flows through a
single numpy generator whose state is checkpointed, so an interrupted run
resumes bit-identically on CPU.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import losses
from .checkpoint import load_checkpoint, rotate_checkpoints, save_checkpoint
from .config import LossWeights, NetConfig, TrainConfig, config_from_dict, config_to_dict
from .data import DatasetManifest, ImageBatch, load_manifest, sample_batch, sample_unlabeled_batch
from .networks import (
    ContentEncoder,
    DomainClassifier,
    Generator,
    PatchDiscriminator,
    build_classifier,
    build_discriminator,
    build_encoder,
    build_generator,
    freeze,
    parameter_checksum,
)

log = logging.getLogger(__name__)

ADAM_BETAS = (0.5, 0.999)

# fixed offsets deriving per-component seeds from the run seed
_SEED_CLS, _SEED_ENC, _SEED_GEN, _SEED_DISC, _SEED_SAMPLER = 11, 12, 13, 14, 15


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; carries the offending values."""


@dataclass
class StyleTable:
    """Per-domain mean of the extractor's features over training images."""

    styles: torch.Tensor  # [N, F]
    counts: list[int]
    domain_names: list[str]

    def row(self, domain: int) -> torch.Tensor:
        return self.styles[domain]


@dataclass
class NetBundle:
    """The four networks plus their two optimizers."""

    classifier: DomainClassifier
    encoder: ContentEncoder
    generator: Generator
    discriminator: PatchDiscriminator
    opt_net: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer


def build_bundle(net_cfg: NetConfig, classifier: DomainClassifier, eta: float,
                 seed: int, joint: bool = False) -> NetBundle:
    encoder = build_encoder(net_cfg, seed + _SEED_ENC)
    generator = build_generator(net_cfg, seed + _SEED_GEN)
    discriminator = build_discriminator(net_cfg, seed + _SEED_DISC)
    net_params = list(encoder.parameters()) + list(generator.parameters())
    if joint:
        net_params += list(classifier.parameters())
    opt_net = torch.optim.Adam(net_params, lr=eta, betas=ADAM_BETAS)
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=eta, betas=ADAM_BETAS)
    return NetBundle(classifier, encoder, generator, discriminator, opt_net, opt_d)


def _set_lr(opt: torch.optim.Optimizer, lr: float):
    for group in opt.param_groups:
        group["lr"] = lr


def lr_schedule(iteration: int, cfg: TrainConfig) -> float:
    """Constant eta, then linear decay to 0 at total_iters, stepped every
    decay_interval_iters."""
    if iteration >= cfg.total_iters:
        return 0.0
    if iteration < cfg.decay_start_iter:
        return cfg.eta
    span = cfg.total_iters - cfg.decay_start_iter
    done = ((iteration - cfg.decay_start_iter) // cfg.decay_interval_iters) * cfg.decay_interval_iters
    return cfg.eta * max(0.0, 1.0 - done / span)


# ---------------------------------------------------------------------------
# classifier pre-training and style estimation
# ---------------------------------------------------------------------------

def classifier_accuracy(classifier: DomainClassifier, manifest: DatasetManifest,
                        chunk: int = 128) -> float:
    """Top-1 accuracy over every image in the manifest."""
    was_training = classifier.training
    classifier.eval()
    correct = total = 0
    with torch.no_grad():
        for domain in range(manifest.num_domains):
            paths = manifest.paths(domain)
            for start in range(0, len(paths), chunk):
                batch = _decode_paths(manifest, paths[start:start + chunk])
                _, logits = classifier(batch)
                correct += int((logits.argmax(dim=1) == domain).sum())
                total += logits.shape[0]
    if was_training:
        classifier.train()
    return correct / total


def _decode_paths(manifest: DatasetManifest, paths) -> torch.Tensor:
    from .data import decode_image, normalize_pixels
    arr = np.stack([
        normalize_pixels(decode_image(p, manifest.image_size, manifest.channels))
        for p in paths
    ])
    return torch.from_numpy(arr)


def pretrain_classifier(cfg: TrainConfig, manifest: DatasetManifest | None = None,
                        resume: str | Path | None = None) -> DomainClassifier:
    """Train the domain classifier per the pre-training loop, then freeze it.

    Stops early once training accuracy saturates (>= 99.9%) or plateaus for
    ``cls_patience`` evaluations.  The final training accuracy is logged and
    attached as ``classifier.train_accuracy``.
    """
    if manifest is None:
        manifest = load_manifest(cfg.data_root, cfg.net.image_size, cfg.net.channels)
    net_cfg = dataclasses.replace(cfg.net, num_domains=manifest.num_domains)
    classifier = build_classifier(net_cfg, cfg.seed + _SEED_CLS)
    opt = torch.optim.Adam(classifier.parameters(), lr=cfg.classifier_eta, betas=ADAM_BETAS)
    rng = np.random.default_rng(cfg.seed + _SEED_SAMPLER)
    start_iter = 0
    if resume is not None:
        payload = load_checkpoint(resume, expect_kind="classifier")
        classifier.load_state_dict(payload["nets"]["classifier"])
        opt.load_state_dict(payload["optimizers"]["cls"])
        rng.bit_generator.state = payload["rng_state"]
        start_iter = payload["iteration"]

    classifier.train()
    best_acc, stale = 0.0, 0
    it = start_iter - 1
    for it in range(start_iter, cfg.cls_iters):
        domain = int(rng.integers(0, manifest.num_domains))
        batch = sample_batch(manifest, domain, cfg.batch_size, rng)
        _, logits = classifier(batch.pixels)
        loss = losses.classification_loss(logits, batch.labels)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"classifier loss non-finite at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if (it + 1) % cfg.cls_eval_interval == 0:
            acc = classifier_accuracy(classifier, manifest)
            log.info("pretrain iter %d: loss %.4f train acc %.4f", it + 1, loss.item(), acc)
            if acc >= 0.999:
                break
            stale = 0 if acc > best_acc else stale + 1
            best_acc = max(best_acc, acc)
            if stale >= cfg.cls_patience:
                log.info("pretrain: accuracy plateaued at %.4f, stopping", best_acc)
                break

    acc = classifier_accuracy(classifier, manifest)
    log.info("pretrain finished: training accuracy %.4f", acc)
    freeze(classifier)
    classifier.train_accuracy = acc
    classifier.pretrain_state = {"iteration": it + 1, "opt": opt.state_dict(),
                                 "rng_state": rng.bit_generator.state}
    return classifier


def compute_domain_styles(classifier: DomainClassifier, manifest: DatasetManifest,
                          chunk: int = 128) -> StyleTable:
    """Mean extractor features per domain over all its images, in manifest
    order; recomputing with the same frozen extractor is bit-identical."""
    was_training = classifier.training
    classifier.eval()
    rows, counts = [], []
    with torch.no_grad():
        for domain in range(manifest.num_domains):
            paths = manifest.paths(domain)
            total = torch.zeros(classifier.cfg.feature_dim)
            for start in range(0, len(paths), chunk):
                feats = classifier.features(_decode_paths(manifest, paths[start:start + chunk]))
                total = total + feats.sum(dim=0)
            rows.append(total / len(paths))
            counts.append(len(paths))
    if was_training:
        classifier.train()
    return StyleTable(torch.stack(rows), counts, manifest.domain_names)


# ---------------------------------------------------------------------------
# translation update steps
# ---------------------------------------------------------------------------

NC_MODES = ("nonconditional", "no_im", "no_ds_fake", "ablation_f", "ablation_p")


def _finite_or_raise(tag: str, **values: torch.Tensor):
    bad = {k: float(v) for k, v in values.items() if not torch.isfinite(v)}
    if bad:
        clean = {k: float(v) for k, v in values.items()}
        raise TrainingDiverged(f"{tag}: non-finite losses {bad}; full dump {clean}")


def train_step_nc(bundle: NetBundle, styles: StyleTable, batch_a: ImageBatch,
                  target_domain: int, w: LossWeights, eta: float, *,
                  mode: str = "nonconditional", literal_cls_prob: bool = False,
                  batch_b: ImageBatch | None = None) -> losses.LossBreakdown:
    """One non-conditional update: discriminator first, then generator and
    encoder (plus the classifier in joint mode).

    ``batch_b`` is only consumed when the mirrored adversarial term is
    enabled; the literal objective uses the source batch alone.
    """
    if mode not in NC_MODES:
        raise ValueError(f"mode {mode!r} is not a non-conditional mode")
    source = int(batch_a.labels[0])
    if source == target_domain:
        raise ValueError("source and target domain must differ")
    joint = mode == "ablation_p"
    _set_lr(bundle.opt_net, eta)
    _set_lr(bundle.opt_d, eta)

    x_a = batch_a.pixels
    s_b = styles.row(target_domain)
    if joint:
        x_as = bundle.classifier.features(x_a)
    else:
        with torch.no_grad():
            x_as = bundle.classifier.features(x_a)

    feat_a = bundle.encoder(x_a)
    x_ab = bundle.generator(feat_a, s_b)
    if batch_b is not None:
        s_a = styles.row(source)
        feat_b = bundle.encoder(batch_b.pixels)
        x_ba = bundle.generator(feat_b, s_a)

    # discriminator update on -gan + lambda_f * ds_real
    adv_real, dfeat_real = bundle.discriminator(x_a)
    adv_fake_d, _ = bundle.discriminator(x_ab.detach())
    gan = losses.adversarial_loss(adv_real, adv_fake_d)
    if batch_b is not None:
        adv_real_b, dfeat_real_b = bundle.discriminator(batch_b.pixels)
        adv_fake_bd, _ = bundle.discriminator(x_ba.detach())
        gan = gan + losses.adversarial_loss(adv_real_b, adv_fake_bd)
    if mode == "ablation_f":
        ds_real = torch.zeros(())  # this variant drops the real feature loss
    else:
        ds_real = losses.ds_recon_real(dfeat_real, x_as.detach())
        if batch_b is not None:
            with torch.no_grad():
                x_bs = bundle.classifier.features(batch_b.pixels)
            ds_real = ds_real + losses.ds_recon_real(dfeat_real_b, x_bs)
    d_total = losses.total_d_loss(gan, ds_real, w)
    _finite_or_raise("nc d-step", gan=gan, ds_real=ds_real, d_total=d_total)
    bundle.opt_d.zero_grad()
    d_total.backward()
    bundle.opt_d.step()

    # generator/encoder update on the non-saturating total
    adv_fake, dfeat_fake = bundle.discriminator(x_ab)
    g_gan = losses.generator_adv_surrogate(adv_fake)
    if batch_b is not None:
        adv_fake_b, _ = bundle.discriminator(x_ba)
        g_gan = g_gan + losses.generator_adv_surrogate(adv_fake_b)
    if mode == "no_ds_fake":
        ds_fake = torch.zeros(())
    elif mode == "ablation_f":
        alpha_fake = bundle.classifier.features(x_ab)  # grads flow through the frozen extractor
        ds_fake = losses.ablation_feat_loss(alpha_fake, s_b)
    else:
        ds_fake = losses.ds_recon_fake(dfeat_fake, s_b)
    if mode == "no_im":
        im = torch.zeros(())
    else:
        x_aa = bundle.generator(feat_a, x_as)
        x_aba = bundle.generator(bundle.encoder(x_ab), x_as)
        im = losses.image_recon_loss(x_a, x_aa, x_aba)
    if joint:
        _, logits = bundle.classifier(x_a)
        cls = losses.joint_cls_term(logits, batch_a.labels, literal_cls_prob)
        net_total = losses.joint_train_net_loss(g_gan, ds_fake, im, cls, w)
    else:
        cls = torch.zeros(())
        net_total = losses.total_net_loss(g_gan, ds_fake, im, w)
    _finite_or_raise("nc net-step", ds_fake=ds_fake, im=im, cls=cls, net_total=net_total)
    bundle.opt_net.zero_grad()
    net_total.backward()
    bundle.opt_net.step()

    gan_f, ds_fake_f, ds_real_f, im_f = float(gan), float(ds_fake), float(ds_real), float(im)
    return losses.LossBreakdown(
        gan=gan_f,
        ds_fake=ds_fake_f,
        ds_real=ds_real_f,
        im=im_f,
        total_net=gan_f + w.lambda_f * ds_fake_f + w.lambda_im * im_f,
        total_d=-gan_f + w.lambda_f * ds_real_f,
        cls=float(cls),
    ).validate(w)


def train_step_c(bundle: NetBundle, batch_a: ImageBatch, batch_b: ImageBatch,
                 w: LossWeights, eta: float) -> losses.LossBreakdown:
    """One conditional update: both directions, all four reconstructions."""
    if len(batch_a) != len(batch_b):
        raise ValueError(f"conditional batches must match: {len(batch_a)} vs {len(batch_b)}")
    _set_lr(bundle.opt_net, eta)
    _set_lr(bundle.opt_d, eta)

    x_a, x_b = batch_a.pixels, batch_b.pixels
    with torch.no_grad():
        x_as = bundle.classifier.features(x_a)
        x_bs = bundle.classifier.features(x_b)
    feat_a = bundle.encoder(x_a)
    feat_b = bundle.encoder(x_b)
    x_ab = bundle.generator(feat_a, x_bs)
    x_ba = bundle.generator(feat_b, x_as)

    adv_ra, dfeat_ra = bundle.discriminator(x_a)
    adv_rb, dfeat_rb = bundle.discriminator(x_b)
    adv_fa, _ = bundle.discriminator(x_ab.detach())
    adv_fb, _ = bundle.discriminator(x_ba.detach())
    gan = losses.adversarial_loss(adv_ra, adv_fa) + losses.adversarial_loss(adv_rb, adv_fb)
    ds_real = losses.ds_recon_real(dfeat_ra, x_as) + losses.ds_recon_real(dfeat_rb, x_bs)
    d_total = losses.total_d_loss(gan, ds_real, w)
    _finite_or_raise("c d-step", gan=gan, ds_real=ds_real, d_total=d_total)
    bundle.opt_d.zero_grad()
    d_total.backward()
    bundle.opt_d.step()

    adv_fa2, dfeat_fa2 = bundle.discriminator(x_ab)
    adv_fb2, dfeat_fb2 = bundle.discriminator(x_ba)
    g_gan = losses.generator_adv_surrogate(adv_fa2) + losses.generator_adv_surrogate(adv_fb2)
    ds_fake = losses.ds_recon_fake(dfeat_fa2, x_bs) + losses.ds_recon_fake(dfeat_fb2, x_as)
    x_aa = bundle.generator(feat_a, x_as)
    x_bb = bundle.generator(feat_b, x_bs)
    x_aba = bundle.generator(bundle.encoder(x_ab), x_as)
    x_bab = bundle.generator(bundle.encoder(x_ba), x_bs)
    im = (losses.image_recon_loss(x_a, x_aa, x_aba)
          + losses.image_recon_loss(x_b, x_bb, x_bab))
    net_total = losses.total_net_loss(g_gan, ds_fake, im, w)
    _finite_or_raise("c net-step", ds_fake=ds_fake, im=im, net_total=net_total)
    bundle.opt_net.zero_grad()
    net_total.backward()
    bundle.opt_net.step()

    gan_f, ds_fake_f, ds_real_f, im_f = float(gan), float(ds_fake), float(ds_real), float(im)
    return losses.LossBreakdown(
        gan=gan_f,
        ds_fake=ds_fake_f,
        ds_real=ds_real_f,
        im=im_f,
        total_net=gan_f + w.lambda_f * ds_fake_f + w.lambda_im * im_f,
        total_d=-gan_f + w.lambda_f * ds_real_f,
    ).validate(w)


# ---------------------------------------------------------------------------
# the full loop
# ---------------------------------------------------------------------------

def _load_frozen_classifier(path: str | Path) -> tuple[DomainClassifier, StyleTable | None]:
    payload = load_checkpoint(path, expect_kind="classifier")
    net_cfg = NetConfig(**{**payload["net_config"],
                           "image_size": tuple(payload["net_config"]["image_size"])})
    classifier = DomainClassifier(net_cfg)
    classifier.load_state_dict(payload["nets"]["classifier"])
    freeze(classifier)
    styles = None
    if payload.get("styles") is not None:
        s = payload["styles"]
        styles = StyleTable(s["styles"], s["counts"], s["names"])
    return classifier, styles


def _check_geometry(cls_cfg: NetConfig, net_cfg: NetConfig):
    mismatches = [
        name for name in ("image_size", "channels", "feature_dim")
        if getattr(cls_cfg, name) != getattr(net_cfg, name)
    ]
    if mismatches:
        raise ValueError(
            f"classifier/translator geometry mismatch on {mismatches}: "
            f"classifier {cls_cfg} vs translator {net_cfg}"
        )


def save_classifier_checkpoint(path: str | Path, classifier: DomainClassifier,
                               styles: StyleTable, cfg: TrainConfig) -> Path:
    state = getattr(classifier, "pretrain_state", {})
    return save_checkpoint(path, {
        "kind": "classifier",
        "iteration": state.get("iteration", 0),
        "net_config": _net_config_dict(classifier.cfg),
        "nets": {"classifier": classifier.state_dict()},
        "optimizers": {"cls": state.get("opt", {})},
        "rng_state": state.get("rng_state"),
        "styles": {"styles": styles.styles, "counts": styles.counts, "names": styles.domain_names},
        "train_accuracy": getattr(classifier, "train_accuracy", None),
        "train_config": config_to_dict(cfg),
    })


def _net_config_dict(net_cfg: NetConfig) -> dict:
    d = dataclasses.asdict(net_cfg)
    d["image_size"] = list(net_cfg.image_size)
    return d


def train(cfg: TrainConfig, resume: str | Path | None = None) -> Path:
    """Run the translation training loop end to end; returns the final
    checkpoint path.  Resuming from a checkpoint continues the loss trace
    bit-identically under the same seed stream."""
    manifest = load_manifest(cfg.data_root, cfg.net.image_size, cfg.net.channels)
    conditional = cfg.mode == "conditional"
    joint = cfg.mode == "ablation_p"

    if joint:
        net_cfg = dataclasses.replace(cfg.net, num_domains=manifest.num_domains)
        classifier = build_classifier(net_cfg, cfg.seed + _SEED_CLS)
    else:
        if not cfg.classifier_ckpt:
            raise ValueError("no classifier checkpoint configured: run pretrain first")
        classifier, _ = _load_frozen_classifier(cfg.classifier_ckpt)
        _check_geometry(classifier.cfg, cfg.net)
        net_cfg = dataclasses.replace(cfg.net, num_domains=classifier.cfg.num_domains)

    bundle = build_bundle(net_cfg, classifier, cfg.eta, cfg.seed, joint=joint)
    styles = compute_domain_styles(classifier, manifest)
    if not joint:
        # frozen extractor makes the style table stable; refresh would be a no-op
        recheck = compute_domain_styles(classifier, manifest)
        assert torch.equal(styles.styles, recheck.styles), "style table not bit-stable"

    rng = np.random.default_rng(cfg.seed + _SEED_SAMPLER)
    start_iter = 0
    best_im = float("inf")
    if resume is not None:
        payload = load_checkpoint(resume, expect_kind="translation")
        for name, net in (("classifier", bundle.classifier), ("encoder", bundle.encoder),
                          ("generator", bundle.generator), ("discriminator", bundle.discriminator)):
            net.load_state_dict(payload["nets"][name])
        bundle.opt_net.load_state_dict(payload["optimizers"]["net"])
        bundle.opt_d.load_state_dict(payload["optimizers"]["d"])
        rng.bit_generator.state = payload["rng_state"]
        start_iter = payload["iteration"]
        best_im = payload.get("best_im", float("inf"))
        s = payload["styles"]
        styles = StyleTable(s["styles"], s["counts"], s["names"])

    ckpt_dir = Path(cfg.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = Path(cfg.log_path)
    log_path.parent.mkdir(parents=True, exist_ok=True)

    frozen_checksum = None if joint else parameter_checksum(bundle.classifier)

    def save(iteration: int, tag: str | None = None) -> Path:
        name = tag or f"ckpt_{iteration:07d}.pt"
        path = save_checkpoint(ckpt_dir / name, {
            "kind": "translation",
            "iteration": iteration,
            "mode": cfg.mode,
            "train_config": config_to_dict(cfg),
            "net_config": _net_config_dict(net_cfg),
            "classifier_config": _net_config_dict(bundle.classifier.cfg),
            "nets": {
                "classifier": bundle.classifier.state_dict(),
                "encoder": bundle.encoder.state_dict(),
                "generator": bundle.generator.state_dict(),
                "discriminator": bundle.discriminator.state_dict(),
            },
            "optimizers": {"net": bundle.opt_net.state_dict(), "d": bundle.opt_d.state_dict()},
            "styles": {"styles": styles.styles, "counts": styles.counts,
                       "names": styles.domain_names},
            "rng_state": rng.bit_generator.state,
            "best_im": best_im,
        })
        if tag is None:
            rotate_checkpoints(ckpt_dir, cfg.keep_checkpoints)
        return path

    with open(log_path, "a") as log_file:
        for it in range(start_iter, cfg.total_iters):
            lr = lr_schedule(it, cfg)
            pair = rng.choice(manifest.num_domains, size=2, replace=False)
            dom_a, dom_b = int(pair[0]), int(pair[1])
            if conditional:
                if cfg.unlabeled_pairs:
                    batch_a = sample_unlabeled_batch(manifest, cfg.batch_size, rng)
                    batch_b = sample_unlabeled_batch(manifest, cfg.batch_size, rng)
                else:
                    batch_a = sample_batch(manifest, dom_a, cfg.batch_size, rng)
                    batch_b = sample_batch(manifest, dom_b, cfg.batch_size, rng)
                breakdown = train_step_c(bundle, batch_a, batch_b, cfg.weights, lr)
            else:
                batch_a = sample_batch(manifest, dom_a, cfg.batch_size, rng)
                batch_b = None
                if cfg.symmetric_gan:
                    batch_b = sample_batch(manifest, dom_b, cfg.batch_size, rng)
                breakdown = train_step_nc(
                    bundle, styles, batch_a, dom_b, cfg.weights, lr,
                    mode=cfg.mode, literal_cls_prob=cfg.literal_cls_prob, batch_b=batch_b,
                )
            if joint and (it + 1) % cfg.style_refresh_interval == 0:
                styles = compute_domain_styles(bundle.classifier, manifest)
            if (it + 1) % cfg.log_interval == 0 or it == start_iter:
                breakdown.validate(cfg.weights)
                log_file.write(json.dumps(breakdown.as_log_record(it, lr)) + "\n")
                log_file.flush()
            if (it + 1) % cfg.checkpoint_interval == 0 and (it + 1) < cfg.total_iters:
                if breakdown.im > 0 and breakdown.im < best_im:
                    best_im = breakdown.im
                    save(it + 1, tag="best.pt")
                save(it + 1)

    if frozen_checksum is not None and parameter_checksum(bundle.classifier) != frozen_checksum:
        raise RuntimeError("frozen classifier parameters changed during training")
    if joint:
        styles = compute_domain_styles(bundle.classifier, manifest)
    final = save(cfg.total_iters, tag="final.pt")
    log.info("training finished at iteration %d -> %s", cfg.total_iters, final)
    return final


def resolved_train_config(payload_or_path) -> TrainConfig:
    """TrainConfig stored inside a checkpoint archive."""
    payload = payload_or_path
    if not isinstance(payload, dict):
        payload = load_checkpoint(payload_or_path)
    return config_from_dict(payload["train_config"])
