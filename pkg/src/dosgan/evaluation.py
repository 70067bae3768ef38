"""Quantitative protocols: top-k accuracy of translated images, per-group
classification error rates, FID over feature sets, and PSNR/SSIM against
paired ground truth.

At full scale FID features come from a standard pre-trained embedding; at
desk scale the frozen domain classifier's features are used instead.  FID
values are only comparable within one embedding choice, so every report
embeds the evaluator checkpoint fingerprint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from skimage.metrics import structural_similarity

from .checkpoint import checkpoint_fingerprint
from .data import DatasetManifest
from .inference import TranslatorHandle, load_translator, translate, translate_conditional
from .networks import DomainClassifier
from .training import _decode_paths, _load_frozen_classifier

PSNR_CAP_DB = 99.0  # reported for an exact match (MSE = 0)

PROTOCOLS = ("identity_topk", "attribute_error", "fid_set", "paired_psnr_ssim")


@dataclass(frozen=True)
class GaussianStats:
    """Moments of a feature set, for the Fréchet distance."""

    mean: np.ndarray
    covariance: np.ndarray
    sample_count: int


@dataclass
class MetricReport:
    protocol: str
    values: dict
    sample_counts: dict
    config_fingerprint: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "protocol": self.protocol,
            "values": self.values,
            "sample_counts": self.sample_counts,
            "config_fingerprint": self.config_fingerprint,
        }, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        lines = ["metric,value,samples"]
        for key in sorted(self.values):
            n = self.sample_counts.get(key, self.sample_counts.get("total", ""))
            lines.append(f"{key},{self.values[key]},{n}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# metric primitives
# ---------------------------------------------------------------------------

def topk_accuracy(classifier: DomainClassifier, images: torch.Tensor,
                  true_targets: torch.Tensor, k: int, chunk: int = 128) -> float:
    """Fraction of images whose true target is among the k largest logits."""
    n_classes = classifier.cfg.num_domains
    if k > n_classes:
        raise ValueError(f"k={k} exceeds the {n_classes} classes")
    classifier.eval()
    hits = 0
    with torch.no_grad():
        for start in range(0, images.shape[0], chunk):
            _, logits = classifier(images[start:start + chunk])
            topk = logits.topk(k, dim=1).indices
            hits += int((topk == true_targets[start:start + chunk, None]).any(dim=1).sum())
    return hits / images.shape[0]


def classification_error_rate(classifier: DomainClassifier, images: torch.Tensor,
                              target_labels: torch.Tensor,
                              group_names: list[str] | None = None) -> dict:
    """1 - top-1 accuracy, overall and per target group."""
    classifier.eval()
    with torch.no_grad():
        preds = []
        for start in range(0, images.shape[0], 128):
            _, logits = classifier(images[start:start + 128])
            preds.append(logits.argmax(dim=1))
        preds = torch.cat(preds)
    wrong = preds != target_labels
    out = {"overall": float(wrong.float().mean())}
    for group in sorted(set(target_labels.tolist())):
        mask = target_labels == group
        name = group_names[group] if group_names else str(group)
        out[f"group_{name}"] = float(wrong[mask].float().mean())
    return out


def gaussian_stats(features: np.ndarray | torch.Tensor) -> GaussianStats:
    """Sample mean and unbiased sample covariance of row features."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise ValueError(f"need at least 2 feature rows, got shape {feats.shape}")
    mean = feats.mean(axis=0)
    centered = feats - mean
    cov = centered.T @ centered / (feats.shape[0] - 1)
    return GaussianStats(mean=mean, covariance=cov, sample_count=feats.shape[0])


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(a: GaussianStats, b: GaussianStats) -> float:
    """Fréchet distance between the two Gaussian fits.

    The cross trace uses tr((Sa Sb)^1/2) = tr((Sa^1/2 Sb Sa^1/2)^1/2), whose
    inner matrix is symmetric; tiny negative eigenvalues are clipped at 0.
    """
    for stats in (a, b):
        if not (np.isfinite(stats.mean).all() and np.isfinite(stats.covariance).all()):
            raise ValueError("non-finite Gaussian stats")
    diff = a.mean - b.mean
    sqrt_a = _psd_sqrt(a.covariance)
    inner = sqrt_a @ b.covariance @ sqrt_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    cross = np.sqrt(np.clip(vals, 0.0, None)).sum()
    value = float(diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * cross)
    return max(value, 0.0)


def psnr(a: np.ndarray | torch.Tensor, b: np.ndarray | torch.Tensor, peak: float) -> float:
    """10 log10(peak^2 / MSE) in dB; an exact match reports the cap."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(peak * peak / mse))


def ssim(a: np.ndarray | torch.Tensor, b: np.ndarray | torch.Tensor,
         data_range: float = 2.0) -> float:
    """Mean structural similarity, 11x11 Gaussian window, K1/K2 = 0.01/0.03.

    Accepts [C, H, W] or [H, W] arrays; default data range matches the
    [-1, 1] pixel normalization.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    kwargs = dict(
        win_size=11, gaussian_weights=True, sigma=1.5,
        use_sample_covariance=False, K1=0.01, K2=0.03, data_range=data_range,
    )
    if a.ndim == 3:
        kwargs["channel_axis"] = 0
    return float(structural_similarity(a, b, **kwargs))


# ---------------------------------------------------------------------------
# end-to-end protocols
# ---------------------------------------------------------------------------

def _features_of(classifier: DomainClassifier, images: torch.Tensor, chunk: int = 128) -> np.ndarray:
    classifier.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, images.shape[0], chunk):
            outs.append(classifier.features(images[start:start + chunk]))
    return torch.cat(outs).numpy()


def _load_test_images(manifest: DatasetManifest) -> tuple[torch.Tensor, torch.Tensor]:
    pixels, labels = [], []
    for domain in range(manifest.num_domains):
        paths = manifest.paths(domain)
        pixels.append(_decode_paths(manifest, paths))
        labels.append(torch.full((len(paths),), domain, dtype=torch.long))
    return torch.cat(pixels), torch.cat(labels)


def _random_targets(labels: torch.Tensor, num_domains: int, rng: np.random.Generator) -> torch.Tensor:
    """A random target domain per item, never the source domain."""
    offsets = rng.integers(1, num_domains, size=len(labels))
    return (labels + torch.from_numpy(offsets)) % num_domains


def _translate_to_targets(h: TranslatorHandle, images: torch.Tensor, labels: torch.Tensor,
                          targets: torch.Tensor, manifest: DatasetManifest,
                          rng: np.random.Generator, chunk: int = 64) -> torch.Tensor:
    """Translate each image into its assigned target domain.

    Conditional checkpoints draw a random conditional image from the target
    domain; non-conditional ones use the style table.
    """
    outs = []
    if h.mode == "conditional":
        cond_idx = [int(rng.integers(0, len(manifest.paths(int(t))))) for t in targets]
        for i in range(images.shape[0]):
            t = int(targets[i])
            cond = _decode_paths(manifest, [manifest.paths(t)[cond_idx[i]]])
            outs.append(translate_conditional(h, images[i:i + 1], cond))
        return torch.cat(outs)
    for start in range(0, images.shape[0], chunk):
        for t in sorted(set(targets[start:start + chunk].tolist())):
            pass  # targets differ per item; translate per unique target below
        block = images[start:start + chunk]
        block_t = targets[start:start + chunk]
        out = torch.empty_like(block)
        for t in sorted(set(block_t.tolist())):
            mask = block_t == t
            out[mask] = translate(h, block[mask], int(t))
        outs.append(out)
    return torch.cat(outs)


def evaluate_translation(ckpt: str | Path, test_manifest: DatasetManifest, protocol: str,
                         evaluator_ckpt: str | Path, seed: int = 0,
                         ks: tuple[int, ...] = (1, 5), out_dir: str | Path | None = None,
                         content_domain: str | None = None) -> MetricReport:
    """Run one quantitative protocol end to end and assemble the report."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}, expected one of {PROTOCOLS}")
    h = load_translator(ckpt)
    evaluator, _ = _load_frozen_classifier(evaluator_ckpt)
    rng = np.random.default_rng(seed)
    fingerprint = {
        "checkpoint": h.fingerprint,
        "evaluator": checkpoint_fingerprint(evaluator_ckpt),
        "seed": seed,
    }

    if protocol == "paired_psnr_ssim":
        values, counts = _paired_protocol(h, test_manifest, evaluator, content_domain)
    else:
        images, labels = _load_test_images(test_manifest)
        targets = _random_targets(labels, test_manifest.num_domains, rng)
        translated = _translate_to_targets(h, images, labels, targets, test_manifest, rng)
        counts = {"total": images.shape[0]}
        if protocol == "identity_topk":
            values = {}
            for k in ks:
                k_eff = min(k, evaluator.cfg.num_domains)
                values[f"top{k}"] = topk_accuracy(evaluator, translated, targets, k_eff)
        elif protocol == "attribute_error":
            values = classification_error_rate(evaluator, translated, targets,
                                               test_manifest.domain_names)
        else:  # fid_set
            values = {}
            fids = []
            for domain in range(test_manifest.num_domains):
                real = _decode_paths(test_manifest, test_manifest.paths(domain))
                fake = translated[targets == domain]
                if fake.shape[0] < 2:
                    continue
                d = fid(gaussian_stats(_features_of(evaluator, real)),
                        gaussian_stats(_features_of(evaluator, fake)))
                values[f"fid_{test_manifest.domain_names[domain]}"] = d
                counts[f"fid_{test_manifest.domain_names[domain]}"] = int(fake.shape[0])
                fids.append(d)
            values["fid_mean"] = float(np.mean(fids))

    report = MetricReport(protocol=protocol, values=values, sample_counts=counts,
                          config_fingerprint=fingerprint)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"report_{protocol}.json").write_text(report.to_json() + "\n")
    return report


def _paired_protocol(h: TranslatorHandle, manifest: DatasetManifest,
                     evaluator: DomainClassifier, content_domain: str | None) -> tuple[dict, dict]:
    """Paired protocol: one domain supplies content, the other ground truth;
    files pair by basename.  Outputs are compared to the ground truth."""
    if manifest.num_domains != 2:
        raise ValueError(
            f"paired protocol needs exactly 2 domains, got {manifest.num_domains}"
        )
    names = manifest.domain_names
    content_idx = 0 if content_domain is None else names.index(content_domain)
    style_idx = 1 - content_idx
    by_base = {Path(p).name: p for p in manifest.paths(style_idx)}
    pairs = [(p, by_base[Path(p).name]) for p in manifest.paths(content_idx)
             if Path(p).name in by_base]
    if not pairs:
        raise ValueError("paired protocol found no basename-matched pairs")
    low, high = manifest.normalization
    peak = high - low
    psnrs, ssims, outs, gts = [], [], [], []
    for content_path, gt_path in pairs:
        content = _decode_paths(manifest, [content_path])
        gt = _decode_paths(manifest, [gt_path])
        out = translate_conditional(h, content, gt)
        psnrs.append(psnr(out.numpy(), gt.numpy(), peak=peak))
        ssims.append(ssim(out[0].numpy(), gt[0].numpy(), data_range=peak))
        outs.append(out)
        gts.append(gt)
    out_feats = _features_of(evaluator, torch.cat(outs))
    gt_feats = _features_of(evaluator, torch.cat(gts))
    values = {
        "psnr_db": float(np.mean(psnrs)),
        "ssim": float(np.mean(ssims)),
        "fid": fid(gaussian_stats(gt_feats), gaussian_stats(out_feats)),
    }
    return values, {"total": len(pairs)}
