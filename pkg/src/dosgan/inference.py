"""Post-training use of checkpoints: translation, reconstruction, style
interpolation and extractor transfer.

Every operation here is pure: frozen parameters, no side effects on the
handle, bit-identical outputs for identical inputs.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .checkpoint import checkpoint_fingerprint, load_checkpoint
from .config import NetConfig, TrainConfig
from .data import DatasetManifest, decode_image, denormalize_pixels, normalize_pixels
from .networks import ContentEncoder, DomainClassifier, Generator, freeze
from .training import StyleTable, _check_geometry


@dataclass(frozen=True)
class TranslatorHandle:
    """Frozen extractor/encoder/generator plus the domain-style table."""

    classifier: DomainClassifier
    encoder: ContentEncoder
    generator: Generator
    styles: StyleTable
    net_config: NetConfig
    mode: str
    fingerprint: str

    @property
    def num_domains(self) -> int:
        return self.styles.styles.shape[0]


def load_translator(ckpt_path: str | Path) -> TranslatorHandle:
    payload = load_checkpoint(ckpt_path, expect_kind="translation")
    net_cfg = NetConfig(**{**payload["net_config"],
                           "image_size": tuple(payload["net_config"]["image_size"])})
    cls_cfg = NetConfig(**{**payload["classifier_config"],
                           "image_size": tuple(payload["classifier_config"]["image_size"])})
    classifier = DomainClassifier(cls_cfg)
    classifier.load_state_dict(payload["nets"]["classifier"])
    encoder = ContentEncoder(net_cfg)
    encoder.load_state_dict(payload["nets"]["encoder"])
    generator = Generator(net_cfg)
    generator.load_state_dict(payload["nets"]["generator"])
    for net in (classifier, encoder, generator):
        freeze(net)
    s = payload["styles"]
    return TranslatorHandle(
        classifier=classifier,
        encoder=encoder,
        generator=generator,
        styles=StyleTable(s["styles"], s["counts"], s["names"]),
        net_config=net_cfg,
        mode=payload.get("mode", "nonconditional"),
        fingerprint=checkpoint_fingerprint(ckpt_path),
    )


def _as_batch(image: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if image.ndim == 3:
        return image.unsqueeze(0), True
    return image, False


def _maybe_squeeze(out: torch.Tensor, squeeze: bool) -> torch.Tensor:
    return out.squeeze(0) if squeeze else out


def _generate(h: TranslatorHandle, image: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
    batch, squeeze = _as_batch(image)
    with torch.no_grad():
        out = h.generator(h.encoder(batch), style)
    return _maybe_squeeze(out, squeeze)


def translate(h: TranslatorHandle, image: torch.Tensor, target_domain: int) -> torch.Tensor:
    """Translate using the target domain's mean style from the table."""
    if not 0 <= target_domain < h.num_domains:
        raise ValueError(f"target domain {target_domain} out of range [0, {h.num_domains})")
    return _generate(h, image, h.styles.row(target_domain))


def extract_style(h: TranslatorHandle, image: torch.Tensor) -> torch.Tensor:
    batch, squeeze = _as_batch(image)
    with torch.no_grad():
        feats = h.classifier.features(batch)
    return _maybe_squeeze(feats, squeeze)


def translate_conditional(h: TranslatorHandle, image: torch.Tensor,
                          cond_image: torch.Tensor) -> torch.Tensor:
    """Translate with the style of one specific conditional image."""
    cond_batch, _ = _as_batch(cond_image)
    with torch.no_grad():
        style = h.classifier.features(cond_batch)
    if image.ndim == 3 and style.shape[0] == 1:
        style = style[0]
    return _generate(h, image, style)


def reconstruct(h: TranslatorHandle, image: torch.Tensor) -> torch.Tensor:
    """Self-reconstruction: regenerate the image from its own features."""
    return translate_conditional(h, image, image)


def interpolate(h: TranslatorHandle, image: torch.Tensor, cond1: torch.Tensor,
                cond2: torch.Tensor, steps: int) -> list[torch.Tensor]:
    """Outputs along the straight line between the two conditional styles.

    Endpoints reuse the exact endpoint styles, so frames 0 and steps-1 are
    bit-equal to the two conditional translations.
    """
    if steps < 2:
        raise ValueError(f"steps must be >= 2, got {steps}")
    s1 = extract_style(h, cond1)
    s2 = extract_style(h, cond2)
    if torch.equal(s1, s2):
        frame = _generate(h, image, s1)
        return [frame.clone() for _ in range(steps)]
    frames = []
    for i in range(steps):
        t = i / (steps - 1)
        if i == 0:
            style = s1
        elif i == steps - 1:
            style = s2
        else:
            style = (1.0 - t) * s1 + t * s2
        frames.append(_generate(h, image, style))
    return frames


def transfer_extractor(classifier_ckpt: str | Path, new_manifest: DatasetManifest,
                       train_cfg: TrainConfig) -> TrainConfig:
    """Conditional-mode config reusing a foreign frozen extractor.

    The new dataset needs no domain labels: conditional styles come from the
    extractor applied to the conditional images, so training pairs are drawn
    from the unlabeled pool.
    """
    payload = load_checkpoint(classifier_ckpt, expect_kind="classifier")
    cls_cfg = NetConfig(**{**payload["net_config"],
                           "image_size": tuple(payload["net_config"]["image_size"])})
    net_cfg = dataclasses.replace(train_cfg.net,
                                  image_size=cls_cfg.image_size,
                                  channels=cls_cfg.channels,
                                  feature_dim=cls_cfg.feature_dim)
    if tuple(new_manifest.image_size) != cls_cfg.image_size \
            or new_manifest.channels != cls_cfg.channels:
        raise ValueError(
            f"extractor geometry {cls_cfg.image_size}x{cls_cfg.channels}ch incompatible with "
            f"manifest {tuple(new_manifest.image_size)}x{new_manifest.channels}ch"
        )
    _check_geometry(cls_cfg, net_cfg)
    return dataclasses.replace(
        train_cfg,
        mode="conditional",
        net=net_cfg,
        data_root=new_manifest.root_path,
        classifier_ckpt=str(classifier_ckpt),
        unlabeled_pairs=True,
    )


# ---------------------------------------------------------------------------
# image file I/O
# ---------------------------------------------------------------------------

def load_image(path: str | Path, h: TranslatorHandle) -> torch.Tensor:
    arr = decode_image(str(path), h.net_config.image_size, h.net_config.channels)
    return torch.from_numpy(normalize_pixels(arr))


def save_image(tensor: torch.Tensor, path: str | Path):
    """Denormalize to 8-bit (round-half-even) and write a PNG."""
    arr = denormalize_pixels(tensor.detach().cpu().numpy())
    if arr.shape[0] == 1:
        Image.fromarray(arr[0]).save(path)
    else:
        Image.fromarray(arr.transpose(1, 2, 0)).save(path)


def save_frame_grid(frames: list[torch.Tensor], path: str | Path):
    """Horizontally concatenated strip of frames."""
    arrs = [denormalize_pixels(f.detach().cpu().numpy()) for f in frames]
    strip = np.concatenate(arrs, axis=2)
    if strip.shape[0] == 1:
        Image.fromarray(strip[0]).save(path)
    else:
        Image.fromarray(strip.transpose(1, 2, 0)).save(path)


def write_results_manifest(path: str | Path, records: list[dict]):
    Path(path).write_text(json.dumps(records, indent=2) + "\n")
