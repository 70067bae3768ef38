"""The four networks: domain classifier, content encoder, generator, and the
dual-head patch discriminator.

Widths double per stride-2 stage, capped at 8x the base width.  The encoder
and generator use InstanceNorm + ReLU; the classifier and discriminator
trunks use LeakyReLU with no normalization.  All weights initialize to
N(0, 0.02) with zero biases (norm scales start at 1), deterministically
under a seed.
"""

from __future__ import annotations

import hashlib

import torch
from torch import nn

from .config import NetConfig


def _doubling_widths(prev: int, n: int, cap: int) -> list[int]:
    """Output widths of n successive stages, doubling from prev, capped."""
    outs = []
    for _ in range(n):
        prev = min(prev * 2, cap)
        outs.append(prev)
    return outs


class ResidualBlock(nn.Module):
    """conv3-IN-ReLU-conv3-IN with an identity skip."""

    def __init__(self, dim: int):
        super().__init__()
        self.main = nn.Sequential(
            nn.Conv2d(dim, dim, kernel_size=3, stride=1, padding=1),
            nn.InstanceNorm2d(dim, affine=True, track_running_stats=False),
            nn.ReLU(inplace=True),
            nn.Conv2d(dim, dim, kernel_size=3, stride=1, padding=1),
            nn.InstanceNorm2d(dim, affine=True, track_running_stats=False),
        )

    def forward(self, x):
        return x + self.main(x)


class DomainClassifier(nn.Module):
    """Stride-2 conv trunk with a feature head (the domain-specific feature
    extractor) and a linear classification readout on top of it.

    The feature head is the second-to-last layer: a 1x1 conv to
    ``feature_dim`` channels whose spatial mean is the feature vector; the
    logits are a 1x1 conv over that feature grid, spatially averaged.  The
    features carry no nonlinearity.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.frozen = False
        widths = _doubling_widths(cfg.base_width, cfg.downsample_stages, 8 * cfg.base_width)
        layers: list[nn.Module] = [
            # stride-1 4x4 stem; even kernel needs asymmetric padding to keep size
            nn.ZeroPad2d((1, 2, 1, 2)),
            nn.Conv2d(cfg.channels, cfg.base_width, kernel_size=4, stride=1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        w_in = cfg.base_width
        for w_out in widths:
            layers += [
                nn.Conv2d(w_in, w_out, kernel_size=4, stride=2, padding=1),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            w_in = w_out
        self.trunk = nn.Sequential(*layers)
        self.feature_head = nn.Conv2d(w_in, cfg.feature_dim, kernel_size=1)
        self.logit_head = nn.Conv2d(cfg.feature_dim, cfg.num_domains, kernel_size=1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        self._check_input(x)
        grid = self.feature_head(self.trunk(x))
        styles = grid.mean(dim=(2, 3))
        logits = self.logit_head(grid).mean(dim=(2, 3))
        return styles, logits

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """The domain-specific feature vector [K, F]."""
        return self.forward(x)[0]

    def _check_input(self, x):
        h, w = self.cfg.image_size
        if x.ndim != 4 or x.shape[1] != self.cfg.channels or x.shape[2] != h or x.shape[3] != w:
            raise ValueError(
                f"classifier expects [K, {self.cfg.channels}, {h}, {w}], got {tuple(x.shape)}"
            )


class ContentEncoder(nn.Module):
    """Domain-independent feature extractor: 7x7 stem, two stride-2 convs,
    then residual blocks.  Output is [K, 4*base_width, H/4, W/4]."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.base_width
        layers: list[nn.Module] = [
            nn.Conv2d(cfg.channels, w, kernel_size=7, stride=1, padding=3),
            nn.InstanceNorm2d(w, affine=True, track_running_stats=False),
            nn.ReLU(inplace=True),
            nn.Conv2d(w, 2 * w, kernel_size=4, stride=2, padding=1),
            nn.InstanceNorm2d(2 * w, affine=True, track_running_stats=False),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * w, 4 * w, kernel_size=4, stride=2, padding=1),
            nn.InstanceNorm2d(4 * w, affine=True, track_running_stats=False),
            nn.ReLU(inplace=True),
        ]
        layers += [ResidualBlock(4 * w) for _ in range(cfg.residual_blocks)]
        self.main = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.channels:
            raise ValueError(f"encoder expects [K, {self.cfg.channels}, H, W], got {tuple(x.shape)}")
        return self.main(x)


class Generator(nn.Module):
    """Merges a style vector into the content map and decodes an image.

    The style vector is projected by a fully-connected layer to the content
    channel width and added channel-wise (broadcast over space); the sum runs
    through residual blocks, two stride-2 transposed convs, and a 7x7 output
    conv with tanh, so pixels stay in [-1, 1].
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        cw = cfg.trunk_width
        self.style_proj = nn.Linear(cfg.feature_dim, cw)
        self.blocks = nn.Sequential(*[ResidualBlock(cw) for _ in range(cfg.residual_blocks)])
        self.decode = nn.Sequential(
            nn.ConvTranspose2d(cw, cw // 2, kernel_size=3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(cw // 2, affine=True, track_running_stats=False),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(cw // 2, cw // 4, kernel_size=3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(cw // 4, affine=True, track_running_stats=False),
            nn.ReLU(inplace=True),
            nn.Conv2d(cw // 4, cfg.channels, kernel_size=7, stride=1, padding=3),
            nn.Tanh(),
        )

    def forward(self, feat: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        if style.ndim == 1:
            style = style.unsqueeze(0).expand(feat.shape[0], -1)
        if style.shape[-1] != self.cfg.feature_dim:
            raise ValueError(
                f"style width {style.shape[-1]} != feature_dim {self.cfg.feature_dim}"
            )
        if style.shape[0] != feat.shape[0]:
            raise ValueError(f"style batch {style.shape[0]} != content batch {feat.shape[0]}")
        h = feat + self.style_proj(style)[:, :, None, None]
        return self.decode(self.blocks(h))


class PatchDiscriminator(nn.Module):
    """PatchGAN trunk with an adversarial head (per-patch probability) and a
    feature-prediction head emitting ``feature_dim`` values per image."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.base_width] + _doubling_widths(
            cfg.base_width, cfg.downsample_stages - 1, 8 * cfg.base_width
        )
        layers: list[nn.Module] = []
        w_in = cfg.channels
        for w_out in widths:
            layers += [
                nn.Conv2d(w_in, w_out, kernel_size=4, stride=2, padding=1),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            w_in = w_out
        self.trunk = nn.Sequential(*layers)
        self.adv_head = nn.Conv2d(w_in, 1, kernel_size=3, stride=1, padding=1)
        self.feat_head = nn.Conv2d(w_in, cfg.feature_dim, kernel_size=1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h, w = self.cfg.image_size
        if x.ndim != 4 or x.shape[1:] != (self.cfg.channels, h, w):
            raise ValueError(
                f"discriminator expects [K, {self.cfg.channels}, {h}, {w}], got {tuple(x.shape)}"
            )
        t = self.trunk(x)
        adv = torch.sigmoid(self.adv_head(t))
        feats = self.feat_head(t).mean(dim=(2, 3))
        return adv, feats


# ---------------------------------------------------------------------------
# construction, init, freezing, checksums
# ---------------------------------------------------------------------------

def init_weights(net: nn.Module, seed: int) -> nn.Module:
    """Deterministic re-initialization: convs/linears ~ N(0, 0.02), biases 0,
    norm scales 1."""
    gen = torch.Generator().manual_seed(seed)
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            m.weight.data.normal_(0.0, 0.02, generator=gen)
            if m.bias is not None:
                m.bias.data.zero_()
        elif isinstance(m, nn.InstanceNorm2d) and m.affine:
            m.weight.data.fill_(1.0)
            m.bias.data.zero_()
    return net


def build_classifier(cfg: NetConfig, seed: int = 0) -> DomainClassifier:
    return init_weights(DomainClassifier(cfg), seed)


def build_encoder(cfg: NetConfig, seed: int = 0) -> ContentEncoder:
    return init_weights(ContentEncoder(cfg), seed)


def build_generator(cfg: NetConfig, seed: int = 0) -> Generator:
    return init_weights(Generator(cfg), seed)


def build_discriminator(cfg: NetConfig, seed: int = 0) -> PatchDiscriminator:
    return init_weights(PatchDiscriminator(cfg), seed)


def freeze(net: nn.Module) -> nn.Module:
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    net.frozen = True
    return net


def parameter_checksum(net: nn.Module) -> str:
    """Order-stable sha256 over all parameters and buffers."""
    h = hashlib.sha256()
    for name, p in sorted(net.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())
