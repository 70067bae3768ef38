"""Dataclass configs shared across the toolkit, plus flat config-file parsing.

Config files are flat ``key = value`` text (one key per line, ``#`` comments).
Keys mirror the flattened field names of :class:`TrainConfig`; command-line
flags override file values.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


@dataclass(frozen=True)
class NetConfig:
    """Geometry and widths shared by the four networks.

    ``feature_dim`` is the width of the domain-specific feature vector.
    ``downsample_stages`` is the number of stride-2 convolutions in the
    classifier and discriminator trunks (6 at full scale; smaller images
    need fewer stages since each stage halves the grid).
    """

    image_size: tuple[int, int] = (128, 128)
    channels: int = 3
    feature_dim: int = 1024
    num_domains: int = 2
    base_width: int = 64
    residual_blocks: int = 3
    downsample_stages: int = 6

    def __post_init__(self):
        h, w = self.image_size
        div = 2 ** self.downsample_stages
        if h % div != 0 or w % div != 0:
            raise ValueError(
                f"image size {h}x{w} not divisible by 2^{self.downsample_stages}; "
                f"reduce downsample_stages or resize"
            )
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.num_domains < 2:
            raise ValueError("num_domains must be >= 2")
        if self.downsample_stages < 1:
            raise ValueError("downsample_stages must be >= 1")

    @property
    def trunk_width(self) -> int:
        """Channel count after the encoder's two stride-2 stages."""
        return 4 * self.base_width


@dataclass(frozen=True)
class LossWeights:
    """Weights balancing the feature and image reconstruction terms.

    Defaults follow the identity/attribute translation setting; the season
    task uses lambda_f=0.15 and the paired cross-domain task 0.5.  L1 terms
    are per-sample sums, so small-image configs typically scale these down.
    """

    lambda_f: float = 5.0
    lambda_im: float = 10.0

    def __post_init__(self):
        if not (self.lambda_f >= 0 and self.lambda_im >= 0):
            raise ValueError("loss weights must be finite and non-negative")


MODES = ("nonconditional", "conditional", "ablation_f", "ablation_p", "no_im", "no_ds_fake")

# short CLI aliases
MODE_ALIASES = {"nc": "nonconditional", "c": "conditional"}


@dataclass
class TrainConfig:
    """Everything one training run needs, resolvable from a flat config file."""

    data_root: str = ""
    mode: str = "nonconditional"
    net: NetConfig = field(default_factory=NetConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    batch_size: int = 16  # minibatch size per domain; a config guess, no published value
    eta: float = 1e-4
    total_iters: int = 100_000
    decay_start_iter: int = 100_000
    decay_interval_iters: int = 1000
    seed: int = 0
    checkpoint_dir: str = "runs/default"
    log_path: str = ""  # defaults to <checkpoint_dir>/train_log.jsonl
    style_refresh_interval: int = 1000
    classifier_ckpt: str = ""
    # classifier pre-training budget (early stop on plateaued train accuracy)
    cls_iters: int = 2000
    cls_eta: float = 0.0  # 0 -> use eta
    cls_eval_interval: int = 100
    cls_patience: int = 5
    log_interval: int = 10
    checkpoint_interval: int = 1000
    keep_checkpoints: int = 3
    # unsettled formula details, kept behind flags with literal defaults
    symmetric_gan: bool = False
    literal_cls_prob: bool = False
    # conditional training without domain labels (extractor transfer)
    unlabeled_pairs: bool = False

    def __post_init__(self):
        self.mode = MODE_ALIASES.get(self.mode, self.mode)
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}, expected one of {MODES}")
        if self.eta <= 0:
            raise ValueError("eta must be > 0")
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")
        if not self.log_path:
            self.log_path = str(Path(self.checkpoint_dir) / "train_log.jsonl")

    @property
    def classifier_eta(self) -> float:
        return self.cls_eta if self.cls_eta > 0 else self.eta


def _parse_size(text: str) -> tuple[int, int]:
    if "x" in text:
        h, w = text.lower().split("x")
        return int(h), int(w)
    n = int(text)
    return n, n


_BOOL_KEYS = {"symmetric_gan", "literal_cls_prob", "unlabeled_pairs"}
_NET_KEYS = {
    "image_size", "channels", "feature_dim", "num_domains",
    "base_width", "residual_blocks", "downsample_stages",
}
_WEIGHT_KEYS = {"lambda_f", "lambda_im"}


def parse_config_text(text: str, overrides: dict | None = None) -> TrainConfig:
    """Build a TrainConfig from flat key/value text, applying overrides last."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        raw[key.strip()] = value.strip()
    if overrides:
        raw.update({k: str(v) for k, v in overrides.items() if v is not None})
    return _config_from_strings(raw)


def _config_from_strings(raw: dict[str, str]) -> TrainConfig:
    net_kwargs: dict = {}
    weight_kwargs: dict = {}
    train_kwargs: dict = {}
    train_fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    for key, value in raw.items():
        if key in _NET_KEYS:
            net_kwargs[key] = _parse_size(value) if key == "image_size" else int(value)
        elif key in _WEIGHT_KEYS:
            weight_kwargs[key] = float(value)
        elif key in _BOOL_KEYS:
            train_kwargs[key] = value.lower() in ("1", "true", "yes", "on")
        elif key in train_fields:
            ftype = train_fields[key].type
            if ftype == "int":
                train_kwargs[key] = int(value)
            elif ftype == "float":
                train_kwargs[key] = float(value)
            else:
                train_kwargs[key] = value
        else:
            raise ValueError(f"unknown config key {key!r}")
    return TrainConfig(
        net=NetConfig(**net_kwargs),
        weights=LossWeights(**weight_kwargs),
        **train_kwargs,
    )


def load_config(path: str | Path, overrides: dict | None = None) -> TrainConfig:
    return parse_config_text(Path(path).read_text(), overrides)


def config_to_dict(cfg: TrainConfig) -> dict:
    """Plain-dict snapshot for embedding in checkpoints and reports."""
    d = dataclasses.asdict(cfg)
    d["net"]["image_size"] = list(cfg.net.image_size)
    return d


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    net = dict(d.pop("net"))
    net["image_size"] = tuple(net["image_size"])
    weights = dict(d.pop("weights"))
    return TrainConfig(net=NetConfig(**net), weights=LossWeights(**weights), **d)
