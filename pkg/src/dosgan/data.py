"""Dataset manifests, minibatch sampling and the synthetic multi-domain set.

Dataset layout on disk is ``<root>/<domain_name>/<image files>`` (PNG/JPEG).
Domain indices are assigned in lexicographic order of the subdirectory names
so manifests are reproducible without any extra config.  Pixels are
normalized to [-1, 1] via ``x*2/255 - 1``.
"""

from __future__ import annotations

import colorsys
import hashlib
import logging
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg"}
NORMALIZED_RANGE = (-1.0, 1.0)

FACTOR_HEADER = ["path", "domain", "content_shape", "content_x", "content_y"]
SHAPE_NAMES = ("square", "disk", "cross")


class DatasetError(ValueError):
    """Fatal problem with a dataset directory or manifest."""


@dataclass(frozen=True)
class DatasetManifest:
    """Immutable snapshot of a multi-domain image directory."""

    root_path: str
    domains: tuple[tuple[str, tuple[str, ...]], ...]  # (name, image paths), dense index order
    image_size: tuple[int, int]
    channels: int
    normalization: tuple[float, float] = NORMALIZED_RANGE

    def __post_init__(self):
        if len(self.domains) < 2:
            raise DatasetError(f"need at least 2 domains, got {len(self.domains)}")
        for name, paths in self.domains:
            if not paths:
                raise DatasetError(f"domain {name!r} has no images")

    @property
    def num_domains(self) -> int:
        return len(self.domains)

    @property
    def domain_names(self) -> list[str]:
        return [name for name, _ in self.domains]

    @property
    def counts(self) -> list[int]:
        return [len(paths) for _, paths in self.domains]

    def paths(self, domain: int) -> tuple[str, ...]:
        return self.domains[domain][1]

    def all_paths(self) -> list[str]:
        return [p for _, paths in self.domains for p in paths]


@dataclass
class ImageBatch:
    """A decoded minibatch: pixels [K, C, H, W] in [-1, 1], integer labels [K]."""

    pixels: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        if self.pixels.ndim != 4:
            raise ValueError(f"pixels must be rank 4, got shape {tuple(self.pixels.shape)}")
        if not torch.isfinite(self.pixels).all():
            raise ValueError("batch contains non-finite pixels")

    def __len__(self) -> int:
        return self.pixels.shape[0]


def _rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


# ---------------------------------------------------------------------------
# decoding, with a small in-memory LRU and an optional on-disk cache
# (DOSGAN_CACHE points at the cache directory)
# ---------------------------------------------------------------------------

_MEM_CACHE: OrderedDict[str, np.ndarray] = OrderedDict()
_MEM_CACHE_MAX = 8192


def _cache_key(path: str, image_size, channels: int) -> str:
    stat = os.stat(path)
    h, w = image_size
    return f"{os.path.abspath(path)}:{stat.st_mtime_ns}:{h}x{w}x{channels}"


def decode_image(path: str, image_size: tuple[int, int], channels: int) -> np.ndarray:
    """Decode + resize to a uint8 array [C, H, W]; results are cached."""
    key = _cache_key(path, image_size, channels)
    cached = _MEM_CACHE.get(key)
    if cached is not None:
        _MEM_CACHE.move_to_end(key)
        return cached

    arr = None
    disk_dir = os.environ.get("DOSGAN_CACHE")
    disk_path = None
    if disk_dir:
        digest = hashlib.sha1(key.encode()).hexdigest()
        disk_path = Path(disk_dir) / f"{digest}.npy"
        if disk_path.exists():
            arr = np.load(disk_path)

    if arr is None:
        h, w = image_size
        with Image.open(path) as img:
            img = img.convert("L" if channels == 1 else "RGB")
            if img.size != (w, h):
                img = img.resize((w, h), Image.Resampling.BILINEAR)
            arr = np.asarray(img, dtype=np.uint8)
        if channels == 1:
            arr = arr[None, :, :]
        else:
            arr = arr.transpose(2, 0, 1)
        if disk_path is not None:
            disk_path.parent.mkdir(parents=True, exist_ok=True)
            np.save(disk_path, arr)

    _MEM_CACHE[key] = arr
    if len(_MEM_CACHE) > _MEM_CACHE_MAX:
        _MEM_CACHE.popitem(last=False)
    return arr


def normalize_pixels(arr: np.ndarray) -> np.ndarray:
    """uint8 -> float32 in [-1, 1]; endpoints map exactly to -1 and 1."""
    return (arr.astype(np.float32) * 2.0) / 255.0 - 1.0


def denormalize_pixels(arr: np.ndarray) -> np.ndarray:
    """float [-1, 1] -> uint8, round-half-even."""
    return np.clip(np.rint((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def _decodable(path: Path) -> bool:
    try:
        with Image.open(path) as img:
            img.verify()
        return True
    except Exception:
        return False


def load_manifest(root: str | Path, image_size: tuple[int, int], channels: int = 3) -> DatasetManifest:
    """Scan ``root``'s domain subdirectories into a manifest.

    Domains are sorted lexicographically; undecodable files are skipped with
    a warning; a domain directory with no decodable image is fatal.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    domain_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not domain_dirs:
        raise DatasetError(f"no domain directories under {root}")
    domains = []
    for d in domain_dirs:
        paths = []
        for f in sorted(d.iterdir()):
            if f.suffix.lower() not in IMAGE_EXTENSIONS or not f.is_file():
                continue
            if _decodable(f):
                paths.append(str(f))
            else:
                log.warning("skipping undecodable image %s", f)
        if not paths:
            raise DatasetError(f"domain directory {d} has no decodable images")
        domains.append((d.name, tuple(paths)))
    return DatasetManifest(
        root_path=str(root),
        domains=tuple(domains),
        image_size=tuple(image_size),
        channels=channels,
    )


def sample_batch(manifest: DatasetManifest, domain: int, k: int, rng) -> ImageBatch:
    """Uniform with-replacement sample of ``k`` images from one domain.

    Pure in (manifest, domain, k, seed): the same seed gives a bit-identical
    batch.
    """
    if not 0 <= domain < manifest.num_domains:
        raise DatasetError(f"domain {domain} out of range [0, {manifest.num_domains})")
    if k < 1:
        raise ValueError("k must be >= 1")
    gen = _rng(rng)
    paths = manifest.paths(domain)
    idx = gen.integers(0, len(paths), size=k)
    pixels = np.stack([
        normalize_pixels(decode_image(paths[i], manifest.image_size, manifest.channels))
        for i in idx
    ])
    return ImageBatch(
        pixels=torch.from_numpy(pixels),
        labels=torch.full((k,), domain, dtype=torch.long),
    )


def sample_unlabeled_batch(manifest: DatasetManifest, k: int, rng) -> ImageBatch:
    """Sample ``k`` images from the union of all domains, labels included
    for bookkeeping only (conditional training on unlabeled data ignores them)."""
    gen = _rng(rng)
    flat = [(d, p) for d, (_, paths) in enumerate(manifest.domains) for p in paths]
    idx = gen.integers(0, len(flat), size=k)
    pixels = np.stack([
        normalize_pixels(decode_image(flat[i][1], manifest.image_size, manifest.channels))
        for i in idx
    ])
    labels = torch.tensor([flat[i][0] for i in idx], dtype=torch.long)
    return ImageBatch(pixels=torch.from_numpy(pixels), labels=labels)


def split_train_test(
    manifest: DatasetManifest,
    test_fraction: float | None = None,
    rng=0,
    test_per_domain: int | None = None,
) -> tuple[DatasetManifest, DatasetManifest]:
    """Disjoint per-domain split; pass a fraction or a fixed per-domain count."""
    if (test_fraction is None) == (test_per_domain is None):
        raise ValueError("pass exactly one of test_fraction / test_per_domain")
    if test_fraction is not None and not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    gen = _rng(rng)
    train_domains, test_domains = [], []
    for name, paths in manifest.domains:
        n = len(paths)
        n_test = test_per_domain if test_per_domain is not None else round(test_fraction * n)
        if n_test < 1 or n_test >= n:
            raise DatasetError(f"domain {name!r} too small to split ({n} images, {n_test} test)")
        perm = gen.permutation(n)
        test_idx = set(perm[:n_test].tolist())
        test_domains.append((name, tuple(paths[i] for i in sorted(test_idx))))
        train_domains.append((name, tuple(paths[i] for i in range(n) if i not in test_idx)))
    mk = lambda doms: DatasetManifest(
        root_path=manifest.root_path,
        domains=tuple(doms),
        image_size=manifest.image_size,
        channels=manifest.channels,
        normalization=manifest.normalization,
    )
    return mk(train_domains), mk(test_domains)


def restrict_domains(manifest: DatasetManifest, keep: list[int]) -> DatasetManifest:
    """Sub-manifest with only the given domain indices (re-indexed densely)."""
    return DatasetManifest(
        root_path=manifest.root_path,
        domains=tuple(manifest.domains[i] for i in keep),
        image_size=manifest.image_size,
        channels=manifest.channels,
        normalization=manifest.normalization,
    )


# ---------------------------------------------------------------------------
# synthetic multi-domain generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Desk-scale multi-domain set: the domain factor is a global background
    color, the content factors are an independent shape and its position."""

    root: str
    num_domains: int = 4
    per_domain: int = 256
    image_size: tuple[int, int] = (32, 32)
    channels: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.num_domains < 2:
            raise ValueError("num_domains must be >= 2")


def _domain_color(d: int, n: int, channels: int) -> np.ndarray:
    if channels == 1:
        level = 30 + round(170 * d / max(n - 1, 1))
        return np.array([level], dtype=np.uint8)
    r, g, b = colorsys.hsv_to_rgb(d / n, 0.8, 0.85)
    return np.array([round(255 * r), round(255 * g), round(255 * b)], dtype=np.uint8)


def _draw(img: np.ndarray, shape: int, cx: int, cy: int, r: int):
    c, h, w = img.shape
    white = 255
    if shape == 0:  # square
        img[:, cy - r : cy + r + 1, cx - r : cx + r + 1] = white
    elif shape == 1:  # disk
        yy, xx = np.ogrid[:h, :w]
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[:, mask] = white
    else:  # cross
        t = max(1, r // 2)
        img[:, cy - t : cy + t + 1, cx - r : cx + r + 1] = white
        img[:, cy - r : cy + r + 1, cx - t : cx + t + 1] = white


def make_synthetic_domains(spec: SyntheticSpec) -> DatasetManifest:
    """Write the synthetic directory tree plus ``factors.tsv`` and return
    its manifest.  Deterministic in the seed, down to the PNG bytes."""
    root = Path(spec.root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create synthetic root {root}: {e}") from e
    gen = np.random.default_rng(spec.seed)
    h, w = spec.image_size
    r = max(3, min(h, w) // 8)
    pad = len(str(spec.num_domains - 1))
    rows = []
    domains = []
    for d in range(spec.num_domains):
        name = f"d{d:0{pad}d}"
        ddir = root / name
        ddir.mkdir(exist_ok=True)
        color = _domain_color(d, spec.num_domains, spec.channels)
        paths = []
        for i in range(spec.per_domain):
            shape = int(gen.integers(0, len(SHAPE_NAMES)))
            cx = int(gen.integers(r, w - r))
            cy = int(gen.integers(r, h - r))
            img = np.empty((spec.channels, h, w), dtype=np.uint8)
            img[:] = color[:, None, None]
            _draw(img, shape, cx, cy, r)
            path = ddir / f"img_{i:05d}.png"
            pil = Image.fromarray(img[0] if spec.channels == 1 else img.transpose(1, 2, 0))
            pil.save(path)
            paths.append(str(path))
            rows.append((str(path), d, shape, cx, cy))
        domains.append((name, tuple(paths)))
    with open(root / "factors.tsv", "w") as f:
        f.write("\t".join(FACTOR_HEADER) + "\n")
        for row in rows:
            f.write("\t".join(str(v) for v in row) + "\n")
    return DatasetManifest(
        root_path=str(root),
        domains=tuple(domains),
        image_size=spec.image_size,
        channels=spec.channels,
    )


def read_factor_table(root: str | Path) -> list[dict]:
    """Parse factors.tsv back into dict rows for oracle checks."""
    path = Path(root) / "factors.tsv"
    lines = path.read_text().splitlines()
    header = lines[0].split("\t")
    if header != FACTOR_HEADER:
        raise DatasetError(f"unexpected factors.tsv header {header}")
    rows = []
    for line in lines[1:]:
        vals = line.split("\t")
        rows.append({
            "path": vals[0],
            "domain": int(vals[1]),
            "content_shape": int(vals[2]),
            "content_x": int(vals[3]),
            "content_y": int(vals[4]),
        })
    return rows
