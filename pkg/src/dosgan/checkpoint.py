"""Checkpoint archives, format ``dosgan-ckpt-v1``.

One file carries per-network parameter blobs, the network config, the
iteration counter, optimizer state, the domain-style table and the sampler
RNG state, so a run resumes bit-identically.  Writes are atomic
(temp-then-rename); evaluation readers can open files concurrently with
training.
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path

import torch

FORMAT_TAG = "dosgan-ckpt-v1"


class CheckpointFormatError(RuntimeError):
    pass


def save_checkpoint(path: str | Path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = dict(payload)
    payload["format"] = FORMAT_TAG
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path, expect_kind: str | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != FORMAT_TAG:
        raise CheckpointFormatError(
            f"{path} is not a {FORMAT_TAG} archive "
            f"(format tag: {payload.get('format') if isinstance(payload, dict) else type(payload)})"
        )
    if expect_kind and payload.get("kind") != expect_kind:
        raise CheckpointFormatError(
            f"{path} holds a {payload.get('kind')!r} checkpoint, expected {expect_kind!r}"
        )
    return payload


def checkpoint_fingerprint(path: str | Path) -> str:
    """sha256 of the archive file, for embedding in metric reports."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def rotate_checkpoints(directory: str | Path, keep: int):
    """Drop all but the newest ``keep`` iteration-numbered checkpoints.

    ``classifier.pt``, ``best.pt`` and other named files are untouched.
    """
    directory = Path(directory)
    numbered = sorted(directory.glob("ckpt_*.pt"))
    for old in numbered[:-keep] if keep > 0 else []:
        old.unlink()
