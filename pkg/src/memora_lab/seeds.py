"""Deterministic seed derivation and per-seed noise streams.

A master seed expands into per-stage and per-sample seeds through a hash of
the label path, so any stage can be rerun independently and always sees the
same stream.
"""

from __future__ import annotations

import hashlib
from typing import Sequence

import torch


def derive_seed(master: int, *labels) -> int:
    """Stable 63-bit seed for a (master, label...) path."""
    key = f"{master}:" + "/".join(str(x) for x in labels)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def prompt_seeds(seed: int, n: int) -> list[int]:
    """Per-prompt seeds derived from one evaluation seed."""
    return [derive_seed(seed, "prompt", i) for i in range(n)]


def prompt_noise(
    latent_shape: Sequence[int], seeds: Sequence[int], dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Stacked N(0, I) draws, one independent generator per seed.

    Each row depends only on its own seed, so streams stay deterministic no
    matter how the batch is chunked.
    """
    rows = [
        torch.randn(tuple(latent_shape), generator=torch.Generator().manual_seed(s), dtype=dtype)
        for s in seeds
    ]
    return torch.stack(rows)
