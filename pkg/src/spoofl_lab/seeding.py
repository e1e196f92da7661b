"""Deterministic seed fan-out.

Every stage of an experiment derives its own seed from the global seed via
``fold_seed``, so any stage can be re-run in isolation and reproduce its
artifact exactly.  The schedule is a SHA-256 hash of the global seed plus a
path of string/int labels, truncated to 32 bits.
"""

from __future__ import annotations

import hashlib
import random

import numpy as np
import torch


def fold_seed(seed: int, *path) -> int:
    """Derive a child seed from ``seed`` and a label path.

    Labels may be strings or ints; the same (seed, path) always yields the
    same child seed.
    """
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for p in path:
        h.update(b"/")
        h.update(str(p).encode())
    return int.from_bytes(h.digest()[:4], "big")


def seed_everything(seed: int) -> None:
    """Seed torch, numpy's legacy RNG, and the stdlib RNG."""
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))
    random.seed(seed)


def rng(seed: int, *path) -> np.random.Generator:
    """A numpy Generator seeded by the fan-out schedule."""
    return np.random.default_rng(fold_seed(seed, *path))


def torch_gen(seed: int, *path) -> torch.Generator:
    """A torch Generator seeded by the fan-out schedule."""
    g = torch.Generator()
    g.manual_seed(fold_seed(seed, *path))
    return g
