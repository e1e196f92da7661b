"""Update-space obfuscation defenses and the spoofing substitution.

Noise, clipping and compression are pure transforms on the transmitted
update; they preserve layout and metadata.  The spoofing defense operates
before training ever starts: the client's shard is replaced by a precomputed
distilled dataset, so the per-round path is byte-for-byte the undefended one
(relative execution time 1.0 by construction).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .flsim import ClientUpdate
from .seeding import rng

DEFENSE_KINDS = ("none", "noise", "clip", "compress", "spoofl")

# parameter sweeps shipped as presets for the defense-comparison grid
NOISE_SIGMAS = (1e-3, 2.5e-3, 5e-3, 1e-2)
CLIP_MAX_NORMS = (20.0, 15.0, 10.0, 5.0)
COMPRESS_RATES = (0.90, 0.925, 0.95, 0.975)

# moderate single-defense configurations used by the headline comparison
DEFAULT_SIGMA = 2.5e-3
DEFAULT_MAX_NORM = 20.0
DEFAULT_RATE = 0.95


@dataclass
class DefenseConfig:
    kind: str = "none"
    sigma: float | None = None          # noise
    max_norm: float | None = None       # clip
    rate: float | None = None           # compress
    spoof_dataset_path: str | None = None  # spoofl
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ValueError(f"unknown defense kind {self.kind!r}")
        required = {"noise": "sigma", "clip": "max_norm", "compress": "rate"}
        if self.kind in required and getattr(self, required[self.kind]) is None:
            raise ValueError(f"defense {self.kind!r} requires {required[self.kind]}")
        if self.sigma is not None and self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.max_norm is not None and self.max_norm <= 0:
            raise ValueError("max_norm must be > 0")
        if self.rate is not None and not (0 <= self.rate < 1):
            raise ValueError("rate must lie in [0, 1)")

    @property
    def parameter(self) -> float | None:
        return {"noise": self.sigma, "clip": self.max_norm,
                "compress": self.rate}.get(self.kind)


def apply_noise(update: ClientUpdate, sigma: float, seed: int) -> ClientUpdate:
    """Add element-wise Gaussian(0, sigma^2) to the payload."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return update
    noise = rng(seed, "noise").normal(0.0, sigma, size=update.payload.values.shape)
    return update.with_payload(
        update.payload.replace_values(update.payload.values + noise.astype(np.float32))
    )


def apply_clipping(update: ClientUpdate, max_norm: float) -> ClientUpdate:
    """Scale the whole flat payload down to L2 norm ``max_norm`` if it exceeds it."""
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    norm = update.payload.norm()
    if norm <= max_norm:
        return update
    return update.with_payload(update.payload.scale(max_norm / norm))


def apply_compression(update: ClientUpdate, rate: float) -> ClientUpdate:
    """Zero the floor(rate * d) smallest-magnitude payload elements.

    Ties are broken by zeroing the lower flat index first, so exactly
    d - floor(rate * d) elements survive whenever the input has no zeros.
    """
    if not (0 <= rate < 1):
        raise ValueError("rate must lie in [0, 1)")
    values = update.payload.values
    k = int(np.floor(rate * values.size))
    if k == 0:
        return update
    order = np.argsort(np.abs(values), kind="stable")
    out = values.copy()
    out[order[:k]] = 0.0
    return update.with_payload(update.payload.replace_values(out))


def spoofl_substitute(shard: LabeledDataset, spoof_dataset: "SpoofDataset") -> LabeledDataset:
    """Replace a client's private shard with the distilled spoof proxy.

    Training labels are the spoof classes remapped into the private label
    space, so the client-side training loop is otherwise unmodified.
    """
    from .distill import SpoofDataset  # local import to avoid a cycle

    if not isinstance(spoof_dataset, SpoofDataset):
        raise TypeError("spoof_dataset must be a distilled SpoofDataset")
    if tuple(spoof_dataset.images.shape[1:]) != shard.image_shape:
        raise ValueError("spoof dataset image shape does not match the task")
    return LabeledDataset(
        spoof_dataset.images.copy(),
        spoof_dataset.training_labels.copy(),
        list(shard.class_names),
        shard.num_classes,
    )


def apply_defense(update: ClientUpdate, cfg: DefenseConfig | None, seed: int) -> ClientUpdate:
    """Dispatch the update-space transform for ``cfg`` (spoofl is a no-op here:
    its work happened at dataset substitution time)."""
    if cfg is None or cfg.kind in ("none", "spoofl"):
        return update
    if cfg.kind == "noise":
        return apply_noise(update, cfg.sigma, seed)
    if cfg.kind == "clip":
        return apply_clipping(update, cfg.max_norm)
    return apply_compression(update, cfg.rate)
