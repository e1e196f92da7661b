"""Trajectory-matched spoof dataset distillation.

The pipeline turns a private dataset into a compact set of generated decoy
images: spoof classes are assigned per private sample by a classifier
trained on the external dataset (masked by the blacklist), latent vectors
are pushed through the frozen conditional generator, and the latents are
optimized so that a student classifier trained a few SGD steps on the
generated set lands near the checkpoints of a reference run trained on the
real private data.  The optimization differentiates through the unrolled
student steps and the generator, back to the latents.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .data import Blacklist, LabeledDataset
from .models import (
    ClassifierSpec,
    ClassifierState,
    Trajectory,
    build_classifier,
    grad_at,
    make_module,
    sgd_step,
    softmax_confidences,
    train_classifier,
)
from .generator import ConditionalGenerator, decoder_module
from .params import array_digest, config_digest, flat_tensor, vector_to_tensors
from .seeding import fold_seed, rng

log = logging.getLogger(__name__)


@dataclass
class LatentBatch:
    """Learnable latent/label pairs feeding the conditional generator."""

    latents: np.ndarray       # (N, latent_dim) float32
    spoof_labels: np.ndarray  # (N,) spoof-class ids
    train_label_map: dict     # spoof-class id -> private-label index
    excluded_ids: frozenset = frozenset()

    def __post_init__(self):
        self.latents = np.asarray(self.latents, np.float32)
        self.spoof_labels = np.asarray(self.spoof_labels, np.int64).ravel()
        if self.latents.ndim != 2 or len(self.latents) != len(self.spoof_labels):
            raise ValueError("latents must be (N, latent_dim) aligned with spoof_labels")
        hit = set(self.spoof_labels.tolist()) & set(self.excluded_ids)
        if hit:
            raise ValueError(f"spoof labels {sorted(hit)} are blacklisted")
        mapped = [self.train_label_map[int(s)] for s in set(self.spoof_labels.tolist())]
        if len(mapped) != len(set(mapped)):
            raise ValueError("train_label_map must be injective on the labels present")

    def __len__(self) -> int:
        return len(self.latents)

    @property
    def training_labels(self) -> np.ndarray:
        return np.asarray([self.train_label_map[int(s)] for s in self.spoof_labels], np.int64)

    def digest(self) -> str:
        return config_digest({
            "latents": array_digest(self.latents),
            "spoof_labels": self.spoof_labels.tolist(),
            "map": sorted((int(k), int(v)) for k, v in self.train_label_map.items()),
        })


@dataclass
class SpoofDataset:
    """Distilled decoy images plus everything needed to reproduce them."""

    images: np.ndarray           # (N, C, H, W) in [0, 1]
    training_labels: np.ndarray  # private-label indices used in FL training
    spoof_labels: np.ndarray     # originating spoof-class ids
    latents: np.ndarray          # optimized latent matrix
    provenance: dict

    def __post_init__(self):
        self.images = np.asarray(self.images, np.float32)
        self.training_labels = np.asarray(self.training_labels, np.int64).ravel()
        self.spoof_labels = np.asarray(self.spoof_labels, np.int64).ravel()
        if not (len(self.images) == len(self.training_labels) == len(self.spoof_labels)):
            raise ValueError("images and label vectors disagree on count")
        excluded = set(self.provenance.get("excluded_ids", []))
        hit = set(self.spoof_labels.tolist()) & excluded
        if hit:
            raise ValueError(f"distilled spoof labels {sorted(hit)} are blacklisted")

    def __len__(self) -> int:
        return len(self.images)

    def digest(self) -> str:
        return config_digest({
            "images": array_digest(self.images),
            "training_labels": self.training_labels.tolist(),
            "spoof_labels": self.spoof_labels.tolist(),
            "provenance": self.provenance,
        })


@dataclass
class DistillConfig:
    budget: int = 100
    latent_dim: int = 32
    outer_iterations: int = 200
    outer_lr: float = 0.1
    inner_steps: int = 10        # offset n: student steps on generated data
    epochs_ahead: int = 1        # offset m: target checkpoint in the real run
    inner_lr: float = 0.01
    segments_per_iteration: int = 2
    normalize_loss: bool = False
    rounds: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.epochs_ahead < 1:
            raise ValueError("epochs_ahead must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in (
            "budget", "latent_dim", "outer_iterations", "outer_lr", "inner_steps",
            "epochs_ahead", "inner_lr", "segments_per_iteration", "normalize_loss",
            "rounds", "seed")}


# ---------------------------------------------------------------------------
# stage operations

def assign_spoof_labels(images: np.ndarray, spoof_classifier: ClassifierState,
                        blacklist: Blacklist) -> np.ndarray:
    """Most-confident non-blacklisted spoof class per sample (ties: lowest id)."""
    probs = softmax_confidences(spoof_classifier, images)
    num_classes = probs.shape[1]
    excluded = sorted(blacklist.excluded_class_ids)
    if len(excluded) >= num_classes:
        raise ValueError("blacklist covers every spoof class")
    masked = probs.copy()
    masked[:, excluded] = -np.inf
    return masked.argmax(axis=1).astype(np.int64)


def record_real_trajectory(spec: ClassifierSpec, private: LabeledDataset, epochs: int,
                           seed: int, lr: float = 0.01, batch_size: int = 32) -> Trajectory:
    """Reference trajectory: per-epoch checkpoints of a classifier trained on
    the private data."""
    init = build_classifier(spec, fold_seed(seed, "trajectory-init"))
    _, traj, _ = train_classifier(init, private, epochs, lr, fold_seed(seed, "trajectory-train"),
                                  checkpoint_every=1, batch_size=batch_size)
    return traj


def _unrolled_segment_distance(module, decoder, z: torch.Tensor, spoof_labels: torch.Tensor,
                               train_labels: torch.Tensor, real_traj: Trajectory,
                               cfg: DistillConfig, start: int) -> torch.Tensor:
    if start < 0 or start + cfg.epochs_ahead > len(real_traj.checkpoints) - 1:
        raise ValueError(f"segment [{start}, {start + cfg.epochs_ahead}] outside trajectory")
    images = decoder(z, spoof_labels)
    current = vector_to_tensors(real_traj.checkpoints[start], requires_grad=True)
    for _ in range(cfg.inner_steps):
        grads = grad_at(module, current, images, train_labels, create_graph=True)
        current = sgd_step(current, grads, cfg.inner_lr)
    target = flat_tensor(vector_to_tensors(real_traj.checkpoints[start + cfg.epochs_ahead]))
    dist = ((flat_tensor(current) - target) ** 2).sum()
    if cfg.normalize_loss:
        origin = flat_tensor(vector_to_tensors(real_traj.checkpoints[start]))
        dist = dist / (((origin - target) ** 2).sum() + 1e-12)
    return dist


def trajectory_loss_torch(z: torch.Tensor, batch: LatentBatch, generator: ConditionalGenerator,
                          model_spec: ClassifierSpec, real_traj: Trajectory,
                          cfg: DistillConfig, segment_starts) -> torch.Tensor:
    """Differentiable trajectory loss: squared parameter distance between the
    student trained ``inner_steps`` on the generated set and the real
    checkpoint ``epochs_ahead`` later, averaged over the sampled segments."""
    module = make_module(model_spec)
    decoder = decoder_module(generator)
    for p in decoder.parameters():
        p.requires_grad_(False)
    spoof_labels = torch.from_numpy(batch.spoof_labels)
    train_labels = torch.from_numpy(batch.training_labels)
    starts = [int(s) for s in np.atleast_1d(segment_starts)]
    total = sum(
        _unrolled_segment_distance(module, decoder, z, spoof_labels, train_labels,
                                   real_traj, cfg, s)
        for s in starts
    )
    return total / len(starts)


def trajectory_loss(batch: LatentBatch, generator: ConditionalGenerator,
                    model_spec: ClassifierSpec, real_traj: Trajectory,
                    cfg: DistillConfig, segment_start) -> float:
    z = torch.from_numpy(batch.latents)
    loss = trajectory_loss_torch(z, batch, generator, model_spec, real_traj, cfg, segment_start)
    return float(loss.detach())


def trajectory_loss_grad(batch: LatentBatch, generator: ConditionalGenerator,
                         model_spec: ClassifierSpec, real_traj: Trajectory,
                         cfg: DistillConfig, segment_start) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to the latents."""
    z = torch.from_numpy(batch.latents).clone().requires_grad_(True)
    loss = trajectory_loss_torch(z, batch, generator, model_spec, real_traj, cfg, segment_start)
    (grad,) = torch.autograd.grad(loss, z)
    return float(loss.detach()), grad.numpy()


def max_segment_start(real_traj: Trajectory, cfg: DistillConfig) -> int:
    last = len(real_traj.checkpoints) - 1 - cfg.epochs_ahead
    if last < 0:
        raise ValueError("trajectory too short for the configured epochs_ahead")
    return last


def optimize_latents(z_init: LatentBatch, generator: ConditionalGenerator,
                     model_spec: ClassifierSpec, real_traj: Trajectory,
                     cfg: DistillConfig) -> tuple[LatentBatch, list[float]]:
    """AdamW optimization of the latents against the trajectory loss.

    Spoof labels stay frozen; only z moves.  A non-finite loss aborts the
    run and the last finite iterate is returned.
    """
    z = torch.from_numpy(z_init.latents).clone().requires_grad_(True)
    optimizer = torch.optim.AdamW([z], lr=cfg.outer_lr)
    last = max_segment_start(real_traj, cfg)
    curve: list[float] = []
    last_finite = z.detach().clone()
    for it in range(cfg.outer_iterations):
        starts = rng(cfg.seed, "segments", it).integers(0, last + 1, size=cfg.segments_per_iteration)
        loss = trajectory_loss_torch(z, z_init, generator, model_spec, real_traj, cfg, starts)
        value = float(loss.detach())
        if not np.isfinite(value):
            log.error("non-finite trajectory loss at outer iteration %d; aborting", it)
            z = last_finite.requires_grad_(False)
            break
        curve.append(value)
        last_finite = z.detach().clone()
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    optimized = replace(z_init, latents=z.detach().numpy().copy())
    return optimized, curve


def select_representatives(private: LabeledDataset, budget: int, num_classes: int) -> np.ndarray:
    """Class-stratified representatives: the first samples of each private
    class in source order, budget split as evenly as the classes allow."""
    if budget > len(private):
        raise ValueError("budget exceeds the private dataset size")
    per_class = [budget // num_classes] * num_classes
    for c in range(budget % num_classes):
        per_class[c] += 1
    chosen: list[int] = []
    leftover = 0
    for c in range(num_classes):
        idx = private.class_indices(c)[: per_class[c]]
        leftover += per_class[c] - len(idx)
        chosen.extend(idx.tolist())
    if leftover:  # classes short on samples: fill from the front of the rest
        pool = [i for i in range(len(private)) if i not in set(chosen)]
        chosen.extend(pool[:leftover])
    return np.asarray(sorted(chosen), dtype=np.int64)


def _extend_label_map(label_map: dict, spoof_labels: np.ndarray, num_private: int) -> dict:
    out = dict(label_map)
    for s in spoof_labels.tolist():
        if int(s) not in out:
            if len(out) >= num_private:
                raise ValueError("more distinct spoof classes than private label slots")
            out[int(s)] = len(out)  # private indices assigned by first appearance
    return out


def distill_dataset(private: LabeledDataset, generator: ConditionalGenerator,
                    spoof_classifier: ClassifierState, blacklist: Blacklist,
                    cfg: DistillConfig, real_traj: Trajectory,
                    model_spec: ClassifierSpec) -> SpoofDataset:
    """Full distillation pipeline; ``cfg.rounds`` independent repetitions are
    concatenated (fresh latent seeds per round, one shared label map)."""
    from .generator import generate_batch

    reps = select_representatives(private, cfg.budget, private.num_classes)
    rep_images = private.images[reps]
    spoof_labels = assign_spoof_labels(rep_images, spoof_classifier, blacklist)
    label_map = _extend_label_map({}, spoof_labels, private.num_classes)

    all_images, all_train, all_spoof, all_latents = [], [], [], []
    curves: list[list[float]] = []
    for rnd in range(cfg.rounds):
        z0 = rng(cfg.seed, "latent-init", rnd).standard_normal(
            (cfg.budget, cfg.latent_dim)).astype(np.float32)
        batch = LatentBatch(z0, spoof_labels, label_map, blacklist.excluded_class_ids)
        round_cfg = replace(cfg, seed=fold_seed(cfg.seed, "round", rnd))
        optimized, curve = optimize_latents(batch, generator, model_spec, real_traj, round_cfg)
        images = np.clip(generate_batch(generator, optimized.latents, optimized.spoof_labels), 0.0, 1.0)
        all_images.append(images)
        all_train.append(optimized.training_labels)
        all_spoof.append(optimized.spoof_labels)
        all_latents.append(optimized.latents)
        curves.append(curve)

    provenance = {
        "generator_digest": generator.digest(),
        "trajectory_digest": real_traj.digest(),
        "distill_config": cfg.to_json(),
        "model_spec": model_spec.to_json(),
        "excluded_ids": sorted(int(i) for i in blacklist.excluded_class_ids),
        "label_map": {str(k): int(v) for k, v in label_map.items()},
        "loss_curves": curves,
    }
    return SpoofDataset(
        np.concatenate(all_images),
        np.concatenate(all_train),
        np.concatenate(all_spoof),
        np.concatenate(all_latents),
        provenance,
    )


def check_spoof_provenance(spoof: SpoofDataset, model_spec: ClassifierSpec) -> bool:
    """Warn (and return False) when a spoof set is reused across architectures."""
    recorded = spoof.provenance.get("model_spec")
    if recorded != model_spec.to_json():
        log.warning("spoof dataset was distilled for %s but is used with %s",
                    recorded, model_spec.to_json())
        return False
    return True


def save_spoof_dataset(spoof: SpoofDataset, path) -> None:
    np.savez_compressed(
        path, images=spoof.images, training_labels=spoof.training_labels,
        spoof_labels=spoof.spoof_labels, latents=spoof.latents,
        provenance=json.dumps(spoof.provenance), digest=spoof.digest(),
    )


def load_spoof_dataset(path) -> SpoofDataset:
    with np.load(path, allow_pickle=False) as z:
        return SpoofDataset(z["images"], z["training_labels"], z["spoof_labels"],
                            z["latents"], json.loads(str(z["provenance"])))
