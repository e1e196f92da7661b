"""Class-conditional image generator and its trainer.

The generator is a small conditional decoder: a label embedding is
concatenated to the latent vector, expanded through transposed convolutions,
and squashed to [0, 1] by a sigmoid.  It is trained as the decoder half of a
conditional VAE on the spoofing dataset — a stable reconstruction objective
is all the downstream latent optimization needs, since the only hard
requirements are class conditioning and differentiability with respect to z.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import LabeledDataset
from .models import ClassifierState, softmax_confidences
from .params import (
    ParameterVector,
    config_digest,
    load_vector_into_module,
    module_to_vector,
)
from .seeding import fold_seed, rng


@dataclass
class ConditionalGenerator:
    latent_dim: int
    num_classes: int
    output_shape: tuple[int, int, int]
    params: ParameterVector

    def digest(self) -> str:
        return config_digest({
            "latent_dim": self.latent_dim, "num_classes": self.num_classes,
            "output_shape": list(self.output_shape), "params": self.params.digest(),
        })


class DecoderNet(nn.Module):
    def __init__(self, latent_dim: int, num_classes: int, output_shape):
        super().__init__()
        c, h, w = output_shape
        if h % 4 or w % 4:
            raise ValueError("output height/width must be divisible by 4")
        self.h0, self.w0 = h // 4, w // 4
        self.embed = nn.Embedding(num_classes, 16)
        self.fc = nn.Linear(latent_dim + 16, 64 * self.h0 * self.w0)
        self.up1 = nn.ConvTranspose2d(64, 32, 4, stride=2, padding=1)
        self.up2 = nn.ConvTranspose2d(32, 16, 4, stride=2, padding=1)
        self.out = nn.Conv2d(16, c, 3, padding=1)

    def forward(self, z, labels):
        x = torch.cat([z, self.embed(labels)], dim=1)
        x = F.relu(self.fc(x)).view(-1, 64, self.h0, self.w0)
        x = F.relu(self.up1(x))
        x = F.relu(self.up2(x))
        return torch.sigmoid(self.out(x))


class _EncoderNet(nn.Module):
    def __init__(self, latent_dim: int, num_classes: int, input_shape):
        super().__init__()
        c, h, w = input_shape
        self.num_classes = num_classes
        self.conv1 = nn.Conv2d(c + 1, 32, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(32, 64, 3, stride=2, padding=1)
        flat = 64 * ((h + 3) // 4) * ((w + 3) // 4)
        self.mu = nn.Linear(flat, latent_dim)
        self.logvar = nn.Linear(flat, latent_dim)

    def forward(self, x, labels):
        # label broadcast as one extra input plane
        plane = (labels.float() / self.num_classes).view(-1, 1, 1, 1).expand(-1, 1, *x.shape[2:])
        x = torch.cat([x, plane], dim=1)
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x)).flatten(1)
        return self.mu(x), self.logvar(x)


def decoder_module(gen: ConditionalGenerator) -> DecoderNet:
    module = DecoderNet(gen.latent_dim, gen.num_classes, gen.output_shape)
    load_vector_into_module(module, gen.params)
    return module


def generate(gen: ConditionalGenerator, z: np.ndarray, label: int) -> np.ndarray:
    """Generate one image from a latent vector and a spoof class id."""
    z = np.asarray(z, np.float32).ravel()
    if z.size != gen.latent_dim:
        raise ValueError(f"latent has length {z.size}, expected {gen.latent_dim}")
    if not (0 <= int(label) < gen.num_classes):
        raise ValueError(f"label {label} outside [0, {gen.num_classes})")
    module = decoder_module(gen)
    with torch.no_grad():
        img = module(torch.from_numpy(z[None]), torch.tensor([int(label)]))
    return img[0].numpy()


def generate_batch(gen: ConditionalGenerator, latents: np.ndarray, labels: np.ndarray) -> np.ndarray:
    module = decoder_module(gen)
    with torch.no_grad():
        imgs = module(torch.from_numpy(np.asarray(latents, np.float32)),
                      torch.from_numpy(np.asarray(labels, np.int64)))
    return imgs.numpy()


def train_generator(spoof_dataset: LabeledDataset, latent_dim: int, seed: int,
                    epochs: int = 30, batch_size: int = 128, lr: float = 2e-3,
                    kl_weight: float = 0.5) -> ConditionalGenerator:
    """Train the conditional decoder on the spoofing dataset (cVAE objective)."""
    if latent_dim < 1:
        raise ValueError("latent_dim must be >= 1")
    if len(spoof_dataset) == 0:
        raise ValueError("spoof dataset is empty")

    shape = spoof_dataset.image_shape
    torch.manual_seed(fold_seed(seed, "generator-init"))
    decoder = DecoderNet(latent_dim, spoof_dataset.num_classes, shape)
    encoder = _EncoderNet(latent_dim, spoof_dataset.num_classes, shape)
    optim = torch.optim.Adam(list(decoder.parameters()) + list(encoder.parameters()), lr=lr)

    images = torch.from_numpy(spoof_dataset.images)
    labels = torch.from_numpy(spoof_dataset.labels)
    noise_gen = torch.Generator().manual_seed(fold_seed(seed, "generator-noise"))

    for epoch in range(epochs):
        order = rng(seed, "generator-epoch", epoch).permutation(len(spoof_dataset))
        for start in range(0, len(spoof_dataset), batch_size):
            idx = torch.from_numpy(order[start : start + batch_size].copy())
            x, y = images[idx], labels[idx]
            mu, logvar = encoder(x, y)
            eps = torch.randn(mu.shape, generator=noise_gen)
            z = mu + torch.exp(0.5 * logvar) * eps
            recon = decoder(z, y)
            rec_loss = F.binary_cross_entropy(recon.clamp(1e-6, 1 - 1e-6), x, reduction="sum") / len(idx)
            kl = -0.5 * torch.sum(1 + logvar - mu.pow(2) - logvar.exp()) / len(idx)
            loss = rec_loss + kl_weight * kl
            optim.zero_grad()
            loss.backward()
            optim.step()

    return ConditionalGenerator(latent_dim, spoof_dataset.num_classes, shape,
                                module_to_vector(decoder))


def conditioning_fidelity(gen: ConditionalGenerator, classifier: ClassifierState,
                          n_samples: int = 500, seed: int = 0) -> float:
    """Fraction of random generations the classifier assigns to their
    conditioning class."""
    rg = rng(seed, "fidelity")
    latents = rg.standard_normal((n_samples, gen.latent_dim)).astype(np.float32)
    labels = rg.integers(0, gen.num_classes, size=n_samples).astype(np.int64)
    images = generate_batch(gen, latents, labels)
    probs = softmax_confidences(classifier, images)
    return float((probs.argmax(axis=1) == labels).mean())


def save_generator(gen: ConditionalGenerator, path) -> None:
    np.savez_compressed(
        path, values=gen.params.values, layout=json.dumps(gen.params.layout),
        meta=json.dumps({"latent_dim": gen.latent_dim, "num_classes": gen.num_classes,
                         "output_shape": list(gen.output_shape)}),
        digest=gen.digest(),
    )


def load_generator(path) -> ConditionalGenerator:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        layout = tuple((n, tuple(s)) for n, s in json.loads(str(z["layout"])))
        return ConditionalGenerator(
            meta["latent_dim"], meta["num_classes"], tuple(meta["output_shape"]),
            ParameterVector(z["values"], layout),
        )
