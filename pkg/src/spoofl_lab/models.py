"""Classifier zoo, deterministic trainers, and checkpointed trajectories.

Model states are value objects: a ``ClassifierSpec`` naming an architecture
from the fixed registry plus a flat ``ParameterVector``.  Torch modules are
instantiated on demand and never shared, so training one state cannot mutate
another.  All architectures are buffer-free (no batch norm) which keeps
``torch.func.functional_call`` usable with parameter dicts alone — required
by the attacks and the distillation unroll, both of which differentiate
through gradient computations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import LabeledDataset
from .params import (
    ParameterVector,
    config_digest,
    load_vector_into_module,
    module_to_vector,
    vector_to_tensors,
)
from .seeding import fold_seed, rng

ARCHITECTURES = ("mlp2", "convnet-small", "vgg-like", "resnet-like")


@dataclass(frozen=True)
class ClassifierSpec:
    architecture: str
    input_shape: tuple[int, int, int]  # (C, H, W)
    num_classes: int
    norm_mean: tuple[float, ...] | None = None
    norm_std: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))

    def to_json(self) -> dict:
        return {
            "architecture": self.architecture,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "norm_mean": list(self.norm_mean) if self.norm_mean else None,
            "norm_std": list(self.norm_std) if self.norm_std else None,
        }

    @staticmethod
    def from_json(d: dict) -> "ClassifierSpec":
        return ClassifierSpec(
            d["architecture"], tuple(d["input_shape"]), d["num_classes"],
            tuple(d["norm_mean"]) if d.get("norm_mean") else None,
            tuple(d["norm_std"]) if d.get("norm_std") else None,
        )


@dataclass
class ClassifierState:
    spec: ClassifierSpec
    params: ParameterVector

    def digest(self) -> str:
        return config_digest({"spec": self.spec.to_json(), "params": self.params.digest()})


@dataclass
class Trajectory:
    """Ordered model states of one training run; checkpoints[0] is the init."""

    checkpoints: list[ParameterVector]
    epochs_per_checkpoint: int
    training_config: dict

    def __post_init__(self):
        if not self.checkpoints:
            raise ValueError("trajectory needs at least the initialization checkpoint")
        layout = self.checkpoints[0].layout
        if any(c.layout != layout for c in self.checkpoints):
            raise ValueError("all checkpoints must share one layout")

    def __len__(self) -> int:
        return len(self.checkpoints)

    def digest(self) -> str:
        return config_digest({
            "config": self.training_config,
            "epochs_per_checkpoint": self.epochs_per_checkpoint,
            "checkpoints": [c.digest() for c in self.checkpoints],
        })


# ---------------------------------------------------------------------------
# architectures

class _Normalize(nn.Module):
    def __init__(self, mean, std):
        super().__init__()
        self.mean = tuple(mean) if mean else None
        self.std = tuple(std) if std else None

    def forward(self, x):
        if self.mean is None:
            return x
        mean = torch.tensor(self.mean, dtype=x.dtype).view(1, -1, 1, 1)
        std = torch.tensor(self.std, dtype=x.dtype).view(1, -1, 1, 1)
        return (x - mean) / std


class Mlp2(nn.Module):
    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        c, h, w = spec.input_shape
        self.norm = _Normalize(spec.norm_mean, spec.norm_std)
        self.fc1 = nn.Linear(c * h * w, 128)
        self.fc2 = nn.Linear(128, spec.num_classes)

    def features(self, x):
        x = self.norm(x).flatten(1)
        h = F.relu(self.fc1(x))
        return h, [h]

    def forward(self, x):
        h, _ = self.features(x)
        return self.fc2(h)


class ConvNetSmall(nn.Module):
    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        c, h, w = spec.input_shape
        self.norm = _Normalize(spec.norm_mean, spec.norm_std)
        self.conv1 = nn.Conv2d(c, 32, 3, padding=1)
        self.conv2 = nn.Conv2d(32, 64, 3, padding=1)
        self.fc1 = nn.Linear(64 * (h // 4) * (w // 4), 256)
        self.fc2 = nn.Linear(256, spec.num_classes)

    def features(self, x):
        x = self.norm(x)
        t1 = F.max_pool2d(F.relu(self.conv1(x)), 2)
        t2 = F.max_pool2d(F.relu(self.conv2(t1)), 2)
        h = F.relu(self.fc1(t2.flatten(1)))
        return h, [t1, t2]

    def forward(self, x):
        h, _ = self.features(x)
        return self.fc2(h)


class VggLike(nn.Module):
    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        c, h, w = spec.input_shape
        self.norm = _Normalize(spec.norm_mean, spec.norm_std)
        self.conv1a = nn.Conv2d(c, 32, 3, padding=1)
        self.conv1b = nn.Conv2d(32, 32, 3, padding=1)
        self.conv2a = nn.Conv2d(32, 64, 3, padding=1)
        self.conv2b = nn.Conv2d(64, 64, 3, padding=1)
        self.fc1 = nn.Linear(64 * (h // 4) * (w // 4), 256)
        self.fc2 = nn.Linear(256, spec.num_classes)

    def features(self, x):
        x = self.norm(x)
        t1 = F.max_pool2d(F.relu(self.conv1b(F.relu(self.conv1a(x)))), 2)
        t2 = F.max_pool2d(F.relu(self.conv2b(F.relu(self.conv2a(t1)))), 2)
        h = F.relu(self.fc1(t2.flatten(1)))
        return h, [t1, t2]

    def forward(self, x):
        h, _ = self.features(x)
        return self.fc2(h)


class ResNetLike(nn.Module):
    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        c, h, w = spec.input_shape
        self.norm = _Normalize(spec.norm_mean, spec.norm_std)
        self.stem = nn.Conv2d(c, 32, 3, padding=1)
        self.b1a = nn.Conv2d(32, 32, 3, padding=1)
        self.b1b = nn.Conv2d(32, 32, 3, padding=1)
        self.down = nn.Conv2d(32, 64, 3, stride=2, padding=1)
        self.b2a = nn.Conv2d(64, 64, 3, padding=1)
        self.b2b = nn.Conv2d(64, 64, 3, padding=1)
        self.head = nn.Linear(64, spec.num_classes)

    def features(self, x):
        x = F.relu(self.stem(self.norm(x)))
        x = F.relu(x + self.b1b(F.relu(self.b1a(x))))
        t1 = x
        x = F.relu(self.down(x))
        x = F.relu(x + self.b2b(F.relu(self.b2a(x))))
        t2 = x
        h = x.mean(dim=(2, 3))
        return h, [t1, t2]

    def forward(self, x):
        h, _ = self.features(x)
        return self.head(h)


_REGISTRY = {
    "mlp2": Mlp2,
    "convnet-small": ConvNetSmall,
    "vgg-like": VggLike,
    "resnet-like": ResNetLike,
}


def make_module(spec: ClassifierSpec) -> nn.Module:
    return _REGISTRY[spec.architecture](spec)


def build_classifier(spec: ClassifierSpec, seed: int) -> ClassifierState:
    """Fresh classifier state with deterministic Kaiming-normal init."""
    torch.manual_seed(fold_seed(seed, "init", spec.architecture))
    module = make_module(spec)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            nn.init.zeros_(m.bias)
    return ClassifierState(spec, module_to_vector(module))


def module_for_state(state: ClassifierState) -> nn.Module:
    module = make_module(state.spec)
    load_vector_into_module(module, state.params)
    return module


# ---------------------------------------------------------------------------
# functional helpers (shared by attacks, distillation, FL simulation)

def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """CE with mean reduction; accepts hard int labels or soft label rows."""
    if labels.dtype in (torch.int64, torch.int32):
        return F.cross_entropy(logits, labels)
    return -(labels * F.log_softmax(logits, dim=1)).sum(dim=1).mean()


def functional_logits(module: nn.Module, params: dict, x: torch.Tensor) -> torch.Tensor:
    return torch.func.functional_call(module, params, (x,))


def grad_at(module: nn.Module, params: dict, x: torch.Tensor, labels: torch.Tensor,
            create_graph: bool = False) -> dict:
    """Parameter gradients of the CE loss at ``params``, as a named dict."""
    loss = cross_entropy(functional_logits(module, params, x), labels)
    grads = torch.autograd.grad(loss, list(params.values()), create_graph=create_graph)
    return dict(zip(params.keys(), grads))


def sgd_step(params: dict, grads: dict, lr: float) -> dict:
    return {name: p - lr * grads[name] for name, p in params.items()}


# ---------------------------------------------------------------------------
# training and evaluation

def _check_input(spec: ClassifierSpec, images: np.ndarray) -> None:
    if tuple(images.shape[1:]) != spec.input_shape:
        raise ValueError(f"images shaped {images.shape[1:]} do not fit model input {spec.input_shape}")


def train_classifier(state: ClassifierState, dataset: LabeledDataset, epochs: int,
                     lr: float, seed: int, checkpoint_every: int = 1,
                     batch_size: int = 32,
                     eval_dataset: LabeledDataset | None = None,
                     ) -> tuple[ClassifierState, Trajectory, list[float]]:
    """Plain SGD + cross-entropy training with per-epoch accuracy tracking.

    The returned trajectory holds ``1 + epochs // checkpoint_every`` full
    parameter snapshots, the first being the initialization.  Bit-identical
    given identical (state, dataset, seed).
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if lr < 0:
        raise ValueError("lr must be non-negative")
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    _check_input(state.spec, dataset.images)
    if dataset.num_classes != state.spec.num_classes:
        raise ValueError("dataset class count does not match model head")

    module = module_for_state(state)
    optimizer = torch.optim.SGD(module.parameters(), lr=lr)
    images = torch.from_numpy(dataset.images)
    labels = torch.from_numpy(dataset.labels)

    checkpoints = [module_to_vector(module)]
    accuracies: list[float] = []
    eval_ds = eval_dataset if eval_dataset is not None else dataset
    for epoch in range(1, epochs + 1):
        order = rng(seed, "epoch-order", epoch).permutation(len(dataset))
        for start in range(0, len(dataset), batch_size):
            idx = torch.from_numpy(order[start : start + batch_size].copy())
            optimizer.zero_grad()
            loss = cross_entropy(module(images[idx]), labels[idx])
            loss.backward()
            optimizer.step()
        if epoch % checkpoint_every == 0:
            checkpoints.append(module_to_vector(module))
        accuracies.append(_accuracy(module, eval_ds))

    final = ClassifierState(state.spec, module_to_vector(module))
    traj = Trajectory(checkpoints, checkpoint_every, {
        "loss": "cross-entropy", "optimizer": "sgd", "lr": lr, "seed": seed,
        "epochs": epochs, "batch_size": batch_size,
        "dataset_digest": config_digest([dataset.images.shape, int(dataset.labels.sum())]),
    })
    return final, traj, accuracies


def _accuracy(module: nn.Module, dataset: LabeledDataset, batch_size: int = 512) -> float:
    correct = 0
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            x = torch.from_numpy(dataset.images[start : start + batch_size])
            pred = module(x).argmax(dim=1).numpy()
            correct += int((pred == dataset.labels[start : start + batch_size]).sum())
    return correct / len(dataset)


def evaluate_accuracy(state: ClassifierState, dataset: LabeledDataset) -> float:
    if dataset.num_classes != state.spec.num_classes:
        raise ValueError("dataset class count does not match model head")
    _check_input(state.spec, dataset.images)
    return _accuracy(module_for_state(state), dataset)


def softmax_confidences(state: ClassifierState, images: np.ndarray) -> np.ndarray:
    """Per-sample class probability rows (batch x num_classes)."""
    images = np.asarray(images, np.float32)
    _check_input(state.spec, images)
    module = module_for_state(state)
    with torch.no_grad():
        probs = F.softmax(module(torch.from_numpy(images)), dim=1)
    return probs.numpy().astype(np.float64)


def penultimate_embedding(state: ClassifierState, images: np.ndarray) -> np.ndarray:
    _check_input(state.spec, images)
    module = module_for_state(state)
    with torch.no_grad():
        h, _ = module.features(torch.from_numpy(np.asarray(images, np.float32)))
    return h.numpy().astype(np.float64)


def feature_taps(state: ClassifierState, images: np.ndarray) -> list[np.ndarray]:
    _check_input(state.spec, images)
    module = module_for_state(state)
    with torch.no_grad():
        _, taps = module.features(torch.from_numpy(np.asarray(images, np.float32)))
    return [t.numpy().astype(np.float64) for t in taps]


def parameter_count(spec: ClassifierSpec) -> int:
    return sum(p.numel() for p in make_module(spec).parameters())


# ---------------------------------------------------------------------------
# persistence

def save_classifier(state: ClassifierState, path) -> None:
    np.savez_compressed(
        path, values=state.params.values,
        layout=json.dumps(state.params.layout),
        spec=json.dumps(state.spec.to_json()),
        digest=state.digest(),
    )


def load_classifier(path) -> ClassifierState:
    with np.load(path, allow_pickle=False) as z:
        layout = tuple((n, tuple(s)) for n, s in json.loads(str(z["layout"])))
        spec = ClassifierSpec.from_json(json.loads(str(z["spec"])))
        return ClassifierState(spec, ParameterVector(z["values"], layout))


def save_trajectory(traj: Trajectory, path) -> None:
    np.savez_compressed(
        path,
        checkpoints=np.stack([c.values for c in traj.checkpoints]),
        layout=json.dumps(traj.checkpoints[0].layout),
        epochs_per_checkpoint=traj.epochs_per_checkpoint,
        training_config=json.dumps(traj.training_config),
        digest=traj.digest(),
    )


def load_trajectory(path) -> Trajectory:
    with np.load(path, allow_pickle=False) as z:
        layout = tuple((n, tuple(s)) for n, s in json.loads(str(z["layout"])))
        checkpoints = [ParameterVector(row, layout) for row in z["checkpoints"]]
        return Trajectory(checkpoints, int(z["epochs_per_checkpoint"]),
                          json.loads(str(z["training_config"])))
