"""Gradient-inversion attacks on intercepted client updates.

All attacks differentiate a gradient-matching loss with respect to dummy
pixels *through* the gradient computation itself (double backpropagation),
so the model substrate must build the dummy gradients with
``create_graph=True``.  Every attack is deterministic given (cfg.seed,
intercepted update): dummy batches are initialized from the seed fan-out and
optimized with Adam.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .flsim import GRADIENT, ClientUpdate, UpdateMetadata
from .models import ClassifierSpec, ClassifierState, cross_entropy, grad_at, make_module, sgd_step
from .params import ParameterVector, flat_tensor, vector_to_tensors
from .seeding import fold_seed, rng, torch_gen

log = logging.getLogger(__name__)

ATTACK_METHODS = ("dlg", "ig", "sme", "gradinv", "dlf")

_DEFAULT_OPT_LR = {"dlg": 0.1, "ig": 0.1, "gradinv": 0.1, "sme": 0.01, "dlf": 0.01}

_EXACT_MATCH_TOL = 1e-12


@dataclass
class AttackConfig:
    method: str = "dlg"
    iterations: int = 30000
    opt_lr: float | None = None        # None -> per-method default
    tv_weight: float = 0.0
    num_seeds: int = 1                 # gradinv
    consensus_weight: float = 0.0      # gradinv
    order_samples: int = 2             # dlf: batch orderings averaged in the loss
    dlf_max_images: int = 64           # dlf dummy-set budget
    seed: int = 0

    def __post_init__(self):
        if self.method not in ATTACK_METHODS:
            raise ValueError(f"unknown attack method {self.method!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.tv_weight < 0 or self.consensus_weight < 0:
            raise ValueError("regularizer weights must be >= 0")
        if self.num_seeds < 1:
            raise ValueError("num_seeds must be >= 1")
        if self.consensus_weight > 0 and self.num_seeds < 2:
            raise ValueError("consensus regularization needs num_seeds >= 2")

    @property
    def effective_opt_lr(self) -> float:
        return self.opt_lr if self.opt_lr is not None else _DEFAULT_OPT_LR[self.method]


@dataclass
class ReconstructionResult:
    images: np.ndarray                 # clamped to [0, 1], private batch shape
    inferred_labels: np.ndarray | None
    final_matching_loss: float
    iterations_run: int
    wall_time_s: float
    method: str = ""
    flags: list[str] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# building blocks

def infer_labels(update: ClientUpdate, num_classes: int | None = None) -> np.ndarray:
    """Analytic label inference from the last linear layer's weight gradient.

    With softmax cross-entropy the row of the head weight gradient belonging
    to the true class is the one with a negative sum (the p - y signature).
    Exact for batch size 1; a flagged best-effort top-B for larger batches.
    """
    if update.kind != GRADIENT:
        raise ValueError("label inference needs a gradient update")
    head_name = None
    for name, shape in update.payload.layout:
        if len(shape) == 2:
            head_name = name  # last 2-D tensor is the classifier head
    if head_name is None:
        raise ValueError("architecture has no final linear layer")
    rows = update.payload.unflatten()[head_name].sum(axis=1)
    batch = update.metadata.batch_size
    if batch == 1:
        return np.asarray([int(np.argmin(rows))], dtype=np.int64)
    log.warning("batch size %d > 1: label inference is best-effort", batch)
    return np.argsort(rows, kind="stable")[:batch].astype(np.int64)


def _match_torch(dummy_flat: torch.Tensor, target_flat: torch.Tensor, distance: str) -> torch.Tensor:
    if distance == "l2":
        return ((dummy_flat - target_flat) ** 2).sum()
    if distance == "cosine":
        na = torch.linalg.vector_norm(dummy_flat)
        nb = torch.linalg.vector_norm(target_flat)
        if na.item() == 0.0 or nb.item() == 0.0:
            log.warning("cosine distance against a zero vector; defined as 1.0")
            return dummy_flat.sum() * 0.0 + 1.0
        return 1.0 - (dummy_flat * target_flat).sum() / (na * nb)
    raise ValueError(f"unknown distance {distance!r}")


def gradient_matching_loss(dummy_grad: ParameterVector, target_grad: ParameterVector,
                           distance: str = "l2") -> float:
    """Distance between two gradients: summed squared error or cosine distance."""
    if dummy_grad.layout != target_grad.layout:
        raise ValueError("layout mismatch")
    a = torch.from_numpy(dummy_grad.values.astype(np.float64))
    b = torch.from_numpy(target_grad.values.astype(np.float64))
    return float(_match_torch(a, b, distance))


def _tv_torch(images: torch.Tensor) -> torch.Tensor:
    dh = (images[..., 1:, :] - images[..., :-1, :]).abs().sum()
    dw = (images[..., :, 1:] - images[..., :, :-1]).abs().sum()
    return (dh + dw) / images.numel()


def total_variation(image: np.ndarray) -> float:
    """Mean absolute neighbor difference (horizontal + vertical), per pixel."""
    image = np.asarray(image, np.float64)
    if image.ndim < 2 or image.shape[-1] < 2 or image.shape[-2] < 2:
        raise ValueError("image must be at least 2x2 spatially")
    return float(_tv_torch(torch.from_numpy(image)))


def _init_dummy(shape, seed: int, tag) -> torch.Tensor:
    g = torch_gen(seed, "dummy-init", *tag)
    return (0.5 + 0.25 * torch.randn(shape, generator=g)).requires_grad_(True)


def _attack_optimizer(learnable, lr: float, iterations: int):
    # step decay late in the run; rescues runs stuck in bad basins
    optimizer = torch.optim.Adam(learnable, lr=lr)
    milestones = [(iterations * k) // 8 for k in (3, 5, 7)]
    scheduler = torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones=milestones, gamma=0.1)
    return optimizer, scheduler


def _soft_or_hard_labels(label_logits, fixed_labels):
    if fixed_labels is not None:
        return fixed_labels
    return F.softmax(label_logits, dim=1)


def _result_labels(label_logits, fixed_labels) -> np.ndarray:
    if fixed_labels is not None:
        return fixed_labels.numpy().copy()
    return label_logits.detach().argmax(dim=1).numpy()


# ---------------------------------------------------------------------------
# FedSGD attacks: DLG / inverting-gradients / GradInversion

def _gradient_attack(update: ClientUpdate, model_state: ClassifierState, cfg: AttackConfig,
                     distance: str, num_seeds: int, consensus_weight: float,
                     init_images: np.ndarray | None = None,
                     labels: np.ndarray | None = None) -> ReconstructionResult:
    if update.kind != GRADIENT:
        raise ValueError("this attack consumes FedSGD gradient updates")
    start_time = time.perf_counter()
    spec = model_state.spec
    module = make_module(spec)
    params = vector_to_tensors(update.pre_update_model, requires_grad=True)
    target = torch.from_numpy(update.payload.values)

    batch = update.metadata.batch_size
    shape = (batch, *spec.input_shape)
    flags: list[str] = []

    fixed_labels = None
    label_logits = None
    if labels is not None:
        fixed_labels = torch.from_numpy(np.asarray(labels, np.int64))
        flags.append("labels-given")
    elif batch == 1:
        fixed_labels = torch.from_numpy(infer_labels(update, spec.num_classes))
        flags.append("labels-inferred")
    else:
        g = torch_gen(cfg.seed, "label-logits")
        label_logits = (0.01 * torch.randn((batch, spec.num_classes), generator=g)).requires_grad_(True)
        flags.append("labels-optimized")

    if init_images is not None:
        first = torch.from_numpy(np.asarray(init_images, np.float32)).clone().requires_grad_(True)
        dummies = [first] + [_init_dummy(shape, cfg.seed, ("seed", s)) for s in range(1, num_seeds)]
    else:
        dummies = [_init_dummy(shape, cfg.seed, ("seed", s)) for s in range(num_seeds)]

    learnable = list(dummies) + ([label_logits] if label_logits is not None else [])
    optimizer, scheduler = _attack_optimizer(learnable, cfg.effective_opt_lr, cfg.iterations)

    def match_losses():
        losses = []
        for x in dummies:
            y = _soft_or_hard_labels(label_logits, fixed_labels)
            grads = grad_at(module, params, x, y, create_graph=True)
            losses.append(_match_torch(flat_tensor(grads), target, distance))
        return losses

    iterations_run = 0
    for it in range(cfg.iterations):
        losses = match_losses()
        best_now = min(float(l.detach()) for l in losses)
        if it == 0 and best_now <= _EXACT_MATCH_TOL:
            flags.append("converged-at-init")
            break
        total = sum(losses)
        if cfg.tv_weight > 0:
            total = total + cfg.tv_weight * sum(_tv_torch(x) for x in dummies)
        if consensus_weight > 0:
            consensus = torch.stack([x for x in dummies]).mean(dim=0)
            total = total + consensus_weight * sum(((x - consensus) ** 2).sum() for x in dummies)
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        scheduler.step()
        iterations_run = it + 1

    final_losses = [float(l.detach()) for l in match_losses()]
    best = int(np.argmin(final_losses))
    images = np.clip(dummies[best].detach().numpy(), 0.0, 1.0)
    return ReconstructionResult(
        images=images,
        inferred_labels=_result_labels(label_logits, fixed_labels),
        final_matching_loss=final_losses[best],
        iterations_run=iterations_run,
        wall_time_s=time.perf_counter() - start_time,
        method=cfg.method,
        flags=flags,
        metadata={"distance": distance, "num_seeds": num_seeds,
                  "consensus_weight": consensus_weight,
                  "configured_iterations": cfg.iterations,
                  "per_seed_loss": final_losses},
    )


def attack_dlg(update: ClientUpdate, model_state: ClassifierState, cfg: AttackConfig,
               init_images: np.ndarray | None = None,
               labels: np.ndarray | None = None) -> ReconstructionResult:
    """Dummy-batch optimization matching the intercepted gradient.

    ``method='dlg'`` matches with summed squared error; ``method='ig'``
    uses cosine distance (typically with a total-variation prior).
    """
    distance = "cosine" if cfg.method == "ig" else "l2"
    return _gradient_attack(update, model_state, cfg, distance, 1, 0.0,
                            init_images=init_images, labels=labels)


def attack_gradinversion(update: ClientUpdate, model_state: ClassifierState,
                         cfg: AttackConfig,
                         init_images: np.ndarray | None = None,
                         labels: np.ndarray | None = None) -> ReconstructionResult:
    """Multi-seed joint optimization with a consensus regularizer; returns
    the seed with the lowest matching loss."""
    return _gradient_attack(update, model_state, cfg, "l2", cfg.num_seeds,
                            cfg.consensus_weight, init_images=init_images, labels=labels)


# ---------------------------------------------------------------------------
# FedAvg attacks: SME surrogate interpolation and DLF local-step simulation

def attack_sme(pre_model: ParameterVector, post_model: ParameterVector,
               cfg: AttackConfig, fl_metadata: UpdateMetadata,
               model_spec: ClassifierSpec,
               labels: np.ndarray | None = None) -> ReconstructionResult:
    """Surrogate-model attack: cosine-match the dummy gradient at a learned
    per-layer interpolation of pre- and post-update weights."""
    if pre_model is None:
        raise ValueError("SME requires the pre-update model")
    if pre_model.layout != post_model.layout:
        raise ValueError("pre/post layout mismatch")
    start_time = time.perf_counter()
    module = make_module(model_spec)
    pre = vector_to_tensors(pre_model)
    post = vector_to_tensors(post_model)
    denom = fl_metadata.local_steps * fl_metadata.local_lr
    if denom == 0:
        raise ValueError("zero local_steps * lr; no gradient direction recoverable")
    target = torch.from_numpy((pre_model.values - post_model.values) / denom)

    batch = fl_metadata.batch_size
    shape = (batch, *model_spec.input_shape)
    flags: list[str] = []
    dummy = _init_dummy(shape, cfg.seed, ("sme",))
    alphas = torch.full((len(pre_model.layout),), 0.5, requires_grad=True)

    fixed_labels = None
    label_logits = None
    if labels is not None:
        fixed_labels = torch.from_numpy(np.asarray(labels, np.int64))
        flags.append("labels-given")
    else:
        g = torch_gen(cfg.seed, "label-logits")
        label_logits = (0.01 * torch.randn((batch, model_spec.num_classes), generator=g)).requires_grad_(True)
        flags.append("labels-optimized")

    learnable = [dummy, alphas] + ([label_logits] if label_logits is not None else [])
    optimizer, scheduler = _attack_optimizer(learnable, cfg.effective_opt_lr, cfg.iterations)

    names = list(pre.keys())

    def surrogate_params():
        return {n: alphas[i] * pre[n] + (1 - alphas[i]) * post[n] for i, n in enumerate(names)}

    def matching_loss():
        y = _soft_or_hard_labels(label_logits, fixed_labels)
        grads = grad_at(module, surrogate_params(), dummy, y, create_graph=True)
        return _match_torch(flat_tensor(grads), target, "cosine")

    iterations_run = 0
    for it in range(cfg.iterations):
        loss = matching_loss()
        if it == 0 and float(loss.detach()) <= _EXACT_MATCH_TOL:
            flags.append("converged-at-init")
            break
        total = loss
        if cfg.tv_weight > 0:
            total = total + cfg.tv_weight * _tv_torch(dummy)
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        scheduler.step()
        with torch.no_grad():
            alphas.clamp_(0.0, 1.0)
        iterations_run = it + 1

    final_loss = float(matching_loss().detach())
    return ReconstructionResult(
        images=np.clip(dummy.detach().numpy(), 0.0, 1.0),
        inferred_labels=_result_labels(label_logits, fixed_labels),
        final_matching_loss=final_loss,
        iterations_run=iterations_run,
        wall_time_s=time.perf_counter() - start_time,
        method="sme",
        flags=flags,
        metadata={"configured_iterations": cfg.iterations,
                  "alphas": alphas.detach().numpy().tolist()},
    )


def _batch_orderings(steps: int, count: int, seed: int) -> list[np.ndarray]:
    """Identity first, then distinct non-identity orderings (exhaustive for
    small step counts, seeded samples otherwise)."""
    identity = np.arange(steps)
    orderings = [identity]
    if count <= 1 or steps <= 1:
        return orderings[:max(count, 1)]
    if math.factorial(steps) <= 120:
        rest = [np.asarray(p) for p in itertools.permutations(range(steps))
                if not np.array_equal(p, identity)]
        order = rng(seed, "dlf-orderings").permutation(len(rest))
        orderings += [rest[i] for i in order[: count - 1]]
    else:
        for r in range(1, count):
            orderings.append(rng(seed, "dlf-ordering", r).permutation(steps))
    return orderings


def attack_dlf(pre_model: ParameterVector, post_model: ParameterVector,
               cfg: AttackConfig, fl_metadata: UpdateMetadata,
               model_spec: ClassifierSpec,
               init_images: np.ndarray | None = None,
               labels: np.ndarray | None = None) -> ReconstructionResult:
    """Local-training simulation attack: a dummy dataset of
    local_steps x batch_size images is optimized so that replaying the
    client's SGD steps from the pre-update model lands on the post-update
    model, with the endpoint loss averaged over batch orderings."""
    if pre_model.layout != post_model.layout:
        raise ValueError("pre/post layout mismatch")
    steps, batch = fl_metadata.local_steps, fl_metadata.batch_size
    n_images = steps * batch
    if n_images > cfg.dlf_max_images:
        raise ValueError(f"dummy set of {n_images} images exceeds budget {cfg.dlf_max_images}")
    start_time = time.perf_counter()

    module = make_module(model_spec)
    pre = vector_to_tensors(pre_model)
    target = torch.from_numpy(post_model.values)
    flags: list[str] = []

    shape = (n_images, *model_spec.input_shape)
    if init_images is not None:
        dummy = torch.from_numpy(np.asarray(init_images, np.float32)).clone().requires_grad_(True)
    else:
        dummy = _init_dummy(shape, cfg.seed, ("dlf",))

    fixed_labels = None
    label_logits = None
    if labels is not None:
        fixed_labels = torch.from_numpy(np.asarray(labels, np.int64))
        flags.append("labels-given")
    else:
        g = torch_gen(cfg.seed, "label-logits")
        label_logits = (0.01 * torch.randn((n_images, model_spec.num_classes), generator=g)).requires_grad_(True)
        flags.append("labels-optimized")

    if fl_metadata.local_lr == 0:
        log.warning("zero client lr: simulation endpoint is the pre-update model; attack degenerates")
        return ReconstructionResult(
            images=np.clip(dummy.detach().numpy(), 0.0, 1.0),
            inferred_labels=_result_labels(label_logits, fixed_labels),
            final_matching_loss=float(((torch.from_numpy(pre_model.values) - target) ** 2).sum()),
            iterations_run=0,
            wall_time_s=time.perf_counter() - start_time,
            method="dlf", flags=flags + ["degenerate-zero-lr"],
            metadata={"configured_iterations": cfg.iterations},
        )

    orderings = _batch_orderings(steps, cfg.order_samples, cfg.seed)

    def simulation_loss():
        y_all = _soft_or_hard_labels(label_logits, fixed_labels)
        total = 0.0
        for ordering in orderings:
            current = pre
            for k in ordering:
                sl = slice(int(k) * batch, (int(k) + 1) * batch)
                grads = grad_at(module, current, dummy[sl], y_all[sl], create_graph=True)
                current = sgd_step(current, grads, fl_metadata.local_lr)
            endpoint = flat_tensor(current)
            total = total + ((endpoint - target) ** 2).sum()
        return total / len(orderings)

    learnable = [dummy] + ([label_logits] if label_logits is not None else [])
    optimizer, scheduler = _attack_optimizer(learnable, cfg.effective_opt_lr, cfg.iterations)

    iterations_run = 0
    for it in range(cfg.iterations):
        loss = simulation_loss()
        if it == 0 and float(loss.detach()) <= _EXACT_MATCH_TOL:
            flags.append("converged-at-init")
            break
        if cfg.tv_weight > 0:
            loss = loss + cfg.tv_weight * _tv_torch(dummy)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        scheduler.step()
        iterations_run = it + 1

    final_loss = float(simulation_loss().detach())
    return ReconstructionResult(
        images=np.clip(dummy.detach().numpy(), 0.0, 1.0),
        inferred_labels=_result_labels(label_logits, fixed_labels),
        final_matching_loss=final_loss,
        iterations_run=iterations_run,
        wall_time_s=time.perf_counter() - start_time,
        method="dlf",
        flags=flags,
        metadata={"configured_iterations": cfg.iterations,
                  "order_samples": len(orderings),
                  "orderings": [o.tolist() for o in orderings]},
    )


def _post_update_model(update: ClientUpdate) -> ParameterVector:
    if update.kind == GRADIENT:
        return update.pre_update_model + update.payload.scale(-update.metadata.local_lr)
    return update.pre_update_model + update.payload


def run_attack_on_update(update: ClientUpdate, model_state: ClassifierState,
                         cfg: AttackConfig,
                         labels: np.ndarray | None = None) -> ReconstructionResult:
    """Dispatch an attack method against one intercepted update."""
    if cfg.method in ("dlg", "ig"):
        return attack_dlg(update, model_state, cfg, labels=labels)
    if cfg.method == "gradinv":
        return attack_gradinversion(update, model_state, cfg, labels=labels)
    post = _post_update_model(update)
    if cfg.method == "sme":
        return attack_sme(update.pre_update_model, post, cfg, update.metadata,
                          model_state.spec, labels=labels)
    return attack_dlf(update.pre_update_model, post, cfg, update.metadata,
                      model_state.spec, labels=labels)
