"""FedSGD/FedAvg round simulation with an interception point.

The simulation is in-process message passing: clients compute updates, a
defense transform is applied, and the interceptor callback observes exactly
the defended traffic a honest-but-curious server (or a man-in-the-middle)
would see — pre-update model, defended payload, and protocol metadata, but
never labels or raw data.  Ground-truth batches are carried separately on
the log entries for the evaluator only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .data import LabeledDataset
from .models import (
    ClassifierSpec,
    ClassifierState,
    _accuracy,
    cross_entropy,
    grad_at,
    make_module,
    module_for_state,
    sgd_step,
)
from .params import (
    ParameterVector,
    module_to_vector,
    tensors_to_vector,
    vector_to_tensors,
)
from .seeding import fold_seed, rng

GRADIENT = "gradient"
WEIGHT_DELTA = "weight-delta"


@dataclass
class UpdateMetadata:
    client_id: int
    round: int
    local_steps: int
    local_lr: float
    batch_size: int

    def to_json(self) -> dict:
        return {"client_id": self.client_id, "round": self.round,
                "local_steps": self.local_steps, "local_lr": self.local_lr,
                "batch_size": self.batch_size}

    @staticmethod
    def from_json(d: dict) -> "UpdateMetadata":
        return UpdateMetadata(d["client_id"], d["round"], d["local_steps"],
                              d["local_lr"], d["batch_size"])


@dataclass
class ClientUpdate:
    kind: str  # GRADIENT or WEIGHT_DELTA
    payload: ParameterVector
    pre_update_model: ParameterVector
    metadata: UpdateMetadata

    def __post_init__(self):
        if self.kind not in (GRADIENT, WEIGHT_DELTA):
            raise ValueError(f"unknown update kind {self.kind!r}")
        if self.payload.layout != self.pre_update_model.layout:
            raise ValueError("payload and pre-update model layouts differ")
        if self.kind == GRADIENT and self.metadata.local_steps != 1:
            raise ValueError("gradient updates imply a single local step")

    def with_payload(self, payload: ParameterVector) -> "ClientUpdate":
        return ClientUpdate(self.kind, payload, self.pre_update_model, self.metadata)


@dataclass
class FLConfig:
    protocol: str = "fedavg"  # fedavg | fedsgd
    num_clients: int = 4
    local_steps: int = 2
    local_lr: float = 0.01
    batch_size: int = 8
    rounds: int = 10
    seed: int = 0
    defense: "DefenseConfig | None" = None  # resolved by the defenses module

    def __post_init__(self):
        if self.protocol not in ("fedavg", "fedsgd"):
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.protocol == "fedsgd" and self.local_steps != 1:
            raise ValueError("fedsgd requires local_steps == 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")


def partition_dataset(dataset: LabeledDataset, num_clients: int, seed: int) -> list[LabeledDataset]:
    """Disjoint IID shards covering the dataset, by seeded shuffle."""
    order = rng(seed, "partition").permutation(len(dataset))
    return [dataset.subset(chunk) for chunk in np.array_split(order, num_clients)]


def sample_sequence(shard_size: int, batch_size: int, steps: int, round_seed: int) -> np.ndarray:
    """Indices consumed by ``steps`` local batches, cycling with reshuffles."""
    needed = batch_size * steps
    out, epoch = [], 0
    while len(out) < needed:
        out.extend(rng(round_seed, "local-order", epoch).permutation(shard_size).tolist())
        epoch += 1
    return np.asarray(out[:needed], dtype=np.int64)


def client_local_update(global_params: ParameterVector, shard: LabeledDataset,
                        cfg: FLConfig, round_seed: int,
                        metadata: UpdateMetadata | None = None,
                        model_spec: ClassifierSpec | None = None) -> ClientUpdate:
    """One client's transmitted update.

    FedSGD sends the single-batch gradient at the global model; FedAvg sends
    the weight delta after ``local_steps`` SGD steps.  Deterministic given
    ``round_seed``.
    """
    if len(shard) == 0:
        raise ValueError("client shard is empty")
    if model_spec is None:
        raise ValueError("model_spec is required to instantiate the client model")
    if metadata is None:
        metadata = UpdateMetadata(0, 0, cfg.local_steps, cfg.local_lr, cfg.batch_size)

    module = make_module(model_spec)
    params = vector_to_tensors(global_params, requires_grad=True)
    seq = sample_sequence(len(shard), cfg.batch_size, cfg.local_steps, round_seed)
    images = torch.from_numpy(shard.images)
    labels = torch.from_numpy(shard.labels)

    if cfg.protocol == "fedsgd":
        idx = torch.from_numpy(seq[: cfg.batch_size])
        grads = grad_at(module, params, images[idx], labels[idx])
        payload = tensors_to_vector(grads)
        return ClientUpdate(GRADIENT, payload, global_params, metadata)

    current = {k: v.detach() for k, v in params.items()}
    for step in range(cfg.local_steps):
        idx = torch.from_numpy(seq[step * cfg.batch_size : (step + 1) * cfg.batch_size])
        live = {k: v.requires_grad_(True) for k, v in
                {k: v.clone() for k, v in current.items()}.items()}
        grads = grad_at(module, live, images[idx], labels[idx])
        current = {k: (v - cfg.local_lr * grads[k]).detach() for k, v in live.items()}
    payload = tensors_to_vector(current) - global_params
    return ClientUpdate(WEIGHT_DELTA, payload, global_params, metadata)


def aggregate(updates: list[ClientUpdate], global_params: ParameterVector,
              protocol: str) -> ParameterVector:
    """Server-side mean aggregation of client updates."""
    if not updates:
        raise ValueError("no updates to aggregate")
    kinds = {u.kind for u in updates}
    if len(kinds) != 1:
        raise ValueError("mixed update kinds")
    for u in updates:
        if u.payload.layout != global_params.layout:
            raise ValueError("update layout does not match global model")
    mean = np.mean([u.payload.values for u in updates], axis=0).astype(np.float32)
    if protocol == "fedavg":
        if kinds != {WEIGHT_DELTA}:
            raise ValueError("fedavg aggregates weight deltas")
        return global_params.replace_values(global_params.values + mean)
    if kinds != {GRADIENT}:
        raise ValueError("fedsgd aggregates gradients")
    lrs = {u.metadata.local_lr for u in updates}
    if len(lrs) != 1:
        raise ValueError("clients disagree on learning rate")
    server_lr = lrs.pop()
    return global_params.replace_values(global_params.values - server_lr * mean)


@dataclass
class InterceptionRecord:
    """One observed transmission plus evaluator-only reference data."""

    update: ClientUpdate
    round: int
    client_id: int
    eval_reference_images: np.ndarray  # counterfactual private batch
    eval_reference_labels: np.ndarray


@dataclass
class FederationResult:
    final_model: ClassifierState
    round_accuracy: list[float]
    intercepted: list[InterceptionRecord]


def run_federation(cfg: FLConfig, private: LabeledDataset,
                   interceptor=None,
                   model_state: ClassifierState | None = None,
                   eval_dataset: LabeledDataset | None = None,
                   spoof_substitute=None,
                   keep_log: bool = True) -> FederationResult:
    """Simulate ``cfg.rounds`` federation rounds over IID client shards.

    ``interceptor``, when given, is called with every InterceptionRecord
    after the defense transform — the attacker's view of the traffic.
    ``spoof_substitute`` maps a private shard to its substituted training
    set (the spoofing defense); the eval references stay private.
    ``keep_log=False`` drops records after the interceptor has seen them
    (long runs would otherwise hold every transmitted vector in memory).
    """
    from .defenses import apply_defense  # local import to avoid a cycle

    if model_state is None:
        raise ValueError("model_state is required")
    shards = partition_dataset(private, cfg.num_clients, cfg.seed)
    train_shards = shards
    if spoof_substitute is not None:
        train_shards = [spoof_substitute(s) for s in shards]

    global_params = model_state.params
    module = module_for_state(model_state)
    accuracies: list[float] = []
    log: list[InterceptionRecord] = []

    for rnd in range(cfg.rounds):
        updates = []
        for cid in range(cfg.num_clients):
            round_seed = fold_seed(cfg.seed, "round", rnd, "client", cid)
            meta = UpdateMetadata(cid, rnd, cfg.local_steps, cfg.local_lr, cfg.batch_size)
            update = client_local_update(global_params, train_shards[cid], cfg,
                                         round_seed, meta, model_state.spec)
            update = apply_defense(update, cfg.defense,
                                   seed=fold_seed(cfg.seed, "defense", rnd, cid))
            # reference: what the undefended client would have trained on
            ref_seq = sample_sequence(len(shards[cid]), cfg.batch_size,
                                      cfg.local_steps, round_seed)
            record = InterceptionRecord(
                update, rnd, cid,
                shards[cid].images[ref_seq].copy(), shards[cid].labels[ref_seq].copy(),
            )
            if keep_log:
                log.append(record)
            if interceptor is not None:
                interceptor(record)
            updates.append(update)
        global_params = aggregate(updates, global_params, cfg.protocol)
        if eval_dataset is not None:
            from .params import load_vector_into_module
            load_vector_into_module(module, global_params)
            accuracies.append(_accuracy(module, eval_dataset))

    return FederationResult(ClassifierState(model_state.spec, global_params),
                            accuracies, log)


# ---------------------------------------------------------------------------
# intercepted-update files (offline attack replay)

def save_update(update: ClientUpdate, path) -> None:
    np.savez_compressed(
        path, kind=update.kind,
        payload=update.payload.values,
        pre_update_model=update.pre_update_model.values,
        layout=json.dumps(update.payload.layout),
        metadata=json.dumps(update.metadata.to_json()),
    )


def load_update(path) -> ClientUpdate:
    with np.load(path, allow_pickle=False) as z:
        layout = tuple((n, tuple(s)) for n, s in json.loads(str(z["layout"])))
        return ClientUpdate(
            str(z["kind"]),
            ParameterVector(z["payload"], layout),
            ParameterVector(z["pre_update_model"], layout),
            UpdateMetadata.from_json(json.loads(str(z["metadata"]))),
        )
