"""Flat parameter vectors and their mapping onto model tensors.

A ``ParameterVector`` is the unit of everything transmitted or compared in
this package: model states, trajectory checkpoints, client updates.  The
``layout`` records how the flat vector folds back into named tensors, so two
vectors with equal layouts are element-wise comparable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import torch

Layout = tuple[tuple[str, tuple[int, ...]], ...]


@dataclass(frozen=True)
class ParameterVector:
    values: np.ndarray  # 1-D float32
    layout: Layout

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32).ravel()
        object.__setattr__(self, "values", values)
        layout = tuple((str(n), tuple(int(d) for d in s)) for n, s in self.layout)
        object.__setattr__(self, "layout", layout)
        expected = sum(int(np.prod(s)) for _, s in layout)
        if values.size != expected:
            raise ValueError(
                f"flat vector has {values.size} elements, layout needs {expected}"
            )

    @property
    def size(self) -> int:
        return int(self.values.size)

    def same_layout(self, other: "ParameterVector") -> bool:
        return self.layout == other.layout

    def unflatten(self) -> dict[str, np.ndarray]:
        """Fold the flat vector back into named arrays per the layout."""
        out, offset = {}, 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = self.values[offset : offset + n].reshape(shape).copy()
            offset += n
        return out

    def replace_values(self, values: np.ndarray) -> "ParameterVector":
        return ParameterVector(values, self.layout)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.layout).encode())
        h.update(self.values.tobytes())
        return h.hexdigest()

    def __add__(self, other):
        return self._elementwise(other, np.add)

    def __sub__(self, other):
        return self._elementwise(other, np.subtract)

    def _elementwise(self, other, op):
        if not isinstance(other, ParameterVector):
            return NotImplemented
        if not self.same_layout(other):
            raise ValueError("layout mismatch")
        return ParameterVector(op(self.values, other.values), self.layout)

    def scale(self, factor: float) -> "ParameterVector":
        return ParameterVector(self.values * np.float32(factor), self.layout)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values.astype(np.float64)))


def flatten_arrays(named: dict[str, np.ndarray]) -> ParameterVector:
    layout = tuple((name, tuple(a.shape)) for name, a in named.items())
    if named:
        flat = np.concatenate([np.asarray(a, np.float32).ravel() for a in named.values()])
    else:
        flat = np.zeros(0, np.float32)
    return ParameterVector(flat, layout)


def module_to_vector(module: torch.nn.Module) -> ParameterVector:
    named = {n: p.detach().cpu().numpy() for n, p in module.named_parameters()}
    return flatten_arrays(named)


def load_vector_into_module(module: torch.nn.Module, pv: ParameterVector) -> None:
    expected = tuple((n, tuple(p.shape)) for n, p in module.named_parameters())
    if expected != pv.layout:
        raise ValueError("ParameterVector layout does not match module")
    arrays = pv.unflatten()
    with torch.no_grad():
        for name, p in module.named_parameters():
            p.copy_(torch.from_numpy(arrays[name]))


def vector_to_tensors(pv: ParameterVector, requires_grad: bool = False) -> dict[str, torch.Tensor]:
    """Named tensors for torch.func.functional_call, in layout order."""
    out = {}
    for name, arr in pv.unflatten().items():
        t = torch.from_numpy(arr)
        if requires_grad:
            t = t.requires_grad_(True)
        out[name] = t
    return out


def tensors_to_vector(tensors: dict[str, torch.Tensor]) -> ParameterVector:
    named = {n: t.detach().cpu().numpy() for n, t in tensors.items()}
    return flatten_arrays(named)


def flat_tensor(tensors: dict[str, torch.Tensor] | list[torch.Tensor]) -> torch.Tensor:
    """Concatenate tensors into one flat tensor, preserving the autograd graph."""
    if isinstance(tensors, dict):
        tensors = list(tensors.values())
    return torch.cat([t.reshape(-1) for t in tensors])


def config_digest(obj) -> str:
    """Stable digest of a JSON-serializable config structure."""
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, default=str).encode()
    ).hexdigest()


def array_digest(arr: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(str(arr.dtype).encode())
    h.update(str(arr.shape).encode())
    h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
