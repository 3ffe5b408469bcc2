"""Trainable tensor storage keyed by (operator id, node id)."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

import numpy as np

from ..graph import OperatorGraph

Key = tuple  # (operator id, node id)


@dataclass
class ParamStore:
    tensors: dict = field(default_factory=dict)
    frozen: frozenset = frozenset()

    def __getitem__(self, key: Key) -> np.ndarray:
        return self.tensors[key]

    def __setitem__(self, key: Key, value: np.ndarray) -> None:
        self.tensors[key] = value

    def __contains__(self, key) -> bool:
        return key in self.tensors

    def __iter__(self) -> Iterator:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def keys(self):
        return self.tensors.keys()

    def items(self):
        return self.tensors.items()

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.tensors.items()}, self.frozen)

    def for_operator(self, op_id: int) -> dict:
        """node id -> tensor view for one operator."""
        return {nid: v for (oid, nid), v in self.tensors.items() if oid == op_id}

    def without_operators(self, op_ids: Iterable[int]) -> "ParamStore":
        drop = set(op_ids)
        return ParamStore({k: v for k, v in self.tensors.items() if k[0] not in drop},
                          frozenset(k for k in self.frozen if k[0] not in drop))

    def merged(self, other: Mapping) -> "ParamStore":
        t = dict(self.tensors)
        t.update(other.tensors if isinstance(other, ParamStore) else other)
        return ParamStore(t, self.frozen)

    def freeze_all_except(self, op_ids: Iterable[int]) -> "ParamStore":
        keep = set(op_ids)
        return ParamStore(self.tensors, frozenset(k for k in self.tensors if k[0] not in keep))

    def total_elements(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))


def digest(tensors: Mapping) -> str:
    """Content digest of a parameter fragment (order independent)."""
    h = hashlib.blake2b(digest_size=8)
    for k in sorted(tensors):
        v = np.ascontiguousarray(tensors[k], dtype=np.float32)
        h.update(repr((k, v.shape)).encode())
        h.update(v.tobytes())
    return h.hexdigest()


def init_tensor(node, rng: np.random.Generator, fan_in: int | None = None) -> np.ndarray:
    """Initial value of a parameter node according to its init tag."""
    shape = node.shape
    kind = node.init
    if kind == "zeros":
        return np.zeros(shape, np.float32)
    if kind == "ones":
        return np.ones(shape, np.float32)
    if kind == "value":
        return np.full(shape, node.value, np.float32)
    if kind == "poly3":
        v = np.zeros(shape, np.float32)
        v[1] = 1.0
        return v
    if kind == "he":
        if fan_in is None:
            # matmul weights are [in, out]; convolution weights [out, in, k, k]
            fan_in = int(np.prod(shape[1:])) if len(shape) >= 3 else int(shape[0])
        std = np.sqrt(2.0 / max(fan_in, 1))
        return (rng.standard_normal(shape) * std).astype(np.float32)
    if kind == "normal":
        return (rng.standard_normal(shape) * 0.1).astype(np.float32)
    raise ValueError(f"unknown init {kind!r}")


def init_operator(op_id: int, g: OperatorGraph, rng: np.random.Generator,
                  inherit: Mapping | None = None) -> dict:
    """Fresh tensors for every parameter node of ``g``.

    Tensors in ``inherit`` (keyed like the result) are reused when the shape
    still matches, so a child keeps its parent's fine-tuned weights.
    """
    out = {}
    for n in g.nodes.values():
        if not n.is_parameter:
            continue
        key = (op_id, n.id)
        old = None if inherit is None else inherit.get(key)
        if old is not None and tuple(old.shape) == tuple(n.shape):
            out[key] = old
        else:
            out[key] = init_tensor(n, rng)
    return out
