"""
Semantic Routing for SoLA Desk
Key memory, nearest-key search, the master decision rule and key-deletion rollback.

Keys are stored L2-normalized. With the default cosine metric the distance is
``1 - cos(q, k)``; a query routes to the nearest key's module only when that
distance is strictly below ``alpha``.
"""

import hashlib
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import LifecycleError, NumericError, ParameterError, StateError

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.01
DISTANCE_METRICS = ("cosine", "euclidean")


class DecisionKind(str, Enum):
    BASE_ONLY = "base_only"
    ADAPTED = "adapted"


@dataclass(frozen=True)
class Decision:
    """Routing outcome of one forward pass, shared by every edited layer."""

    kind: DecisionKind
    distance: float
    lora_id: Optional[int] = None
    matched_entry: Optional[Tuple[int, int]] = None

    @property
    def is_adapted(self) -> bool:
        return self.kind is DecisionKind.ADAPTED

    def same_route(self, other: "Decision") -> bool:
        """True when both decisions pick the same module (or both fall back to base)."""
        return self.kind is other.kind and self.lora_id == other.lora_id

    @classmethod
    def base_only(cls, distance: float = math.inf) -> "Decision":
        return cls(DecisionKind.BASE_ONLY, float(distance))

    @classmethod
    def adapted(cls, lora_id: int, distance: float,
                matched_entry: Optional[Tuple[int, int]] = None) -> "Decision":
        return cls(DecisionKind.ADAPTED, float(distance), int(lora_id), matched_entry)


@dataclass(frozen=True)
class KeyEntry:
    key: np.ndarray
    lora_id: int
    edit_id: int
    instance_id: int

    @property
    def ident(self) -> Tuple[int, int]:
        return (self.edit_id, self.instance_id)

    def to_dict(self) -> Dict[str, Any]:
        return {"key": self.key.tolist(), "lora_id": self.lora_id,
                "edit_id": self.edit_id, "instance_id": self.instance_id}


def normalize(q: np.ndarray) -> np.ndarray:
    """
    L2-normalize a query vector.

    Raises:
        NumericError: If q is non-finite or has zero norm
    """
    vec = np.asarray(q, dtype=np.float64).ravel()
    if not np.all(np.isfinite(vec)):
        raise NumericError("Query vector contains non-finite values")
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise NumericError("Query vector has zero norm")
    return vec / norm


def pairwise_distance(keys: np.ndarray, q: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """
    Distances from the normalized query ``q`` to every row of normalized ``keys``.

    Each row is reduced on its own, so a key's distance does not depend on which
    other keys share the table. For unit vectors ``1 - cos(q, k) == |q - k|^2 / 2``;
    the squared-difference form is exactly zero for an identical key.
    """
    if metric not in DISTANCE_METRICS:
        raise ParameterError(f"Unknown distance metric: {metric}")
    diff = keys - q
    squared = np.sum(diff * diff, axis=1)
    if metric == "cosine":
        return 0.5 * squared
    return np.sqrt(squared)


class KeyMemory:
    """
    Ordered table of (key, lora_id, edit_id, instance_id) entries.

    Entries are only appended inside an ``editing(edit_id)`` window and only
    removed by ``rollback``; an entry is never modified in place.
    """

    def __init__(self, alpha: float = DEFAULT_ALPHA, metric: str = "cosine"):
        if not alpha > 0:
            raise ParameterError(f"Routing threshold alpha must be positive, got {alpha}")
        if metric not in DISTANCE_METRICS:
            raise ParameterError(f"Unknown distance metric: {metric}. Allowed: {DISTANCE_METRICS}")
        self.alpha = float(alpha)
        self.metric = metric
        self.entries: List[KeyEntry] = []
        self._open_edit: Optional[int] = None
        self._matrix: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[KeyEntry]:
        return iter(self.entries)

    @contextmanager
    def editing(self, edit_id: int):
        """Open the single write window for one edit."""
        if self._open_edit is not None:
            raise LifecycleError(f"Edit {self._open_edit} is still writing keys")
        self._open_edit = int(edit_id)
        try:
            yield self
        finally:
            self._open_edit = None

    @property
    def keys(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = (np.vstack([e.key for e in self.entries]) if self.entries
                            else np.zeros((0, 0), dtype=np.float64))
        return self._matrix

    def edit_ids(self) -> List[int]:
        return sorted({e.edit_id for e in self.entries})

    def distances(self, q: np.ndarray) -> np.ndarray:
        return pairwise_distance(self.keys, normalize(q), self.metric)

    def content_hash(self) -> int:
        """64-bit digest over every entry's ids and key bytes, in table order."""
        digest = hashlib.blake2b(digest_size=8)
        for entry in self.entries:
            digest.update(np.asarray([entry.lora_id, entry.edit_id, entry.instance_id], dtype=np.int64).tobytes())
            digest.update(entry.key.tobytes())
        return int.from_bytes(digest.digest(), "big")

    def entry_hashes(self) -> Dict[Tuple[int, int], bytes]:
        return {e.ident: e.key.tobytes() for e in self.entries}

    def _append(self, entry: KeyEntry) -> None:
        self.entries.append(entry)
        self._matrix = None

    def _remove_edit(self, edit_id: int) -> int:
        kept = [e for e in self.entries if e.edit_id != edit_id]
        removed = len(self.entries) - len(kept)
        self.entries = kept
        self._matrix = None
        return removed

    def to_dict(self) -> Dict[str, Any]:
        return {"alpha": self.alpha, "metric": self.metric,
                "entries": [e.to_dict() for e in self.entries]}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "KeyMemory":
        memory = cls(alpha=float(data["alpha"]), metric=data.get("metric", "cosine"))
        for item in data["entries"]:
            key = np.array(item["key"], dtype=np.float64)
            key.flags.writeable = False
            memory._append(KeyEntry(key, int(item["lora_id"]), int(item["edit_id"]), int(item["instance_id"])))
        return memory


def write_key(mem: KeyMemory, q: np.ndarray, lora_id: int, edit_id: int, instance_id: int) -> KeyEntry:
    """
    Append the normalized query as a key of ``lora_id``.

    Raises:
        LifecycleError: If no editing window for ``edit_id`` is open
        StateError: If (edit_id, instance_id) is already stored
        NumericError: If q is non-finite or zero
    """
    if mem._open_edit != edit_id:
        raise LifecycleError(f"Keys for edit {edit_id} can only be written while that edit is open")
    if any(e.ident == (edit_id, instance_id) for e in mem.entries):
        raise StateError(f"Key for edit {edit_id}, instance {instance_id} already exists")
    key = normalize(q)
    key.flags.writeable = False
    entry = KeyEntry(key, int(lora_id), int(edit_id), int(instance_id))
    mem._append(entry)
    return entry


def nearest_key(mem: KeyMemory, q: np.ndarray) -> Optional[Tuple[KeyEntry, float]]:
    """
    Entry minimizing the distance to ``q``; ties go to the lowest (edit_id, instance_id).

    Returns:
        (entry, distance), or None when the memory is empty (the caller routes to base)
    """
    if not mem.entries:
        return None
    dist = mem.distances(q)
    best = float(dist.min())
    candidates = np.flatnonzero(dist == best)
    index = min(candidates, key=lambda i: mem.entries[i].ident)
    return mem.entries[int(index)], best


def master_decide(mem: KeyMemory, trace) -> Decision:
    """
    Decide base-vs-adapted once, at the master layer, from ``trace.query_vector``.

    Adapted iff the nearest key is strictly closer than alpha; ``d == alpha`` routes to base.
    """
    return route(mem, trace.query_vector)


def rollback(mem: KeyMemory, edit_id: int) -> int:
    """Delete every key of ``edit_id``; returns how many entries were removed."""
    if mem._open_edit is not None:
        raise LifecycleError(f"Cannot roll back while edit {mem._open_edit} is writing keys")
    removed = mem._remove_edit(int(edit_id))
    if removed:
        logger.info(f"↩️ Rolled back edit {edit_id}: removed {removed} key(s)")
    else:
        logger.debug(f"Rollback of edit {edit_id} removed nothing")
    return removed


def route(mem: KeyMemory, q: np.ndarray) -> Decision:
    """Decision for a bare query vector (no trace)."""
    found = nearest_key(mem, q)
    if found is None:
        return Decision.base_only()
    entry, distance = found
    if distance < mem.alpha:
        return Decision.adapted(entry.lora_id, distance, entry.ident)
    return Decision.base_only(distance)


def mismatch_count(mem: KeyMemory, assignments: Sequence[int], queries: Sequence[np.ndarray]) -> int:
    """
    Number of queries whose retrieved lora_id differs from the edit-time assignment.

    A query that falls back to the base model counts as a mismatch.
    """
    if len(assignments) != len(queries):
        raise ParameterError(f"{len(assignments)} assignments but {len(queries)} queries")
    mismatches = 0
    for assigned, q in zip(assignments, queries):
        decision = route(mem, q)
        if not decision.is_adapted or decision.lora_id != int(assigned):
            mismatches += 1
    return mismatches


class SemanticRouter:
    """Router over (KeyMemory, LoraPool), invoked by the model at the master layer."""

    def __init__(self, memory: KeyMemory, pool):
        self.memory = memory
        self.pool = pool

    def __call__(self, trace):
        decision = master_decide(self.memory, trace)
        module = self.pool[decision.lora_id] if decision.is_adapted else None
        return decision, module
