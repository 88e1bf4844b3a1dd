"""
LoRA Adapters for SoLA Desk
Per-edit low-rank factor pairs, their trainable -> frozen lifecycle, and the LoRA pool.

A module holds one (B, A) pair per edited layer so that ``h = W0 x + B A x``.
No alpha/r scaling is applied.
"""

import hashlib
import logging
from dataclasses import dataclass
from typing import Any, Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from .errors import FrozenModuleError, LifecycleError, ParameterError, ShapeError
from .numerics import Mat, SeededRng, gaussian_init, mat_from_json, mat_to_json, zeros

logger = logging.getLogger(__name__)

# A ~ N(0, 1). B starts at zero and its first update is proportional to A x.
LORA_INIT_STD = 1.0


@dataclass
class LoraFactors:
    """Factor pair for one edited layer: ``a`` is (r, k), ``b`` is (d, r)."""

    a: Mat
    b: Mat

    def __post_init__(self):
        if self.a.ndim != 2 or self.b.ndim != 2 or self.a.shape[0] != self.b.shape[1]:
            raise ShapeError(f"Incompatible LoRA factors: a {self.a.shape}, b {self.b.shape}")

    @property
    def rank(self) -> int:
        return int(self.a.shape[0])

    @property
    def shape(self) -> Tuple[int, int]:
        """(d, k) of the weight this pair adapts."""
        return int(self.b.shape[0]), int(self.a.shape[1])

    @property
    def num_parameters(self) -> int:
        return int(self.a.size + self.b.size)

    @classmethod
    def init(cls, d: int, k: int, rank: int, rng: SeededRng,
             std: float = LORA_INIT_STD) -> "LoraFactors":
        """A ~ N(0, std^2), B = 0."""
        if rank < 1 or rank > min(d, k):
            raise ParameterError(f"LoRA rank must satisfy 1 <= r <= min(d, k) = {min(d, k)}, got {rank}")
        return cls(a=gaussian_init(rng, rank, k, std), b=zeros(d, rank))


@dataclass
class LoraGrads:
    a: Mat
    b: Mat


class LoraModule:
    """
    One edit's adapter: a factor pair per edited layer plus a frozen flag.

    Once frozen the factor arrays are made read-only, so the bytes cannot
    change for the rest of the stream.
    """

    def __init__(self, lora_id: int, per_layer: Dict[str, LoraFactors], frozen: bool = False):
        if not per_layer:
            raise ParameterError("A LoRA module needs at least one edited layer")
        self.lora_id = int(lora_id)
        self.per_layer = dict(per_layer)
        self.frozen = False
        if frozen:
            self.freeze()

    def __repr__(self) -> str:
        return f"LoraModule(lora_id={self.lora_id}, layers={list(self.per_layer)}, frozen={self.frozen})"

    def __getitem__(self, layer: str) -> LoraFactors:
        return self.per_layer[layer]

    def __contains__(self, layer: str) -> bool:
        return layer in self.per_layer

    @property
    def rank(self) -> int:
        return next(iter(self.per_layer.values())).rank

    @property
    def num_parameters(self) -> int:
        return sum(f.num_parameters for f in self.per_layer.values())

    def freeze(self) -> None:
        if self.frozen:
            raise LifecycleError(f"LoRA module {self.lora_id} is already frozen")
        for factors in self.per_layer.values():
            factors.a.flags.writeable = False
            factors.b.flags.writeable = False
        self.frozen = True

    def content_hash(self) -> int:
        return content_hash(self)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "lora_id": self.lora_id,
            "frozen": self.frozen,
            "per_layer": {name: {"a": mat_to_json(f.a), "b": mat_to_json(f.b)}
                          for name, f in self.per_layer.items()},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LoraModule":
        per_layer = {name: LoraFactors(a=mat_from_json(f["a"]), b=mat_from_json(f["b"]))
                     for name, f in data["per_layer"].items()}
        return cls(int(data["lora_id"]), per_layer, frozen=bool(data["frozen"]))


def init_module(lora_id: int, layer_shapes: Mapping[str, Tuple[int, int]], rank: int,
                rng: SeededRng, std: float = LORA_INIT_STD) -> LoraModule:
    """
    Build a fresh, unfrozen module with one factor pair per edited layer.

    Args:
        lora_id: Identifier of the new module
        layer_shapes: Edited layer name -> (d, k) of its frozen weight, in forward order
        rank: LoRA rank r
        rng: Stream used for the Gaussian init of every A
        std: Init standard deviation of A
    """
    per_layer = {name: LoraFactors.init(d, k, rank, rng, std) for name, (d, k) in layer_shapes.items()}
    return LoraModule(lora_id, per_layer)


class LoraPool:
    """Append-only pool of LoRA modules with dense ids 0..M-1."""

    def __init__(self, modules: Optional[List[LoraModule]] = None):
        self.modules: List[LoraModule] = []
        for module in modules or []:
            if module.lora_id != len(self.modules):
                raise LifecycleError(f"Pool ids must be dense, got {module.lora_id} at position {len(self.modules)}")
            self.modules.append(module)
        if sum(not m.frozen for m in self.modules) > 1:
            raise LifecycleError("A pool may hold at most one unfrozen module")

    def __len__(self) -> int:
        return len(self.modules)

    def __getitem__(self, lora_id: int) -> LoraModule:
        return self.modules[lora_id]

    def __iter__(self) -> Iterator[LoraModule]:
        return iter(self.modules)

    @property
    def active(self) -> Optional[LoraModule]:
        """The module currently being edited, if any."""
        for module in self.modules:
            if not module.frozen:
                return module
        return None

    def frozen_hashes(self) -> Dict[int, int]:
        return {m.lora_id: content_hash(m) for m in self.modules if m.frozen}

    def to_list(self) -> List[Dict[str, Any]]:
        return [m.to_dict() for m in self.modules]

    @classmethod
    def from_list(cls, data: List[Mapping[str, Any]]) -> "LoraPool":
        return cls([LoraModule.from_dict(item) for item in data])


def new_module(pool: LoraPool, config, rank: int, rng: SeededRng,
               std: float = LORA_INIT_STD) -> int:
    """
    Append a fresh unfrozen module covering every edited layer of ``config``.

    Raises:
        LifecycleError: If another module is still unfrozen
        ParameterError: If the rank is invalid for a layer
    """
    if pool.active is not None:
        raise LifecycleError(f"LoRA module {pool.active.lora_id} is still being edited")
    lora_id = len(pool)
    pool.modules.append(init_module(lora_id, config.edited_layer_shapes(), rank, rng, std))
    logger.debug(f"Allocated LoRA module {lora_id} (rank {rank})")
    return lora_id


def freeze(pool: LoraPool, lora_id: int) -> None:
    pool[lora_id].freeze()
    logger.debug(f"Froze LoRA module {lora_id}")


def content_hash(module: LoraModule) -> int:
    """Stable 64-bit digest of the module's layer names and factor bytes."""
    digest = hashlib.blake2b(digest_size=8)
    for name in sorted(module.per_layer):
        factors = module.per_layer[name]
        digest.update(name.encode("utf-8"))
        for mat in (factors.a, factors.b):
            digest.update(np.asarray(mat.shape, dtype=np.int64).tobytes())
            digest.update(np.ascontiguousarray(mat, dtype=np.float64).tobytes())
    return int.from_bytes(digest.digest(), "big")


def apply_delta(factors: LoraFactors, x: Mat) -> Mat:
    """
    Low-rank update ``B (A x)`` for column-layout input ``x`` of shape (k, n).

    Raises:
        ShapeError: If x has the wrong number of rows
    """
    if x.ndim != 2 or x.shape[0] != factors.a.shape[1]:
        raise ShapeError(f"Cannot apply LoRA factors with a {factors.a.shape} to input {x.shape}")
    return factors.b @ (factors.a @ x)


def check_trainable(module: LoraModule) -> None:
    if module.frozen:
        raise FrozenModuleError(f"LoRA module {module.lora_id} is frozen")


def trainable_parameters(config, rank: int) -> int:
    """Per-edit trainable count: sum over edited layers of r * (d + k)."""
    return sum(rank * (d + k) for d, k in config.edited_layer_shapes().values())
