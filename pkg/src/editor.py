"""
Lifelong Editor for SoLA Desk
Sequential editing loop: allocate a module, train only it, write its keys, freeze it.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .adapters import LORA_INIT_STD, LoraGrads, LoraModule, LoraPool, check_trainable, freeze, new_module
from .errors import ConfigError, LifecycleError, ParameterError, ShapeError, SolaIndexError, StateError
from .model import BaseModel, LabeledSet, _check_tokens, backward_lora, batch_loss, forward
from .numerics import SeededRng
from .routing import DEFAULT_ALPHA, KeyMemory, SemanticRouter, rollback, write_key
from .utils import load_json, save_json

logger = logging.getLogger(__name__)

LORA_STREAM = 2

Instance = Tuple[np.ndarray, int]


@dataclass
class TrainRecipe:
    """SGD with cosine decay from ``lr0`` to 0 over ``epochs`` passes."""

    lr0: float = 0.05
    epochs: int = 40
    rank: int = 4
    init_std: float = LORA_INIT_STD

    def __post_init__(self):
        if self.lr0 < 0:
            raise ConfigError(f"lr0 must be >= 0, got {self.lr0}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.rank < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")
        if not self.init_std > 0:
            raise ConfigError(f"init_std must be positive, got {self.init_std}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrainRecipe":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown recipe keys: {sorted(unknown)}")
        return cls(**dict(data))


@dataclass
class EditTask:
    """One edit: (tokens, new label) instances plus an optional unseen rephrase probe."""

    edit_id: int
    instances: List[Instance]
    probe: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.instances:
            raise ParameterError(f"Edit {self.edit_id} has no instances")
        self.instances = [(np.asarray(tokens, dtype=np.int64), int(label)) for tokens, label in self.instances]
        if self.probe is not None:
            self.probe = np.asarray(self.probe, dtype=np.int64)

    def validate(self, config) -> None:
        for tokens, label in self.instances:
            _check_tokens(config, tokens)
            if not 0 <= label < config.n_classes:
                raise SolaIndexError(f"Edit {self.edit_id}: label {label} out of range for {config.n_classes} classes")

    @property
    def labeled(self) -> LabeledSet:
        return LabeledSet(np.vstack([t for t, _ in self.instances]),
                          np.array([y for _, y in self.instances], dtype=np.int64))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "edit_id": self.edit_id,
            "instances": [{"tokens": tokens.tolist(), "label": label} for tokens, label in self.instances],
            "probe": None if self.probe is None else self.probe.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EditTask":
        instances = [(np.array(item["tokens"], dtype=np.int64), int(item["label"])) for item in data["instances"]]
        probe = data.get("probe")
        return cls(int(data["edit_id"]), instances, None if probe is None else np.array(probe, dtype=np.int64))


@dataclass
class EditRecord:
    edit_id: int
    lora_id: int
    es: List[int]
    final_loss: float
    trainable_params: int
    wall_time: float = field(default=0.0, compare=False)

    @property
    def success_rate(self) -> float:
        return sum(self.es) / len(self.es)

    def to_dict(self, include_time: bool = False) -> Dict[str, Any]:
        data = asdict(self)
        if not include_time:
            data.pop("wall_time")
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EditRecord":
        return cls(int(data["edit_id"]), int(data["lora_id"]), [int(v) for v in data["es"]],
                   float(data["final_loss"]), int(data["trainable_params"]),
                   float(data.get("wall_time", 0.0)))


def cosine_lr(step: int, total: int, lr0: float) -> float:
    """
    ``lr0 * (1 + cos(pi * step / total)) / 2``.

    Raises:
        ParameterError: If total < 1 or step is outside [0, total]
    """
    if total < 1 or not 0 <= step <= total:
        raise ParameterError(f"Need 0 <= step <= total and total >= 1, got step={step}, total={total}")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total))


def sgd_step(module: LoraModule, grads: Mapping[str, LoraGrads], lr: float) -> None:
    """
    In-place ``param -= lr * grad`` on the module's factors.

    Raises:
        FrozenModuleError: If the module is frozen
        ShapeError: If a gradient does not match its factor
    """
    check_trainable(module)
    for name, grad in grads.items():
        factors = module[name]
        if grad.a.shape != factors.a.shape or grad.b.shape != factors.b.shape:
            raise ShapeError(f"Gradient shapes {grad.a.shape}/{grad.b.shape} do not match "
                             f"factors {factors.a.shape}/{factors.b.shape} at '{name}'")
        factors.a -= lr * grad.a
        factors.b -= lr * grad.b


def module_loss(model: BaseModel, module: Optional[LoraModule], instances: Sequence[Instance]) -> float:
    """Mean cross-entropy over the instances with ``module`` forced active."""
    losses = [batch_loss(forward(model, tokens, adapter=module).batch_logits, np.array([label]))
              for tokens, label in instances]
    return float(np.mean(losses))


def train_module(model: BaseModel, module: LoraModule, instances: Sequence[Instance],
                 recipe: TrainRecipe) -> float:
    """
    Train one unfrozen module on its instances with every other module inactive.

    Each instance is one SGD step; an epoch visits the instances in order.

    Returns:
        float: Mean loss over the instances after the last step
    """
    total = recipe.epochs * len(instances)
    step = 0
    for epoch in range(recipe.epochs):
        for tokens, label in instances:
            trace = forward(model, tokens, adapter=module)
            grads = backward_lora(model, trace, label, module)
            sgd_step(module, grads, cosine_lr(step, total, recipe.lr0))
            step += 1
        if epoch == 0 or epoch + 1 == recipe.epochs:
            logger.debug(f"LoRA {module.lora_id} epoch {epoch + 1}/{recipe.epochs}: "
                         f"loss {module_loss(model, module, instances):.4f}")
    return module_loss(model, module, instances)


def apply_edit(model: BaseModel, pool: LoraPool, mem: KeyMemory, task: EditTask,
               recipe: TrainRecipe, rng: SeededRng) -> EditRecord:
    """
    Apply one edit.

    Allocates a module (init stream ``rng.child(lora_id)``), trains only it,
    writes one key per instance from the base query, freezes it and checks
    that every earlier module and key is byte-unchanged.

    Args:
        model: Frozen base model
        pool: LoRA pool (gains one frozen module)
        mem: Key memory (gains one key per instance)
        task: The edit
        recipe: Training recipe
        rng: Root stream for module initialization

    Returns:
        EditRecord: Immediate per-instance success and training summary

    Raises:
        LifecycleError: If a module is still unfrozen or the edit is already applied
        StateError: If a frozen module or stored key changed during the edit
    """
    start = time.perf_counter()
    if pool.active is not None:
        raise LifecycleError(f"LoRA module {pool.active.lora_id} is still being edited")
    if task.edit_id in mem.edit_ids():
        raise LifecycleError(f"Edit {task.edit_id} is already applied")
    task.validate(model.config)

    frozen_before = pool.frozen_hashes()
    keys_before = mem.entry_hashes()

    lora_id = len(pool)
    new_module(pool, model.config, recipe.rank, rng.child(lora_id), recipe.init_std)
    module = pool[lora_id]
    try:
        final_loss = train_module(model, module, task.instances, recipe)
        with mem.editing(task.edit_id):
            for instance_id, (tokens, _) in enumerate(task.instances):
                write_key(mem, forward(model, tokens).query_vector, lora_id, task.edit_id, instance_id)
    except Exception:
        pool.modules.pop()
        mem._remove_edit(task.edit_id)
        raise
    freeze(pool, lora_id)

    frozen_after = pool.frozen_hashes()
    keys_after = mem.entry_hashes()
    if any(frozen_after.get(i) != h for i, h in frozen_before.items()) or \
            any(keys_after.get(i) != k for i, k in keys_before.items()):
        logger.error(f"❌ Edit {task.edit_id} changed frozen state")
        raise StateError(f"Edit {task.edit_id} modified an earlier frozen module or key")

    router = SemanticRouter(mem, pool)
    es = [int(forward(model, tokens, router=router).prediction == label) for tokens, label in task.instances]
    record = EditRecord(task.edit_id, lora_id, es, final_loss, module.num_parameters,
                        time.perf_counter() - start)
    status = "✅" if all(es) else "⚠️"
    logger.info(f"{status} Edit {task.edit_id} -> LoRA {lora_id}: ES {sum(es)}/{len(es)}, "
                f"loss {final_loss:.4f}")
    return record


class LifelongEditor:
    """
    Owns a frozen base model plus its LoRA pool and key memory.

    Edits are applied strictly in order; rollback deletes keys only.
    """

    def __init__(self, model: BaseModel, recipe: Optional[TrainRecipe] = None,
                 alpha: float = DEFAULT_ALPHA, metric: str = "cosine", seed: int = 0,
                 pool: Optional[LoraPool] = None, memory: Optional[KeyMemory] = None):
        self.model = model
        self.recipe = recipe or TrainRecipe()
        self.seed = int(seed)
        self.pool = pool if pool is not None else LoraPool()
        self.memory = memory if memory is not None else KeyMemory(alpha, metric)
        self.rng = SeededRng(self.seed).child(LORA_STREAM)
        self.records: List[EditRecord] = []
        self.progress: List[Dict[str, Any]] = []
        logger.info(f"LifelongEditor initialized: alpha {self.memory.alpha}, "
                    f"rank {self.recipe.rank}, {len(self.pool)} existing module(s)")

    @property
    def router(self) -> SemanticRouter:
        return SemanticRouter(self.memory, self.pool)

    def edit(self, task: EditTask) -> EditRecord:
        record = apply_edit(self.model, self.pool, self.memory, task, self.recipe, self.rng)
        self.records.append(record)
        return record

    def edit_stream(self, tasks: Sequence[EditTask], holdout: Optional[LabeledSet] = None) -> List[EditRecord]:
        """
        Apply every task in order.

        With ``holdout`` given, a progress row (ERR over edits so far, TRR on the
        holdout) is appended to ``self.progress`` after each edit.
        """
        applied: List[EditTask] = []
        for task in tasks:
            record = self.edit(task)
            applied.append(task)
            if holdout is not None:
                self.progress.append({
                    "edit_index": len(applied),
                    "edit_id": task.edit_id,
                    "es": record.success_rate,
                    "err_so_far": self.accuracy([inst for t in applied for inst in t.instances]),
                    "trr": self.accuracy(list(zip(holdout.tokens, holdout.labels))),
                })
        if self.records:
            es_rate = float(np.mean([r.success_rate for r in self.records]))
            logger.info(f"✅ Edit stream done: {len(tasks)} edits, ES rate {es_rate:.1%}, "
                        f"{len(self.memory)} keys")
        return list(self.records)

    def rollback(self, edit_id: int) -> int:
        return rollback(self.memory, edit_id)

    def trace(self, tokens):
        return forward(self.model, tokens, router=self.router)

    def logits(self, tokens) -> np.ndarray:
        return self.trace(tokens).logits

    def predict(self, tokens) -> int:
        return self.trace(tokens).prediction

    def accuracy(self, instances: Sequence[Instance]) -> float:
        if not instances:
            return 1.0
        correct = sum(self.predict(tokens) == int(label) for tokens, label in instances)
        return correct / len(instances)

    def save(self, directory) -> None:
        directory = Path(directory)
        save_json(self.pool.to_list(), directory / "pool.json")
        save_json(self.memory.to_dict(), directory / "memory.json")
        logger.info(f"💾 Saved {len(self.pool)} LoRA module(s) and {len(self.memory)} key(s) to {directory}")

    @classmethod
    def load(cls, model: BaseModel, directory, recipe: Optional[TrainRecipe] = None,
             seed: int = 0) -> "LifelongEditor":
        directory = Path(directory)
        pool = LoraPool.from_list(load_json(directory / "pool.json"))
        memory = KeyMemory.from_dict(load_json(directory / "memory.json"))
        return cls(model, recipe, seed=seed, pool=pool, memory=memory)
