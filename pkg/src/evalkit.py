"""
Evaluation Kit for SoLA Desk
Synthetic benchmark generation, holdout collision clearing and the ES / ERR / TRR metric suite.

The base task labels a token sequence by ``sum(tokens) mod n_classes``. Edits
take distinct test inputs and relabel them to ``(y + 1) mod n_classes``.
"""

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Set, Tuple

import numpy as np

from .adapters import LoraPool
from .editor import EditRecord, EditTask
from .errors import ConfigError, ParameterError
from .model import BaseModel, LabeledSet, ModelConfig, forward
from .numerics import SeededRng
from .routing import KeyMemory, SemanticRouter, mismatch_count, nearest_key, rollback, write_key
from .utils import calculate_statistics, load_json, read_jsonl, save_json, write_jsonl

logger = logging.getLogger(__name__)

TRAIN_STREAM, TEST_STREAM, EDIT_STREAM, HOLDOUT_STREAM, CLEAR_STREAM = range(5)
SEPARATE_STREAM = 6  # 5 draws rollback picks
ES_TARGET = 0.95
MAX_RESAMPLE_ATTEMPTS = 100


@dataclass
class BenchmarkConfig:
    seed: int = 7
    n_edits: int = 100
    instances_per_edit: int = 1
    holdout_size: int = 500
    n_train: int = 4096
    n_test: int = 1024

    def __post_init__(self):
        for name in ("n_edits", "instances_per_edit", "holdout_size", "n_train", "n_test"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "BenchmarkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown benchmark keys: {sorted(unknown)}")
        return cls(**dict(data))


@dataclass
class Benchmark:
    base_train: LabeledSet
    base_test: LabeledSet
    edit_stream: List[EditTask]
    holdout: LabeledSet
    seed: int

    @property
    def edit_instances(self):
        return [inst for task in self.edit_stream for inst in task.instances]


def task_labels(tokens: np.ndarray, n_classes: int) -> np.ndarray:
    return np.asarray(tokens, dtype=np.int64).sum(axis=-1) % n_classes


def rephrase(tokens: np.ndarray, rng: SeededRng) -> np.ndarray:
    """Permute every token but the last; the base label is unchanged."""
    tokens = np.asarray(tokens, dtype=np.int64)
    head = tokens[:-1][rng.permutation(len(tokens) - 1)]
    return np.concatenate([head, tokens[-1:]])


def _row_key(tokens: np.ndarray) -> bytes:
    return np.ascontiguousarray(tokens, dtype=np.int64).tobytes()


def _relabeled_task(edit_id: int, tokens: np.ndarray, label: int, n_instances: int, n_classes: int,
                    rng: SeededRng) -> EditTask:
    y_new = (label + 1) % n_classes
    variants = [tokens] + [rephrase(tokens, rng) for _ in range(n_instances - 1)]
    return EditTask(edit_id, [(v, y_new) for v in variants], rephrase(tokens, rng))


def _task_rows(task: EditTask) -> List[bytes]:
    rows = [_row_key(t) for t, _ in task.instances]
    return rows + ([_row_key(task.probe)] if task.probe is not None else [])


def _labeled(rng: SeededRng, count: int, config: ModelConfig) -> LabeledSet:
    tokens = rng.integers(0, config.vocab, size=(count, config.seq_len)).astype(np.int64)
    return LabeledSet(tokens, task_labels(tokens, config.n_classes))


def _fresh_sequence(rng: SeededRng, config: ModelConfig, taken: Set[bytes]) -> np.ndarray:
    for _ in range(MAX_RESAMPLE_ATTEMPTS):
        tokens = rng.integers(0, config.vocab, size=config.seq_len).astype(np.int64)
        if _row_key(tokens) not in taken:
            return tokens
    raise ParameterError(f"Could not draw a fresh sequence in {MAX_RESAMPLE_ATTEMPTS} attempts")


def gen_benchmark(model_config: ModelConfig, config: Optional[BenchmarkConfig] = None) -> Benchmark:
    """
    Generate the synthetic benchmark, deterministically per ``config.seed``.

    Args:
        model_config: Supplies vocab, sequence length and class count
        config: Sizes and seed

    Returns:
        Benchmark: Base splits, edit stream and an upstream holdout disjoint from every edit input

    Raises:
        ParameterError: If there are fewer distinct test inputs than edits
    """
    config = config or BenchmarkConfig()
    root = SeededRng(config.seed)
    n_classes = model_config.n_classes

    base_train = _labeled(root.child(TRAIN_STREAM), config.n_train, model_config)
    base_test = _labeled(root.child(TEST_STREAM), config.n_test, model_config)

    _, first_rows = np.unique(base_test.tokens, axis=0, return_index=True)
    first_rows = np.sort(first_rows)
    if config.n_edits > len(first_rows):
        raise ParameterError(f"{config.n_edits} edits requested but only {len(first_rows)} distinct test inputs")

    edit_rng = root.child(EDIT_STREAM)
    picked = first_rows[np.sort(edit_rng.choice(len(first_rows), config.n_edits))]
    stream: List[EditTask] = []
    taken: Set[bytes] = set()
    for edit_id, row in enumerate(picked):
        task = _relabeled_task(edit_id, base_test.tokens[row], int(base_test.labels[row]),
                               config.instances_per_edit, n_classes, edit_rng)
        stream.append(task)
        taken.update(_task_rows(task))

    holdout_rng = root.child(HOLDOUT_STREAM)
    rows = []
    for _ in range(config.holdout_size):
        tokens = _fresh_sequence(holdout_rng, model_config, taken)
        taken.add(_row_key(tokens))
        rows.append(tokens)
    holdout_tokens = np.vstack(rows)
    holdout = LabeledSet(holdout_tokens, task_labels(holdout_tokens, n_classes))

    logger.info(f"✅ Generated benchmark (seed {config.seed}): {config.n_train} train, {config.n_test} test, "
                f"{config.n_edits} edits x {config.instances_per_edit}, {config.holdout_size} holdout")
    return Benchmark(base_train, base_test, stream, holdout, config.seed)


def align_edit_targets(model: BaseModel, stream: Sequence[EditTask]) -> Tuple[List[EditTask], int]:
    """
    Make every edit target differ from the base prediction.

    Any instance whose target equals the trained base model's prediction is
    retargeted to ``(prediction + 1) mod n_classes``.

    Returns:
        (aligned stream, number of retargeted instances)
    """
    n_classes = model.config.n_classes
    aligned, changed = [], 0
    for task in stream:
        instances = []
        for tokens, label in task.instances:
            pred = forward(model, tokens).prediction
            if pred == label:
                label = (pred + 1) % n_classes
                changed += 1
            instances.append((tokens, label))
        aligned.append(EditTask(task.edit_id, instances, task.probe))
    if changed:
        logger.info(f"⚠️ Retargeted {changed} edit instance(s) that matched the base prediction")
    return aligned, changed


def separate_edit_queries(model: BaseModel, stream: Sequence[EditTask], candidates: LabeledSet,
                          alpha: float, metric: str = "cosine",
                          rng: Optional[SeededRng] = None) -> Tuple[List[EditTask], int]:
    """
    Keep every edit's base queries at least alpha away from those of earlier edits.

    An edit with an instance strictly within alpha of an earlier edit's
    instance is rebuilt from the next unused distinct row of ``candidates``
    (same edit id, relabeled to ``(y + 1) mod n_classes``). When the
    candidates run out the edit is dropped.

    Returns:
        (separated stream, number of rebuilt edits)
    """
    rng = rng or SeededRng(0)
    n_classes = model.config.n_classes
    seen = KeyMemory(alpha, metric)
    taken = {row for task in stream for row in _task_rows(task)}
    _, first_rows = np.unique(candidates.tokens, axis=0, return_index=True)
    spare = iter(r for r in np.sort(first_rows) if _row_key(candidates.tokens[r]) not in taken)

    def queries(task: EditTask) -> List[np.ndarray]:
        return [forward(model, tokens).query_vector for tokens, _ in task.instances]

    def clear(qs: List[np.ndarray]) -> bool:
        for q in qs:
            found = nearest_key(seen, q)
            if found is not None and found[1] < seen.alpha:
                return False
        return True

    separated, rebuilt, dropped = [], 0, 0
    for task in stream:
        qs = queries(task)
        if not clear(qs):
            rebuilt += 1
            edit_id, task = task.edit_id, None
            for row in spare:
                candidate = _relabeled_task(edit_id, candidates.tokens[row], int(candidates.labels[row]),
                                            len(qs), n_classes, rng)
                if any(r in taken for r in _task_rows(candidate)[1:]):
                    continue
                taken.update(_task_rows(candidate))
                candidate_qs = queries(candidate)
                if clear(candidate_qs):
                    task, qs = candidate, candidate_qs
                    break
            if task is None:
                dropped += 1
                continue
        with seen.editing(task.edit_id):
            for m, q in enumerate(qs):
                write_key(seen, q, lora_id=task.edit_id, edit_id=task.edit_id, instance_id=m)
        separated.append(task)
    if rebuilt:
        logger.info(f"⚠️ Resampled {rebuilt - dropped} edit(s) whose queries fell within alpha of an earlier edit")
    if dropped:
        logger.warning(f"⚠️ Dropped {dropped} edit(s): no separable test input left")
    return separated, rebuilt - dropped


def prepare_edit_stream(model: BaseModel, benchmark: Benchmark, alpha: float,
                        metric: str = "cosine") -> List[EditTask]:
    """Separate the edit queries at alpha, then align the targets with the base predictions."""
    stream, _ = separate_edit_queries(model, benchmark.edit_stream, benchmark.base_test, alpha, metric,
                                      SeededRng(benchmark.seed).child(SEPARATE_STREAM))
    return align_edit_targets(model, stream)[0]


class ClearedHoldout(NamedTuple):
    holdout: LabeledSet
    cleared: np.ndarray  # bool mask, False where no clear replacement was found
    resampled: int

    @property
    def unresolved(self) -> int:
        return int(np.sum(~self.cleared))


def clear_holdout(model: BaseModel, memory: KeyMemory, holdout: LabeledSet,
                  exclude: Iterable[np.ndarray], rng: SeededRng,
                  max_attempts: int = MAX_RESAMPLE_ATTEMPTS) -> ClearedHoldout:
    """
    Resample holdout items whose base query lies strictly within alpha of a key.

    Replacements are fresh random sequences outside ``exclude`` and the
    existing holdout. Items still colliding after ``max_attempts`` draws are
    kept and flagged in ``cleared``.
    """
    config = model.config
    taken = {_row_key(t) for t in exclude} | {_row_key(t) for t in holdout.tokens}
    tokens = holdout.tokens.copy()
    cleared = np.ones(len(tokens), dtype=bool)
    resampled = 0

    def collides(seq: np.ndarray) -> bool:
        found = nearest_key(memory, forward(model, seq).query_vector)
        return found is not None and found[1] < memory.alpha

    for i in range(len(tokens)):
        if not collides(tokens[i]):
            continue
        resampled += 1
        for _ in range(max_attempts):
            candidate = _fresh_sequence(rng, config, taken)
            taken.add(_row_key(candidate))
            if not collides(candidate):
                tokens[i] = candidate
                break
        else:
            cleared[i] = False
            logger.warning(f"⚠️ Holdout item {i} still within alpha of a key after {max_attempts} draws")
    if resampled:
        logger.info(f"Resampled {resampled} holdout item(s) colliding with stored keys")
    return ClearedHoldout(LabeledSet(tokens, task_labels(tokens, config.n_classes)), cleared, resampled)


@dataclass
class MetricsReport:
    es_rate: float
    err: float
    trr: float
    trr_base: float
    mismatches: int
    trainable_params_per_edit: int
    total_memory_entries: int
    n_edits: int = 0
    n_rolled_back: int = 0
    edits_correct: int = 0
    restored_to_base: int = 0
    err_defined: bool = True
    holdout_logits_identical: bool = True
    holdout_unresolved: int = 0
    generalization_rate: Optional[float] = None
    loss_stats: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("es_rate", "err", "trr", "trr_base"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1], got {value}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_row(self) -> Dict[str, Any]:
        """Flat scalar row for CSV aggregation."""
        row = {k: v for k, v in self.to_dict().items() if k != "loss_stats"}
        row.update({f"loss_{k}": v for k, v in self.loss_stats.items()})
        return row

    def check(self, es_target: float = ES_TARGET) -> List[str]:
        """Mechanism properties that must hold exactly, plus the ES target; returns a list of failures."""
        failures = []
        if self.es_rate < es_target:
            failures.append(f"ES rate {self.es_rate:.1%} is below the {es_target:.0%} target")
        if self.n_rolled_back == 0 and self.err != self.es_rate:
            failures.append(f"ERR {self.err} differs from ES rate {self.es_rate}")
        if not self.holdout_logits_identical:
            failures.append("Holdout logits differ from the base model")
        if self.restored_to_base != self.n_rolled_back:
            failures.append(f"Only {self.restored_to_base}/{self.n_rolled_back} rolled-back edits restored to base")
        return failures


def es_rate(records: Sequence[EditRecord]) -> float:
    """Instance-level immediate edit success over all records; 1.0 for an empty stream."""
    n_immediate = sum(len(r.es) for r in records)
    return sum(sum(r.es) for r in records) / n_immediate if n_immediate else 1.0


def compute_metrics(model: BaseModel, pool: LoraPool, mem: KeyMemory, benchmark: Benchmark,
                    records: Sequence[EditRecord], rolled_back: Iterable[int] = (),
                    cleared: Optional[np.ndarray] = None) -> MetricsReport:
    """
    Stream-end metrics over a fully applied edit stream.

    Args:
        model: Frozen base model
        pool: LoRA pool after editing
        mem: Key memory after editing (and any rollbacks)
        benchmark: Edit stream and holdout (already cleared of key collisions)
        records: EditRecords of the stream
        rolled_back: Edit ids whose keys were deleted
        cleared: Holdout mask from ``clear_holdout``; bit-identity is checked on cleared items only

    Returns:
        MetricsReport: ES, ERR, TRR, mismatches and accounting
    """
    router = SemanticRouter(mem, pool)
    rolled_back = {int(e) for e in rolled_back}
    lora_of = {r.edit_id: r.lora_id for r in records}
    kept = [t for t in benchmark.edit_stream if t.edit_id in lora_of and t.edit_id not in rolled_back]
    dropped = [t for t in benchmark.edit_stream if t.edit_id in lora_of and t.edit_id in rolled_back]

    immediate = es_rate(records)

    hits, edits_correct, assignments, queries = 0, 0, [], []
    for task in kept:
        task_hits = 0
        for tokens, label in task.instances:
            trace = forward(model, tokens, router=router)
            task_hits += int(trace.prediction == label)
            assignments.append(lora_of[task.edit_id])
            queries.append(trace.query_vector)
        hits += task_hits
        edits_correct += int(task_hits == len(task.instances))
    n_kept_instances = len(assignments)
    err_defined = n_kept_instances > 0
    err = hits / n_kept_instances if err_defined else 1.0

    restored = 0
    for task in dropped:
        restored += int(all(np.array_equal(forward(model, tokens, router=router).logits,
                                           forward(model, tokens).logits)
                            for tokens, _ in task.instances))

    mask = np.ones(len(benchmark.holdout), dtype=bool) if cleared is None else np.asarray(cleared, dtype=bool)
    trr_hits, base_hits, identical = 0, 0, True
    for i, (tokens, label) in enumerate(zip(benchmark.holdout.tokens, benchmark.holdout.labels)):
        routed = forward(model, tokens, router=router).logits
        base = forward(model, tokens).logits
        trr_hits += int(np.argmax(routed) == label)
        base_hits += int(np.argmax(base) == label)
        if mask[i] and not np.array_equal(routed, base):
            identical = False
    n_holdout = len(benchmark.holdout)

    probes = [(t, lora_of[t.edit_id]) for t in kept if t.probe is not None]
    generalization = None
    if probes:
        generalization = sum(forward(model, t.probe, router=router).active_lora_id == lora_id
                             for t, lora_id in probes) / len(probes)

    report = MetricsReport(
        es_rate=immediate,
        err=err,
        trr=trr_hits / n_holdout if n_holdout else 1.0,
        trr_base=base_hits / n_holdout if n_holdout else 1.0,
        mismatches=mismatch_count(mem, assignments, queries),
        trainable_params_per_edit=records[0].trainable_params if records else 0,
        total_memory_entries=len(mem),
        n_edits=len(records),
        n_rolled_back=len(dropped),
        edits_correct=edits_correct,
        restored_to_base=restored,
        err_defined=err_defined,
        holdout_logits_identical=identical,
        holdout_unresolved=int(np.sum(~mask)),
        generalization_rate=generalization,
        loss_stats=calculate_statistics([r.final_loss for r in records]),
    )
    logger.info(f"✅ Metrics: ES {report.es_rate:.1%}, ERR {report.err:.1%}, TRR {report.trr:.1%} "
                f"(base {report.trr_base:.1%}), mismatches {report.mismatches}")
    return report


def rollback_table(model: BaseModel, pool: LoraPool, mem: KeyMemory, stream: Sequence[EditTask],
                   edit_ids: Iterable[int]) -> List[Dict[str, Any]]:
    """
    Roll back ``edit_ids`` and tabulate every edited instance before and after.

    Each row carries the base, edited and post-deletion predictions plus
    whether the post-deletion logits are bit-identical to the expected ones
    (base logits for deleted edits, pre-rollback logits for kept edits).
    """
    deleted = {int(e) for e in edit_ids}
    applied = set(mem.edit_ids())
    router = SemanticRouter(mem, pool)
    before = {}
    for task in stream:
        if task.edit_id not in applied:
            continue
        for m, (tokens, _) in enumerate(task.instances):
            trace = forward(model, tokens, router=router)
            before[(task.edit_id, m)] = (trace.logits, trace.decision)

    for edit_id in sorted(deleted):
        rollback(mem, edit_id)

    rows = []
    for task in stream:
        if task.edit_id not in applied:
            continue
        for m, (tokens, label) in enumerate(task.instances):
            base = forward(model, tokens).logits
            after = forward(model, tokens, router=router)
            logits_before, decision_before = before[(task.edit_id, m)]
            is_deleted = task.edit_id in deleted
            expected = base if is_deleted else logits_before
            rows.append({
                "edit_id": task.edit_id,
                "instance_id": m,
                "label": label,
                "deleted": is_deleted,
                "pred_base": int(np.argmax(base)),
                "pred_edit": int(np.argmax(logits_before)),
                "pred_del": after.prediction,
                "logits_match": bool(np.array_equal(after.logits, expected)),
                "decision_unchanged": after.decision.same_route(decision_before),
            })
    return rows


def save_benchmark(benchmark: Benchmark, directory) -> None:
    directory = Path(directory)
    for name in ("base_train", "base_test", "holdout"):
        split: LabeledSet = getattr(benchmark, name)
        write_jsonl(({"tokens": t, "label": y} for t, y in zip(split.tokens, split.labels)),
                    directory / f"{name}.jsonl")
    write_jsonl((task.to_dict() for task in benchmark.edit_stream), directory / "edit_stream.jsonl")
    save_json({"seed": benchmark.seed}, directory / "meta.json")
    logger.info(f"📁 Benchmark written to {directory}")


def load_split(path) -> LabeledSet:
    rows = read_jsonl(path)
    if not rows:
        raise ParameterError(f"Split {path} is empty")
    return LabeledSet(np.array([r["tokens"] for r in rows], dtype=np.int64),
                      np.array([r["label"] for r in rows], dtype=np.int64))


def load_stream(path) -> List[EditTask]:
    return [EditTask.from_dict(row) for row in read_jsonl(path)]


def load_benchmark(directory) -> Benchmark:
    directory = Path(directory)
    meta = load_json(directory / "meta.json")
    return Benchmark(
        base_train=load_split(directory / "base_train.jsonl"),
        base_test=load_split(directory / "base_test.jsonl"),
        edit_stream=load_stream(directory / "edit_stream.jsonl"),
        holdout=load_split(directory / "holdout.jsonl"),
        seed=int(meta["seed"]),
    )
