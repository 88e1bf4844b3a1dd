"""
Experiment Pipeline for SoLA Desk
The cmd_* stages behind the command line. Every stage reads and writes plain
JSON / JSON-lines / CSV files under one run directory.

Run layout::

    config.json             resolved RunConfig
    benchmark/              base_train, base_test, holdout, edit_stream (.jsonl), meta.json
    base_model.json         frozen base checkpoint
    train_report.json       base training summary
    edits/                  pool.json, memory.json, edit_stream.jsonl, records.jsonl, progress.csv
    holdout_cleared.jsonl   holdout after key-collision resampling
    rollbacks.json          rolled-back edit ids
    rollback_table.csv      per-instance predictions before / after rollback
    metrics.json            MetricsReport (metrics.csv: same, one row)
    drift.csv               cluster-drift sweep
    ablate_rank.csv         rank sweep
    ablate_layers.csv       edited-layer sweep
    keys.csv                key dump with a 2-D PCA projection
    timings.json            wall-clock times (the only non-deterministic file)
    run.log
"""

import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.decomposition import PCA

from .config import RunConfig, parse_layer_window
from .drift_baseline import drift_experiment, drift_failures, routed_accuracy
from .editor import EditRecord, EditTask, LifelongEditor, TrainRecipe
from .errors import ParameterError
from .evalkit import (CLEAR_STREAM, Benchmark, MetricsReport, clear_holdout, compute_metrics, es_rate,
                      gen_benchmark, load_benchmark, load_split, load_stream, prepare_edit_stream, rollback_table,
                      save_benchmark)
from .model import BaseModel, LabeledSet, build_base, evaluate_accuracy, load_checkpoint, save_checkpoint, train_base
from .numerics import SeededRng
from .utils import load_json, read_jsonl, require_artifact, save_json, write_jsonl

logger = logging.getLogger(__name__)

ROLLBACK_STREAM = 5


@dataclass(frozen=True)
class RunPaths:
    root: Path

    @classmethod
    def of(cls, config: RunConfig) -> "RunPaths":
        return cls(Path(config.out_dir))

    config = property(lambda self: self.root / "config.json")
    benchmark = property(lambda self: self.root / "benchmark")
    base_model = property(lambda self: self.root / "base_model.json")
    train_report = property(lambda self: self.root / "train_report.json")
    edits = property(lambda self: self.root / "edits")
    stream = property(lambda self: self.root / "edits" / "edit_stream.jsonl")
    records = property(lambda self: self.root / "edits" / "records.jsonl")
    progress = property(lambda self: self.root / "edits" / "progress.csv")
    holdout_cleared = property(lambda self: self.root / "holdout_cleared.jsonl")
    rollbacks = property(lambda self: self.root / "rollbacks.json")
    rollback_table = property(lambda self: self.root / "rollback_table.csv")
    metrics = property(lambda self: self.root / "metrics.json")
    metrics_csv = property(lambda self: self.root / "metrics.csv")
    drift = property(lambda self: self.root / "drift.csv")
    ablate_rank = property(lambda self: self.root / "ablate_rank.csv")
    ablate_layers = property(lambda self: self.root / "ablate_layers.csv")
    keys = property(lambda self: self.root / "keys.csv")
    timings = property(lambda self: self.root / "timings.json")
    log = property(lambda self: self.root / "run.log")


def _write_config(config: RunConfig) -> RunPaths:
    paths = RunPaths.of(config)
    config.save(paths.config)
    return paths


def _record_timing(paths: RunPaths, key: str, seconds: float) -> None:
    timings = load_json(paths.timings) if paths.timings.exists() else {}
    timings[key] = seconds
    save_json(timings, paths.timings)


def _write_csv(rows: Sequence[Dict[str, Any]], path: Path, columns: Optional[List[str]] = None) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(list(rows), columns=columns).to_csv(path, index=False)
    logger.info(f"📁 Wrote {path}")
    return path


def _load_model(paths: RunPaths) -> BaseModel:
    return load_checkpoint(require_artifact(paths.base_model))


def _load_edit_state(paths: RunPaths, config: RunConfig, model: BaseModel) -> Tuple[LifelongEditor, List[EditTask], List[EditRecord]]:
    require_artifact(paths.edits / "pool.json")
    editor = LifelongEditor.load(model, paths.edits, config.recipe, seed=config.seed)
    stream = load_stream(require_artifact(paths.stream))
    records = [EditRecord.from_dict(row) for row in read_jsonl(paths.records)]
    editor.records = records
    return editor, stream, records


def _rolled_back(paths: RunPaths) -> List[int]:
    return [int(e) for e in load_json(paths.rollbacks)] if paths.rollbacks.exists() else []


def _exclusions(stream: Sequence[EditTask]) -> List[np.ndarray]:
    excluded = [tokens for task in stream for tokens, _ in task.instances]
    return excluded + [task.probe for task in stream if task.probe is not None]


def _evaluate(model: BaseModel, editor: LifelongEditor, benchmark: Benchmark, stream: Sequence[EditTask],
              records: Sequence[EditRecord], seed: int, rolled_back: Sequence[int] = ()) -> Tuple[MetricsReport, LabeledSet]:
    cleared = clear_holdout(model, editor.memory, benchmark.holdout, _exclusions(stream),
                            SeededRng(seed).child(CLEAR_STREAM))
    measured = Benchmark(benchmark.base_train, benchmark.base_test, list(stream), cleared.holdout, benchmark.seed)
    report = compute_metrics(model, editor.pool, editor.memory, measured, records, rolled_back, cleared.cleared)
    return report, cleared.holdout


def cmd_gen(config: RunConfig) -> Benchmark:
    """Generate and store the synthetic benchmark."""
    paths = _write_config(config)
    benchmark = gen_benchmark(config.model, config.benchmark)
    save_benchmark(benchmark, paths.benchmark)
    return benchmark


def cmd_train_base(config: RunConfig) -> BaseModel:
    """Build and train the base model on the benchmark's base split."""
    paths = _write_config(config)
    benchmark = load_benchmark(require_artifact(paths.benchmark))
    start = time.perf_counter()
    model = train_base(build_base(config.model), benchmark.base_train, config.base_epochs,
                       config.base_lr, config.base_batch_size, seed=config.seed)
    model.meta["test_accuracy"] = evaluate_accuracy(model, *benchmark.base_test)
    _record_timing(paths, "train_base_s", time.perf_counter() - start)
    save_checkpoint(model, paths.base_model)
    save_json({"parameters": model.num_parameters, **model.meta}, paths.train_report)
    logger.info(f"💾 Base model saved: train {model.meta['train_accuracy']:.1%}, "
                f"test {model.meta['test_accuracy']:.1%}")
    return model


def cmd_edit(config: RunConfig) -> LifelongEditor:
    """Apply the whole edit stream and store the pool, memory and records."""
    paths = _write_config(config)
    model = _load_model(paths)
    benchmark = load_benchmark(require_artifact(paths.benchmark))
    stream = prepare_edit_stream(model, benchmark, config.alpha, config.metric)
    write_jsonl((task.to_dict() for task in stream), paths.stream)

    editor = LifelongEditor(model, config.recipe, config.alpha, config.metric, config.seed)
    sample = LabeledSet(*(part[:config.progress_holdout] for part in benchmark.holdout))
    start = time.perf_counter()
    records = editor.edit_stream(stream, sample if config.progress_holdout else None)
    _record_timing(paths, "edit_stream_s", time.perf_counter() - start)
    _record_timing(paths, "edit_wall_times_s", [r.wall_time for r in records])

    editor.save(paths.edits)
    write_jsonl((r.to_dict() for r in records), paths.records)
    if editor.progress:
        _write_csv(editor.progress, paths.progress)
    if paths.rollbacks.exists():
        paths.rollbacks.unlink()
    return editor


def cmd_eval(config: RunConfig) -> int:
    """
    Compute stream-end metrics and check the exact mechanism properties.

    Returns:
        int: 0 when every check passes, 1 otherwise
    """
    paths = _write_config(config)
    model = _load_model(paths)
    benchmark = load_benchmark(require_artifact(paths.benchmark))
    editor, stream, records = _load_edit_state(paths, config, model)
    rolled_back = _rolled_back(paths)

    report, holdout = _evaluate(model, editor, benchmark, stream, records, config.seed, rolled_back)
    write_jsonl(({"tokens": t, "label": y} for t, y in zip(*holdout)), paths.holdout_cleared)
    save_json(report.to_dict(), paths.metrics)
    _write_csv([report.to_row()], paths.metrics_csv)

    if report.holdout_unresolved:
        logger.warning(f"⚠️ {report.holdout_unresolved} holdout item(s) could not be cleared of key collisions")
    failures = report.check(config.es_target)
    for failure in failures:
        logger.error(f"❌ {failure}")
    return 1 if failures else 0


def cmd_rollback(config: RunConfig, edit_ids: Optional[Sequence[int]] = None,
                 random_count: Optional[int] = None) -> int:
    """
    Delete the keys of some edits and verify that exactly those revert to base.

    Args:
        config: Run configuration
        edit_ids: Explicit edit ids to roll back
        random_count: Otherwise, how many applied edits to pick with the seeded stream

    Returns:
        int: 0 when deleted edits match base logits and kept edits are unchanged, else 1
    """
    paths = _write_config(config)
    model = _load_model(paths)
    editor, stream, _ = _load_edit_state(paths, config, model)

    if edit_ids is None:
        applied = editor.memory.edit_ids()
        count = config.rollback_count if random_count is None else random_count
        if count > len(applied):
            raise ParameterError(f"Cannot roll back {count} of {len(applied)} applied edits")
        picks = SeededRng(config.seed).child(ROLLBACK_STREAM).choice(len(applied), count)
        edit_ids = [applied[i] for i in picks]
    edit_ids = sorted({int(e) for e in edit_ids})
    known = {task.edit_id for task in stream}
    for edit_id in edit_ids:
        if edit_id not in known:
            logger.warning(f"⚠️ Edit {edit_id} is not part of the edit stream")

    rows = rollback_table(model, editor.pool, editor.memory, stream, edit_ids)
    editor.save(paths.edits)
    save_json(sorted(set(_rolled_back(paths)) | set(edit_ids)), paths.rollbacks)
    _write_csv(rows, paths.rollback_table)

    broken = [r for r in rows if not r["logits_match"] or (not r["deleted"] and not r["decision_unchanged"])]
    for row in broken:
        logger.error(f"❌ Edit {row['edit_id']} instance {row['instance_id']} did not behave as expected after rollback")
    logger.info(f"↩️ Rolled back {len(edit_ids)} edit(s); {len(editor.memory)} key(s) remain")
    return 1 if broken else 0


def cmd_drift(config: RunConfig, radius_grid: Optional[Sequence[float]] = None) -> int:
    """
    Run the cluster-drift sweep on the stream the editor used and check it against that run.

    Returns:
        int: 0 when the trend, the widest-radius and the degenerate-radius checks pass, else 1
    """
    paths = _write_config(config)
    model = _load_model(paths)
    benchmark = load_benchmark(require_artifact(paths.benchmark))
    stream = load_stream(require_artifact(paths.stream))
    records = [EditRecord.from_dict(row) for row in read_jsonl(require_artifact(paths.records))]
    holdout = load_split(paths.holdout_cleared) if paths.holdout_cleared.exists() else benchmark.holdout
    grid = list(radius_grid) if radius_grid is not None else config.radius_grid

    rows = drift_experiment(model, stream, grid, holdout, config.recipe, config.seed, config.metric, config.alpha)
    _write_csv(rows, paths.drift, ["radius", "updates", "mismatches", "err", "trr", "centers"])

    fixed_err = es_rate(records)
    base_trr = routed_accuracy(model, None, list(zip(*holdout)))
    widest = max(rows, key=lambda r: r["radius"])
    logger.info(f"Widest radius ERR {widest['err']:.1%} vs fixed-key ERR {fixed_err:.1%}")
    failures = drift_failures(rows, fixed_err, base_trr, config.alpha, config.drift_min_updates)
    for failure in failures:
        logger.error(f"❌ {failure}")
    return 1 if failures else 0


def _edit_and_measure(model: BaseModel, config: RunConfig, benchmark: Benchmark,
                      recipe: TrainRecipe) -> Tuple[MetricsReport, float]:
    stream = prepare_edit_stream(model, benchmark, config.alpha, config.metric)
    editor = LifelongEditor(model, recipe, config.alpha, config.metric, config.seed)
    start = time.perf_counter()
    records = editor.edit_stream(stream)
    minutes = (time.perf_counter() - start) / 60.0
    report, _ = _evaluate(model, editor, benchmark, stream, records, config.seed)
    return report, minutes


def cmd_ablate_rank(config: RunConfig, ranks: Optional[Sequence[int]] = None) -> List[Dict[str, Any]]:
    """One full edit stream per LoRA rank."""
    paths = _write_config(config)
    model = _load_model(paths)
    benchmark = load_benchmark(require_artifact(paths.benchmark))
    rows = []
    for rank in (list(ranks) if ranks is not None else config.ranks):
        recipe = replace(config.recipe, rank=int(rank))
        report, minutes = _edit_and_measure(model, config, benchmark, recipe)
        rows.append({"rank": int(rank), "es": report.es_rate, "err": report.err, "trr": report.trr,
                     "trainable_params": report.trainable_params_per_edit, "edit_time_min": minutes})
    _write_csv(rows, paths.ablate_rank)
    return rows


def cmd_ablate_layers(config: RunConfig, windows: Optional[Sequence[str]] = None) -> List[Dict[str, Any]]:
    """One full edit stream per contiguous window of edited blocks."""
    paths = _write_config(config)
    base = _load_model(paths)
    benchmark = load_benchmark(require_artifact(paths.benchmark))
    rows = []
    for window in (list(windows) if windows is not None else config.layer_windows):
        model = base.with_edited_layers(parse_layer_window(window, base.config.n_blocks))
        report, minutes = _edit_and_measure(model, config, benchmark, config.recipe)
        rows.append({"layers": window, "es": report.es_rate, "err": report.err, "trr": report.trr,
                     "trainable_params": report.trainable_params_per_edit, "edit_time_min": minutes})
    _write_csv(rows, paths.ablate_layers)
    return rows


def cmd_dump_keys(config: RunConfig) -> pd.DataFrame:
    """Write every stored key with its ids and a 2-D PCA projection."""
    paths = _write_config(config)
    model = _load_model(paths)
    editor, _, _ = _load_edit_state(paths, config, model)
    memory = editor.memory
    d_model = model.config.d_model
    key_columns = [f"k{i}" for i in range(d_model)]
    columns = ["edit_id", "instance_id", "lora_id", "pc1", "pc2"] + key_columns

    if not len(memory):
        frame = pd.DataFrame(columns=columns)
    else:
        keys = memory.keys
        projection = np.zeros((len(memory), 2))
        n_components = min(2, len(memory), d_model)
        if len(memory) > 1:
            projection[:, :n_components] = PCA(n_components=n_components).fit_transform(keys)
        frame = pd.DataFrame(keys, columns=key_columns)
        frame.insert(0, "pc2", projection[:, 1])
        frame.insert(0, "pc1", projection[:, 0])
        frame.insert(0, "lora_id", [e.lora_id for e in memory])
        frame.insert(0, "instance_id", [e.instance_id for e in memory])
        frame.insert(0, "edit_id", [e.edit_id for e in memory])
    paths.keys.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(paths.keys, index=False)
    logger.info(f"📁 Dumped {len(memory)} key(s) to {paths.keys}")
    return frame


def cmd_run(config: RunConfig) -> int:
    """gen -> train-base -> edit -> eval."""
    cmd_gen(config)
    cmd_train_base(config)
    cmd_edit(config)
    return cmd_eval(config)
