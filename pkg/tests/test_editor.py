import numpy as np
import pytest

from src.adapters import LoraFactors, LoraGrads, LoraModule, LoraPool, new_module, trainable_parameters
from src.editor import (EditRecord, EditTask, LifelongEditor, TrainRecipe, apply_edit, cosine_lr, module_loss,
                        sgd_step)
from src.evalkit import ES_TARGET, BenchmarkConfig, es_rate, gen_benchmark, prepare_edit_stream
from src.errors import ConfigError, LifecycleError, ParameterError, ShapeError, SolaIndexError
from src.model import ModelConfig, build_base, forward, train_base
from src.numerics import SeededRng
from src.routing import DEFAULT_ALPHA, KeyMemory


def _scalar_module(a, b):
    return LoraModule(0, {"w": LoraFactors(np.array([[a]]), np.array([[b]]))})


@pytest.mark.parametrize("step,expected", [(0, 0.05), (40, 0.0), (20, 0.025), (10, 0.05 * (1 + np.sqrt(0.5)) / 2)])
def test_cosine_schedule(step, expected):
    assert cosine_lr(step, 40, 0.05) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("step,total", [(-1, 10), (11, 10), (0, 0)])
def test_cosine_schedule_rejects_bad_steps(step, total):
    with pytest.raises(ParameterError):
        cosine_lr(step, total, 0.1)


def test_recipe_validation():
    with pytest.raises(ConfigError):
        TrainRecipe(rank=0)
    with pytest.raises(ConfigError):
        TrainRecipe(epochs=0)
    with pytest.raises(ConfigError):
        TrainRecipe.from_dict({"lr": 0.1})
    assert TrainRecipe.from_dict(TrainRecipe(rank=2).to_dict()) == TrainRecipe(rank=2)


def test_sgd_step_arithmetic():
    module = _scalar_module(1.0, 2.0)
    sgd_step(module, {"w": LoraGrads(np.array([[2.0]]), np.array([[1.0]]))}, 0.1)
    assert module["w"].a[0, 0] == pytest.approx(0.8)
    assert module["w"].b[0, 0] == pytest.approx(1.9)


def test_sgd_step_with_zero_lr_is_exact():
    module = _scalar_module(0.3, -0.7)
    sgd_step(module, {"w": LoraGrads(np.array([[5.0]]), np.array([[-4.0]]))}, 0.0)
    assert module["w"].a[0, 0] == 0.3 and module["w"].b[0, 0] == -0.7


def test_sgd_step_rejects_mismatched_gradients():
    module = _scalar_module(1.0, 1.0)
    with pytest.raises(ShapeError):
        sgd_step(module, {"w": LoraGrads(np.zeros((1, 2)), np.zeros((1, 1)))}, 0.1)


def test_scheduled_sgd_descends_a_quadratic():
    module = _scalar_module(4.0, 0.0)
    total = 50
    for step in range(total):
        a = module["w"].a
        sgd_step(module, {"w": LoraGrads(2 * (a - 1.0), np.zeros((1, 1)))}, cosine_lr(step, total, 0.2))
    assert module["w"].a[0, 0] == pytest.approx(1.0, abs=1e-3)


def test_edit_task_validation(tiny_config):
    with pytest.raises(ParameterError):
        EditTask(0, [])
    task = EditTask(0, [(np.zeros(tiny_config.seq_len, dtype=int), tiny_config.n_classes)])
    with pytest.raises(SolaIndexError):
        task.validate(tiny_config)


def test_edit_record_drops_wall_time_by_default():
    record = EditRecord(0, 0, [1, 0], 0.5, 10, wall_time=1.5)
    assert "wall_time" not in record.to_dict()
    assert record.to_dict(include_time=True)["wall_time"] == 1.5
    assert record.success_rate == 0.5
    assert EditRecord.from_dict(record.to_dict()) == record


def test_apply_edit_grows_pool_and_memory(tiny_model, aligned_stream, fast_recipe):
    pool, mem = LoraPool(), KeyMemory()
    task = aligned_stream[0]
    before = module_loss(tiny_model, None, task.instances)
    record = apply_edit(tiny_model, pool, mem, task, fast_recipe, SeededRng(0))

    assert len(pool) == 1 and pool[0].frozen and pool.active is None
    assert len(mem) == len(task.instances)
    assert {e.lora_id for e in mem} == {record.lora_id}
    assert record.trainable_params == trainable_parameters(tiny_model.config, fast_recipe.rank)
    assert len(record.es) == len(task.instances)
    assert record.final_loss < before


def test_apply_edit_rejects_repeat_and_open_module(tiny_model, aligned_stream, fast_recipe):
    pool, mem = LoraPool(), KeyMemory()
    apply_edit(tiny_model, pool, mem, aligned_stream[0], fast_recipe, SeededRng(0))
    with pytest.raises(LifecycleError):
        apply_edit(tiny_model, pool, mem, aligned_stream[0], fast_recipe, SeededRng(0))

    new_module(pool, tiny_model.config, 2, SeededRng(1))
    with pytest.raises(LifecycleError):
        apply_edit(tiny_model, pool, mem, aligned_stream[1], fast_recipe, SeededRng(0))


def test_invalid_edit_leaves_state_untouched(tiny_model, fast_recipe):
    pool, mem = LoraPool(), KeyMemory()
    bad = EditTask(0, [(np.zeros(tiny_model.config.seq_len, dtype=int), -1)])
    with pytest.raises(SolaIndexError):
        apply_edit(tiny_model, pool, mem, bad, fast_recipe, SeededRng(0))
    assert len(pool) == 0 and len(mem) == 0


def test_later_edits_do_not_change_earlier_outputs(tiny_model, aligned_stream, fast_recipe):
    editor = LifelongEditor(tiny_model, fast_recipe, seed=1)
    base_weights = {name: np.array(w) for name, w in tiny_model.weights.items()}

    editor.edit(aligned_stream[0])
    first = [editor.logits(tokens) for tokens, _ in aligned_stream[0].instances]
    hashes = editor.pool.frozen_hashes()
    for task in aligned_stream[1:]:
        editor.edit(task)

    for (tokens, _), logits in zip(aligned_stream[0].instances, first):
        np.testing.assert_array_equal(editor.logits(tokens), logits)
    assert all(editor.pool.frozen_hashes()[i] == h for i, h in hashes.items())
    for name, weight in tiny_model.weights.items():
        np.testing.assert_array_equal(weight, base_weights[name])


def test_editor_is_deterministic(tiny_model, aligned_stream, fast_recipe):
    runs = []
    for _ in range(2):
        editor = LifelongEditor(tiny_model, fast_recipe, seed=4)
        editor.edit_stream(aligned_stream[:2])
        runs.append(editor)
    assert runs[0].pool.frozen_hashes() == runs[1].pool.frozen_hashes()
    assert runs[0].memory.content_hash() == runs[1].memory.content_hash()
    assert [r.to_dict() for r in runs[0].records] == [r.to_dict() for r in runs[1].records]


def test_rollback_restores_base_routing(tiny_model, aligned_stream, fast_recipe):
    editor = LifelongEditor(tiny_model, fast_recipe, seed=2)
    editor.edit_stream(aligned_stream[:3])
    assert editor.rollback(aligned_stream[0].edit_id) == len(aligned_stream[0].instances)
    assert editor.rollback(aligned_stream[0].edit_id) == 0
    for tokens, _ in aligned_stream[0].instances:
        trace = editor.trace(tokens)
        assert not trace.decision.is_adapted and trace.active_lora_id is None
        np.testing.assert_array_equal(trace.logits, forward(tiny_model, tokens).logits)
    assert len(editor.pool) == 3


def test_edit_stream_records_progress(tiny_model, tiny_benchmark, aligned_stream, fast_recipe):
    editor = LifelongEditor(tiny_model, fast_recipe)
    records = editor.edit_stream(aligned_stream[:3], holdout=tiny_benchmark.holdout)
    assert len(records) == 3
    assert [row["edit_index"] for row in editor.progress] == [1, 2, 3]
    assert [row["edit_id"] for row in editor.progress] == [t.edit_id for t in aligned_stream[:3]]
    for row in editor.progress:
        assert 0.0 <= row["err_so_far"] <= 1.0 and 0.0 <= row["trr"] <= 1.0


def test_accuracy_of_nothing_is_one(tiny_model):
    assert LifelongEditor(tiny_model).accuracy([]) == 1.0


def test_save_and_load_restore_the_same_outputs(tiny_model, aligned_stream, fast_recipe, tmp_path):
    editor = LifelongEditor(tiny_model, fast_recipe, alpha=0.02)
    editor.edit_stream(aligned_stream[:2])
    editor.save(tmp_path)
    loaded = LifelongEditor.load(tiny_model, tmp_path, fast_recipe)

    assert loaded.pool.frozen_hashes() == editor.pool.frozen_hashes()
    assert loaded.memory.content_hash() == editor.memory.content_hash()
    assert loaded.memory.alpha == 0.02
    for task in aligned_stream[:2]:
        for tokens, _ in task.instances:
            np.testing.assert_array_equal(loaded.logits(tokens), editor.logits(tokens))


def test_default_recipe_lands_every_edit_at_default_alpha():
    config = ModelConfig(seed=7)
    benchmark = gen_benchmark(config, BenchmarkConfig(seed=7, n_edits=5, holdout_size=5, n_train=512, n_test=64))
    model = train_base(build_base(config), benchmark.base_train, epochs=3, lr=0.1)
    stream = prepare_edit_stream(model, benchmark, DEFAULT_ALPHA)
    editor = LifelongEditor(model)
    records = editor.edit_stream(stream)

    assert TrainRecipe().init_std == 1.0
    assert all(r.es == [1] * len(task.instances) for r, task in zip(records, stream))
    assert es_rate(records) >= ES_TARGET
    assert editor.accuracy([inst for task in stream for inst in task.instances]) == 1.0
