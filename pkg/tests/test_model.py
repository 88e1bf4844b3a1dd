import numpy as np
import pytest

from conftest import make_config
from src.adapters import init_module
from src.errors import ConfigError, ParameterError, ShapeError, SolaIndexError, StateError
from src.model import (BaseModel, ModelConfig, _backward, _cross_entropy_grad, _run, _TrainingWeights,
                       backward_lora, batch_loss, build_base, evaluate_accuracy, forward, forward_batch,
                       layer_name, load_checkpoint, param_shapes, save_checkpoint, train_base)
from src.numerics import SeededRng, cross_entropy, finite_diff_grad, gaussian_init, relative_error
from src.routing import Decision


def _trained_module(config, rng, std=0.3, rank=2):
    """A module whose B factors are non-zero, so every gradient path is live."""
    module = init_module(0, config.edited_layer_shapes(), rank, rng, std)
    for factors in module.per_layer.values():
        factors.b[...] = gaussian_init(rng, *factors.b.shape, std=std)
    return module


def test_default_config_parameter_count():
    model = build_base(ModelConfig())
    assert model.num_parameters == 36552
    assert model.config.master_layer == "blocks.2.ffn.w_out"


@pytest.mark.parametrize("layers", [
    ["blocks.3.ffn.w_out", "blocks.2.ffn.w_out"],
    ["blocks.2.ffn.w_out", "blocks.2.ffn.w_out"],
    ["blocks.4.ffn.w_out"],
    ["blocks.1.attn.w_q"],
    [],
])
def test_invalid_edited_layers(layers):
    with pytest.raises(ConfigError):
        ModelConfig(edited_layers=layers)


def test_layer_shapes_follow_projection_kind():
    config = ModelConfig(edited_layers=[layer_name(1, "w_in"), layer_name(1, "w_out")])
    assert config.edited_layer_shapes() == {"blocks.1.ffn.w_in": (64, 32), "blocks.1.ffn.w_out": (32, 64)}


def test_build_base_is_deterministic_and_read_only(tiny_config):
    a, b = build_base(tiny_config), build_base(tiny_config)
    for name in param_shapes(tiny_config):
        np.testing.assert_array_equal(a[name], b[name])
    with pytest.raises(ValueError):
        a["head.w"][0, 0] = 1.0
    np.testing.assert_array_equal(a["blocks.0.ln1.gain"], np.ones(tiny_config.d_model))
    np.testing.assert_array_equal(a["head.b"], np.zeros(tiny_config.n_classes))


def test_base_model_rejects_missing_weights(tiny_config):
    weights = dict(build_base(tiny_config).weights)
    weights.pop("head.b")
    with pytest.raises(ShapeError):
        BaseModel(tiny_config, weights)


def test_forward_trace_shapes(tiny_model, token_rng):
    config = tiny_model.config
    trace = forward(tiny_model, token_rng.integers(0, config.vocab, config.seq_len))
    assert trace.logits.shape == (config.n_classes,)
    assert trace.query_vector.shape == (config.d_model,)
    assert len(trace.hidden_states) == config.n_blocks + 1
    assert trace.decision is None and trace.active_lora_id is None


def test_forward_validates_tokens(tiny_model):
    config = tiny_model.config
    with pytest.raises(ShapeError):
        forward(tiny_model, [0] * (config.seq_len + 1))
    with pytest.raises(SolaIndexError):
        forward(tiny_model, [config.vocab] * config.seq_len)
    with pytest.raises(ShapeError):
        forward(tiny_model, np.zeros((2, config.seq_len), dtype=int))


def test_single_sequence_accessors_reject_batches(tiny_model):
    trace = forward_batch(tiny_model, np.zeros((2, tiny_model.config.seq_len), dtype=int))
    assert trace.batch_logits.shape == (2, tiny_model.config.n_classes)
    with pytest.raises(StateError):
        _ = trace.logits


def test_fresh_module_is_an_exact_identity(tiny_model, token_rng):
    config = tiny_model.config
    module = init_module(0, config.edited_layer_shapes(), 4, SeededRng(9))
    for _ in range(100):
        tokens = token_rng.integers(0, config.vocab, config.seq_len)
        base = forward(tiny_model, tokens)
        adapted = forward(tiny_model, tokens, adapter=module)
        np.testing.assert_array_equal(adapted.logits, base.logits)
        for h_adapted, h_base in zip(adapted.hidden_states, base.hidden_states):
            np.testing.assert_array_equal(h_adapted, h_base)


def test_adapter_leaves_layers_below_the_edit_untouched(token_rng):
    config = make_config(n_blocks=3, edited_layers=[layer_name(1), layer_name(2)])
    model = build_base(config)
    module = _trained_module(config, SeededRng(4))
    tokens = token_rng.integers(0, config.vocab, config.seq_len)
    base = forward(model, tokens).hidden_states
    adapted = forward(model, tokens, adapter=module).hidden_states
    np.testing.assert_array_equal(adapted[0], base[0])
    np.testing.assert_array_equal(adapted[1], base[1])
    assert not np.array_equal(adapted[2], base[2])


@pytest.mark.parametrize("case", range(5))
def test_lora_gradients_match_finite_differences(case):
    config = make_config(seed=case, init_std=0.3, edited_layers=[layer_name(0, "w_in"), layer_name(1)])
    model = build_base(config)
    rng = SeededRng(100 + case)
    module = _trained_module(config, rng)
    tokens = rng.integers(0, config.vocab, config.seq_len)
    label = case % config.n_classes

    grads = backward_lora(model, forward(model, tokens, adapter=module), label, module)
    assert set(grads) == set(config.edited_layers)
    for name, factors in module.per_layer.items():
        for attr in ("a", "b"):
            original = getattr(factors, attr)

            def loss(m, factors=factors, attr=attr):
                setattr(factors, attr, m)
                return cross_entropy(forward(model, tokens, adapter=module).logits, label)

            numeric = finite_diff_grad(loss, original)
            setattr(factors, attr, original)
            assert relative_error(getattr(grads[name], attr), numeric) < 1e-4


def test_base_gradients_match_finite_differences(token_rng):
    config = make_config(init_std=0.3)
    state = _TrainingWeights(config, build_base(config).weights)
    tokens = token_rng.integers(0, config.vocab, (3, config.seq_len))
    labels = np.array([0, 1, 3])

    trace = _run(state, tokens, None, None)
    grads, _ = _backward(state, trace, _cross_entropy_grad(trace.batch_logits, labels), None, with_base=True)
    assert set(grads) == set(param_shapes(config))
    for name in ["embed.tok", "embed.pos", "blocks.0.attn.w_q", "blocks.0.ln1.gain",
                 "blocks.1.ffn.b_in", "blocks.1.attn.w_o", "ln_f.bias", "head.w"]:
        original = state._weights[name]

        def loss(m, name=name):
            state._weights[name] = m
            return batch_loss(_run(state, tokens, None, None).batch_logits, labels)

        numeric = finite_diff_grad(loss, original)
        state._weights[name] = original
        assert relative_error(grads[name], numeric) < 1e-4, name


def test_backward_lora_requires_matching_trace(tiny_model, token_rng):
    config = tiny_model.config
    module = init_module(0, config.edited_layer_shapes(), 2, SeededRng(1))
    other = init_module(1, config.edited_layer_shapes(), 2, SeededRng(2))
    tokens = token_rng.integers(0, config.vocab, config.seq_len)
    with pytest.raises(StateError):
        backward_lora(tiny_model, forward(tiny_model, tokens), 0, module)
    with pytest.raises(StateError):
        backward_lora(tiny_model, forward(tiny_model, tokens, adapter=other), 0, module)


def test_router_is_called_once_at_the_master_layer(token_rng):
    config = make_config(n_blocks=3, edited_layers=[layer_name(1), layer_name(2)])
    model = build_base(config)
    module = _trained_module(config, SeededRng(6))
    calls = []

    def router(trace):
        calls.append(trace.queries.copy())
        return Decision.adapted(module.lora_id, 0.0), module

    tokens = token_rng.integers(0, config.vocab, config.seq_len)
    routed = forward(model, tokens, router=router)
    assert len(calls) == 1
    np.testing.assert_array_equal(calls[0][0], routed.query_vector)
    first, second = (routed.layer_decisions[name] for name in config.edited_layers)
    assert first is second is routed.decision
    assert routed.active_lora_id == module.lora_id
    np.testing.assert_array_equal(routed.logits, forward(model, tokens, adapter=module).logits)


def test_forward_rejects_adapter_and_router_together(tiny_model):
    module = init_module(0, tiny_model.config.edited_layer_shapes(), 2, SeededRng(1))
    with pytest.raises(ParameterError):
        forward(tiny_model, [0] * tiny_model.config.seq_len, adapter=module, router=lambda t: (None, None))


@pytest.mark.parametrize("epochs,lr", [(0, 0.5), (2, 0.0)])
def test_train_base_without_updates_keeps_weights(tiny_config, tiny_benchmark, epochs, lr):
    model = build_base(tiny_config)
    trained = train_base(model, tiny_benchmark.base_train, epochs=epochs, lr=lr, batch_size=64)
    for name in param_shapes(tiny_config):
        np.testing.assert_array_equal(trained[name], model[name])


def test_train_base_lowers_loss_on_a_learnable_task(tiny_config, tiny_benchmark):
    # The last token alone decides the label, so the signal reaches the head directly.
    tokens = tiny_benchmark.base_train.tokens
    labels = tokens[:, -1] % tiny_config.n_classes
    model = build_base(tiny_config)
    trained = train_base(model, (tokens, labels), epochs=10, lr=0.2, batch_size=16)
    before = batch_loss(forward_batch(model, tokens).batch_logits, labels)
    after = batch_loss(forward_batch(trained, tokens).batch_logits, labels)
    assert after < before - 0.05
    assert trained.meta["train_accuracy"] == evaluate_accuracy(trained, tokens, labels)
    assert trained.meta["epochs"] == 10 and trained.meta["batch_size"] == 16


def test_train_base_rejects_bad_inputs(tiny_config, tiny_benchmark):
    model = build_base(tiny_config)
    with pytest.raises(ParameterError):
        train_base(model, tiny_benchmark.base_train, epochs=-1, lr=0.1)
    tokens, labels = tiny_benchmark.base_train
    with pytest.raises(SolaIndexError):
        train_base(model, (tokens, labels + tiny_config.n_classes), epochs=1, lr=0.1)


def test_checkpoint_round_trip_is_exact(tiny_model, tmp_path, token_rng):
    path = tmp_path / "model.json"
    save_checkpoint(tiny_model, path)
    loaded = load_checkpoint(path)
    assert loaded.config == tiny_model.config
    assert loaded.meta == tiny_model.meta
    tokens = token_rng.integers(0, tiny_model.config.vocab, tiny_model.config.seq_len)
    np.testing.assert_array_equal(forward(loaded, tokens).logits, forward(tiny_model, tokens).logits)


def test_with_edited_layers_shares_weights(tiny_model):
    moved = tiny_model.with_edited_layers([layer_name(0)])
    assert moved.config.master_block == 0
    np.testing.assert_array_equal(moved["head.w"], tiny_model["head.w"])


def test_evaluate_accuracy_is_a_rate(tiny_model, tiny_benchmark):
    assert 0.0 <= evaluate_accuracy(tiny_model, *tiny_benchmark.base_test) <= 1.0
