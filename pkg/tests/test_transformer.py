import numpy as np
import pytest
from pydantic import ValidationError

from project.errors import GenerationError, InterventionError, SequenceLengthError, ShapeError, VocabularyError
from project.tensor import Tape, Tensor, fd_gradient, scale
from project.training import loss_full_sequence
from project.transformer import (
    HookPoint,
    ModelConfig,
    ModelWeights,
    forward,
    generate_greedy,
    init_model,
    weight_shapes,
)

from .conftest import GRAD_CONFIG, TINY


def sampled_fd(loss_of, array, n_samples, rng, step=1e-5):
    """Central differences of loss_of(array) at a random sample of coordinates."""
    flat = rng.choice(array.size, size=min(n_samples, array.size), replace=False)
    coords = [np.unravel_index(i, array.shape) for i in flat]
    shifted = array.copy()

    def at(values):
        for coord, value in zip(coords, values):
            shifted[coord] = value
        return loss_of(shifted)

    numeric = fd_gradient(at, np.array([array[c] for c in coords]), step=step)
    return coords, numeric


def test_weight_schema_counts():
    config = ModelConfig(n_layers=3)
    shapes = weight_shapes(config)
    assert len(shapes) == 9 * 3 + 4
    assert shapes["layers.2.mlp.w_down"] == (config.d_model, config.d_ff)
    assert shapes["unembedding"] == (config.d_model, config.vocab_size)


def test_heads_must_divide_width():
    with pytest.raises(ValidationError):
        ModelConfig(d_model=30, n_heads=4)


def test_init_is_deterministic_per_seed():
    a = init_model(ModelConfig(n_layers=1, d_model=8, n_heads=2, d_ff=8, max_seq=4, seed=5))
    b = init_model(ModelConfig(n_layers=1, d_model=8, n_heads=2, d_ff=8, max_seq=4, seed=5))
    c = init_model(ModelConfig(n_layers=1, d_model=8, n_heads=2, d_ff=8, max_seq=4, seed=6))
    assert a.digest() == b.digest()
    assert a.digest() != c.digest()
    np.testing.assert_array_equal(a["layers.0.attn_norm"], np.ones(8))


def test_weights_reject_wrong_shape(tiny_model):
    tensors = dict(tiny_model.tensors)
    tensors["final_norm"] = np.ones(3)
    with pytest.raises(ShapeError):
        ModelWeights(tiny_model.config, tensors)


def test_forward_shapes_and_trace(tiny_model):
    trace = forward(tiny_model, [257, 72, 105], trace=True)
    assert trace.logits.shape == (3, 261)
    assert len(trace.block_outputs) == tiny_model.config.n_layers
    assert trace.block_outputs[0].shape == (3, tiny_model.config.d_model)


def test_forward_is_causal(tiny_model):
    short = forward(tiny_model, [257, 10, 20]).logits.data
    longer = forward(tiny_model, [257, 10, 20, 30, 40]).logits.data
    np.testing.assert_allclose(longer[:3], short, rtol=0, atol=1e-12)


def test_forward_rejects_bad_sequences(tiny_model):
    with pytest.raises(SequenceLengthError):
        forward(tiny_model, [])
    with pytest.raises(SequenceLengthError):
        forward(tiny_model, [1] * (tiny_model.config.max_seq + 1))
    with pytest.raises(VocabularyError):
        forward(tiny_model, [1, 261])


def test_identity_hook_is_bit_exact(tiny_model, random_prompts):
    for prompt in random_prompts[:8]:
        base = forward(tiny_model, prompt).logits.data
        hooked = forward(tiny_model, prompt, [(HookPoint(layer=1), lambda rows: rows)]).logits.data
        np.testing.assert_array_equal(hooked, base)


def test_hook_changes_only_later_positions(tiny_model):
    tokens = [257, 5, 6, 7, 8]
    point = HookPoint(layer=0, positions=(2,))
    base = forward(tiny_model, tokens).logits.data
    hooked = forward(tiny_model, tokens, [(point, lambda rows: scale(rows, 3.0))]).logits.data
    np.testing.assert_array_equal(hooked[:2], base[:2])
    assert not np.allclose(hooked[2:], base[2:])


def test_hook_layer_and_positions_are_checked(tiny_model):
    with pytest.raises(InterventionError):
        forward(tiny_model, [1, 2], [(HookPoint(layer=5), lambda rows: rows)])
    with pytest.raises(InterventionError):
        forward(tiny_model, [1, 2], [(HookPoint(layer=0, positions=(2,)), lambda rows: rows)])


def test_generate_greedy_is_deterministic_and_bounded(tiny_model):
    first = generate_greedy(tiny_model, [257, 65, 66], 5)
    assert first == generate_greedy(tiny_model, [257, 65, 66], 5)
    assert 1 <= len(first) <= 5


def test_generate_stops_at_max_seq(tiny_model):
    prompt = [65] * (tiny_model.config.max_seq - 2)
    assert len(generate_greedy(tiny_model, prompt, 5)) == 2


def test_generate_stops_at_eos(tiny_model):
    first = generate_greedy(tiny_model, [257, 65], 1)[0]
    assert generate_greedy(tiny_model, [257, 65], 5, eos_id=first) == [first]


def test_generate_argument_errors(tiny_model):
    with pytest.raises(GenerationError):
        generate_greedy(tiny_model, [], 3)
    with pytest.raises(GenerationError):
        generate_greedy(tiny_model, [1], 0)


def test_full_sequence_loss_gradient_matches_finite_differences():
    weights = init_model(GRAD_CONFIG)
    tokens = [1, 17, 42, 5, 63, 8, 30]
    tape = Tape()
    leaves = {name: tape.watch(value) for name, value in weights.tensors.items()}
    grads = tape.backward(loss_full_sequence(weights, tokens, params=leaves))

    rng = np.random.default_rng(0)
    for name, value in weights.tensors.items():

        def loss_of(shifted, name=name):
            return loss_full_sequence(weights, tokens, params={name: Tensor(shifted)}).item()

        coords, numeric = sampled_fd(loss_of, value, 6, rng)
        analytic = np.array([grads[leaves[name]][c] for c in coords])
        np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-8, err_msg=name)


def test_trace_leaves_logits_unchanged(tiny_model, random_prompts):
    for prompt in random_prompts[:8]:
        traced = forward(tiny_model, prompt, trace=True).logits.data
        np.testing.assert_array_equal(traced, forward(tiny_model, prompt).logits.data)


def test_hook_on_the_last_prompt_position_forces_the_answer(tiny_model, tokenizer):
    weights = tiny_model.copy()
    weights.tensors["unembedding"][0, tokenizer.YES] = 10.0
    direction = np.zeros(TINY.d_model)
    direction[0] = 100.0
    prompt = [tokenizer.BOS, *tokenizer.tokenize("Is Koba lomu?\nAnswer:")]
    point = HookPoint(layer=TINY.n_layers - 1, positions=(len(prompt) - 1,))
    hook = (point, lambda rows: Tensor(np.tile(direction, (rows.shape[0], 1))))
    generated = generate_greedy(weights, prompt, 3, [hook], eos_id=tokenizer.EOS)
    assert generated[0] == tokenizer.YES
    assert tokenizer.decode(generated).startswith("Yes")
