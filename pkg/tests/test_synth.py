import copy

import numpy as np
import pytest

from actvit.baselines import ProbeConfig, fit_probe
from actvit.synth import (PlantedTask, ToyTransformer, default_toy_llms, forward_collect, generate_dataset,
                          permute_clone)
from oracles import toy_recurrence


def _tokens(model, n, seed=0):
    return np.random.default_rng(seed).integers(0, model.vocab_size, size=n)


def test_forward_shape(toy_b):
    a = forward_collect(toy_b, _tokens(toy_b, 7))
    assert a.shape == (6, 7, 32)
    assert np.isfinite(a.data).all()


def test_forward_max_length_finite(toy_b):
    assert np.isfinite(forward_collect(toy_b, _tokens(toy_b, 512)).data).all()
    with pytest.raises(ValueError):
        forward_collect(toy_b, _tokens(toy_b, 513))


def test_forward_deterministic():
    a = ToyTransformer.random("m", seed=5)
    b = ToyTransformer.random("m", seed=5)
    t = _tokens(a, 11)
    assert np.array_equal(forward_collect(a, t).data, forward_collect(b, t).data)


def test_empty_sequence_rejected(toy_b):
    with pytest.raises(ValueError):
        forward_collect(toy_b, [])


def test_forward_matches_hand_recurrence(toy_b):
    tokens = _tokens(toy_b, 9, seed=3)
    states, _ = toy_b.run(toy_b.one_hot(tokens))
    np.testing.assert_allclose(states, toy_recurrence(toy_b, toy_b.one_hot(tokens)), rtol=1e-10, atol=1e-10)


def test_zero_ffn_and_value_weights_leave_only_bias_path():
    model = ToyTransformer.random("two", n_layers=2, hidden_dim=8, n_heads=2, vocab_size=10, seed=2)
    for layer in model.layers:
        layer.w_v[:] = 0.0
        layer.w_1[:] = 0.0
        layer.w_2[:] = 0.0
    tokens = [3, 1, 4, 1, 5]
    a = forward_collect(model, tokens).data.astype(np.float64)
    x0 = model.embed[tokens] + model.pos_embed[:5]
    np.testing.assert_allclose(a[0], x0 + model.layers[0].b_2, atol=1e-5)
    np.testing.assert_allclose(a[1], a[0] + model.layers[1].b_2, atol=1e-5)


def test_identity_clone_is_bitwise_equal(toy_b):
    clone = permute_clone(toy_b, np.arange(32))
    t = _tokens(toy_b, 10)
    assert np.array_equal(forward_collect(clone, t).data, forward_collect(toy_b, t).data)


@pytest.mark.parametrize("model", default_toy_llms(), ids=lambda m: m.llm_id)
def test_clone_permutes_features_and_preserves_logits(model):
    rng = np.random.default_rng(1)
    sigma = rng.permutation(model.hidden_dim)
    clone = permute_clone(model, sigma)
    for i in range(10):
        x = model.one_hot(_tokens(model, 5 + i, seed=i)) + 0.3 * rng.normal(size=(5 + i, model.vocab_size))
        s0, l0 = model.run(x)
        s1, l1 = clone.run(x)
        assert np.abs(s1 - s0[..., sigma]).max() < 1e-5
        assert np.abs(l1 - l0).max() < 1e-5


def test_clone_rejects_bad_permutation(toy_b):
    with pytest.raises(ValueError):
        permute_clone(toy_b, np.arange(31))
    with pytest.raises(ValueError):
        permute_clone(toy_b, np.zeros(32, dtype=int))


def test_clone_leaves_original_untouched(toy_b):
    before = copy.deepcopy(toy_b.layers[0].w_q)
    permute_clone(toy_b, np.random.default_rng(0).permutation(32))
    assert np.array_equal(before, toy_b.layers[0].w_q)


def test_planted_task_validation():
    with pytest.raises(ValueError):
        PlantedTask(flip_p=0.6)
    with pytest.raises(ValueError):
        PlantedTask(direction=np.ones(4))
    with pytest.raises(ValueError):
        PlantedTask(rule="and")


def test_flip_zero_probe_separates_train(planted_linear):
    t = planted_linear.tensors
    # weakest regularization: separable data should be separated exactly
    res = fit_probe(t[:300], t[300:], layer=3, token_offset=-1, cfg=ProbeConfig(c_grid=(1e4,), max_iter=5000))
    assert res.score(t[:300]) == 1.0


def test_flip_half_has_no_signal(toy_b):
    task = PlantedTask(signal_layer=3, signal_token_offset=-1, flip_p=0.5, min_tokens=8, max_tokens=16)
    t = generate_dataset(toy_b, task, 1200, seed=4).tensors
    res = fit_probe(t[:600], t[600:900], layer=3, token_offset=-1)
    assert abs(res.score(t[900:]) - 0.5) <= 0.05


def test_class_balance(planted_linear):
    assert 0.45 <= planted_linear.labels.mean() <= 0.55


def test_generation_deterministic():
    model = default_toy_llms()[0]
    task = PlantedTask(signal_layer=1, min_tokens=8, max_tokens=12)
    a = generate_dataset(model, task, 1000, seed=9)
    b = generate_dataset(model, task, 1000, seed=9)
    assert np.array_equal(a.labels, b.labels)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.tensors, b.tensors))


def test_sample_depends_only_on_seed_and_index(toy_b):
    task = PlantedTask(signal_layer=2, min_tokens=8, max_tokens=12)
    big = generate_dataset(toy_b, task, 30, seed=2)
    small = generate_dataset(toy_b, big.task, 10, seed=2)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(small.tensors, big.tensors[:10]))


def test_generate_rejects_empty(toy_b):
    with pytest.raises(ValueError):
        generate_dataset(toy_b, PlantedTask(), 0, seed=0)


def test_permuted_task_labels_clone_identically(toy_b):
    sigma = np.random.default_rng(3).permutation(32)
    clone = permute_clone(toy_b, sigma, "toy-b-perm")
    task = PlantedTask(signal_layer=3, min_tokens=8, max_tokens=12)
    a = generate_dataset(toy_b, task, 50, seed=1)
    b = generate_dataset(clone, a.task.permuted(sigma), 50, seed=1)
    assert np.array_equal(a.labels, b.labels)


def test_token_scores_have_response_length(planted_linear):
    for t, lg, pr in zip(planted_linear.tensors[:20], planted_linear.token_logits, planted_linear.token_probas):
        assert lg.shape == pr.shape == (t.n_tokens,)
        assert ((pr > 0) & (pr <= 1)).all()
