import numpy as np
import pytest

from hipo import model as lm
from hipo.optim import AdamWConfig, AdamWState, NonFiniteGradientError, adamw_step, clip_grad_norm

CFG = lm.ModelConfig(context_length=4, embed_dim=2, n_layers=0, n_heads=1, vocab_size=2, seed=0)


def one_param():
    params = lm.ModelParams(CFG, {"w": np.zeros(1, dtype=np.float32)})
    state = AdamWState.init(params)
    return params, state


def test_first_step_matches_hand_evaluated_recurrence():
    # w=0, g=1, lr=0.01, wd=0: m-hat = v-hat = 1, update = lr / (1 + eps)
    params, state = one_param()
    adamw_step(params, {"w": np.ones(1)}, state, lr=0.01)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = (1 - beta1) * 1.0
    v = (1 - beta2) * 1.0
    expected = -0.01 * (m / (1 - beta1)) / (np.sqrt(v / (1 - beta2)) + eps)
    assert params.tensors["w"][0] == np.float32(expected)
    assert abs(params.tensors["w"][0] - (-0.00999999990)) < 1e-9


def test_zero_gradient_leaves_params_unchanged():
    params, state = one_param()
    params.tensors["w"][:] = 0.5
    adamw_step(params, {"w": np.zeros(1)}, state, lr=0.1)
    assert params.tensors["w"][0] == np.float32(0.5)


def test_zero_lr_leaves_params_unchanged():
    params, state = one_param()
    params.tensors["w"][:] = -1.25
    adamw_step(params, {"w": np.ones(1)}, state, lr=0.0)
    assert params.tensors["w"][0] == np.float32(-1.25)


def test_nonfinite_gradient_reports_step_index():
    params, state = one_param()
    adamw_step(params, {"w": np.ones(1)}, state, lr=0.01)
    with pytest.raises(NonFiniteGradientError) as exc:
        adamw_step(params, {"w": np.array([np.nan])}, state, lr=0.01)
    assert exc.value.step == 2


def test_weight_decay_is_decoupled():
    # with zero gradient, decay shrinks weights by lr*wd exactly
    params = lm.ModelParams(CFG, {"w": np.full(1, 2.0, dtype=np.float32)})
    state = AdamWState.init(params, AdamWConfig(weight_decay=0.1))
    adamw_step(params, {"w": np.zeros(1)}, state, lr=0.5)
    assert abs(params.tensors["w"][0] - (2.0 - 0.5 * 0.1 * 2.0)) < 1e-7


def test_steps_are_deterministic():
    rng = np.random.default_rng(0)
    g = rng.normal(size=3)
    results = []
    for _ in range(2):
        params = lm.ModelParams(CFG, {"w": np.ones(3, dtype=np.float32)})
        state = AdamWState.init(params)
        for _ in range(5):
            adamw_step(params, {"w": g}, state, lr=0.05)
        results.append(params.tensors["w"].copy())
    assert np.array_equal(results[0], results[1])


def test_clip_grad_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    norm = clip_grad_norm(grads, max_norm=1.0)
    assert abs(norm - 5.0) < 1e-12
    assert abs(np.sqrt(grads["a"][0] ** 2 + grads["b"][0] ** 2) - 1.0) < 1e-12
