import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuraldemand.nn import (
    AdamState,
    ContractError,
    DimensionError,
    GradientTape,
    MLPWeights,
    adam_step,
    clip_global_norm,
    init_weights,
    input_jacobian_fd,
    mlp_forward,
    shares_forward,
)
from neuraldemand.nn import autodiff as ad
from neuraldemand.nn import kernels
from neuraldemand.nn import _kernels_py
from neuraldemand.nn.mlp import silu, silu_grad


def forward_np(weights, x):
    tape = GradientTape()
    params = [tape.variable(a) for a in weights.arrays()]
    return mlp_forward(params, tape.constant(x)).value


def random_weights(dims, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return MLPWeights(
        [(scale * rng.normal(size=(a, b)), scale * rng.normal(size=b)) for a, b in zip(dims[:-1], dims[1:])]
    )


def test_zero_weights_give_zero_logits():
    w = MLPWeights.zeros_like(init_weights(4, 8, 3, seed=1))
    out = forward_np(w, np.random.default_rng(0).normal(size=(5, 4)))
    assert np.array_equal(out, np.zeros((5, 3)))


def test_single_unit_net_reproduces_silu():
    # 1 -> 1 -> 1 -> 1 -> 1 with identity weights: output = silu(silu(silu(x)))
    one = (np.ones((1, 1)), np.zeros(1))
    w = MLPWeights([one, one, one, one])
    x = np.array([[0.0], [1.3], [-2.0]])
    out = forward_np(w, x)[:, 0]
    assert out[0] == 0.0
    assert out[1] == pytest.approx(silu(silu(silu(1.3))), rel=1e-14)
    # one hidden layer version checks silu itself
    w1 = MLPWeights([one, (np.ones((1, 1)), np.zeros(1))])
    assert forward_np(w1, x)[:, 0] == pytest.approx(silu(x[:, 0]), rel=1e-14)


def test_forward_is_deterministic():
    w = init_weights(4, 16, 3, seed=7)
    x = np.tile(np.array([[0.1, -0.3, 1.2, 7.3]]), (2, 1))
    a = forward_np(w, x)
    b = forward_np(w, x)
    assert np.array_equal(a[0], a[1])
    assert np.array_equal(a, b)


def test_shape_mismatch_raises():
    w = init_weights(4, 8, 3, seed=0)
    with pytest.raises(DimensionError):
        forward_np(w, np.zeros((2, 5)))


def test_backward_linear_bias_case():
    w = MLPWeights.zeros_like(init_weights(3, 4, 2, seed=0))
    w.layers[3][1][1] = 0.7
    tape = GradientTape()
    params = [tape.variable(a) for a in w.arrays()]
    loss = ad.sum(mlp_forward(params, tape.constant(np.ones((1, 3)))))
    grads = tape.gradient(loss, params)
    assert np.array_equal(grads[-1], np.array([1.0, 1.0]))
    # every other weight is multiplied by a zero somewhere downstream
    for g in grads[:-2]:
        assert np.all(g == 0)


def test_constant_loss_has_zero_gradients():
    w = init_weights(3, 4, 2, seed=0)
    tape = GradientTape()
    params = [tape.variable(a) for a in w.arrays()]
    mlp_forward(params, tape.constant(np.ones((2, 3))))
    loss = tape.constant(3.0)
    assert all(np.all(g == 0) for g in tape.gradient(loss, params))


def test_non_scalar_root_is_rejected():
    tape = GradientTape()
    x = tape.variable(np.ones(3))
    with pytest.raises(ContractError):
        tape.gradient(x * 2.0, [x])


def _kl_loss_value(weights, x, target):
    logits = forward_np(weights, x)
    z = logits - logits.max(axis=1, keepdims=True)
    logw = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(np.mean(np.sum(target * (np.log(target) - logw), axis=1)))


def test_reverse_mode_matches_central_differences_every_weight():
    # 4-2-2-2 net: d_s=4, H=2, G=2 (the H/2 layer has a single unit)
    rng = np.random.default_rng(3)
    w = random_weights([4, 2, 2, 1, 2], seed=11)
    x = rng.normal(size=(6, 4))
    target = rng.dirichlet(np.ones(2), size=6)
    tape = GradientTape()
    params = [tape.variable(a) for a in w.arrays()]
    logw = ad.log_softmax(mlp_forward(params, tape.constant(x)))
    loss = ad.mean(ad.sum(tape.constant(target) * (tape.constant(np.log(target)) - logw), axis=1))
    grads = tape.gradient(loss, params)
    h = 1e-5
    arrays = w.arrays()
    worst = 0.0
    for a, g in zip(arrays, grads):
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + h
            up = _kl_loss_value(MLPWeights.from_arrays(arrays), x, target)
            a[idx] = old - h
            dn = _kl_loss_value(MLPWeights.from_arrays(arrays), x, target)
            a[idx] = old
            fd = (up - dn) / (2 * h)
            rel = abs(fd - g[idx]) / max(abs(fd) + abs(g[idx]), 1e-8)
            worst = max(worst, rel)
    assert worst < 1e-4


@pytest.mark.parametrize("x", [-3.0, 0.0, 3.0])
def test_silu_derivative_against_fd(x):
    h = 1e-6
    fd = (silu(x + h) - silu(x - h)) / (2 * h)
    assert silu_grad(x) == pytest.approx(fd, abs=1e-9)
    s = 1 / (1 + np.exp(-x))
    assert silu_grad(x) == pytest.approx(s * (1 + x * (1 - s)), rel=1e-14)


def test_kaiming_and_xavier_initialisation():
    w = init_weights(4, 256, 3, seed=5)
    W1 = w.layers[0][0]
    assert abs(W1.std() / np.sqrt(2 / 4) - 1) < 0.10
    W4 = w.layers[3][0]
    assert W4.shape == (128, 3)
    assert np.abs(W4).max() <= 0.1 * np.sqrt(6 / (128 + 3))
    assert all(np.all(b == 0) for _, b in w.layers)
    again = init_weights(4, 256, 3, seed=5)
    assert all(np.array_equal(a, b) for a, b in zip(w.arrays(), again.arrays()))
    assert not np.array_equal(W1, init_weights(4, 256, 3, seed=6).layers[0][0])


def test_adam_zero_gradient_no_decay_leaves_weights():
    p = [np.array([1.0, -2.0])]
    st_ = AdamState.for_params(p, weight_decay=0.0)
    adam_step(st_, p, [np.zeros(2)])
    assert np.array_equal(p[0], [1.0, -2.0])


def test_adam_single_step_formula():
    g = np.array([0.3, -2.0, 1e-3])
    p = [np.zeros(3)]
    st_ = AdamState.for_params(p, lr=0.01, weight_decay=0.0)
    adam_step(st_, p, [g])
    # m_hat = g, v_hat = g^2 after bias correction
    expected = -0.01 * g / (np.abs(g) + 1e-8)
    assert np.allclose(p[0], expected, rtol=1e-12, atol=0)


def test_adam_constant_gradient_step_tends_to_lr_sign():
    g = np.array([0.5, -4.0])
    p = [np.zeros(2)]
    st_ = AdamState.for_params(p, lr=1e-3, weight_decay=0.0)
    prev = p[0].copy()
    for _ in range(3000):
        prev = p[0].copy()
        adam_step(st_, p, [g])
    assert np.allclose(p[0] - prev, -1e-3 * np.sign(g), rtol=1e-6)


def test_adam_decoupled_weight_decay():
    p = [np.array([2.0])]
    st_ = AdamState.for_params(p, lr=0.1, weight_decay=0.5)
    adam_step(st_, p, [np.zeros(1)])
    assert p[0][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_adam_rejects_nan():
    from neuraldemand.nn import TrainingError

    p = [np.zeros(2)]
    with pytest.raises(TrainingError):
        adam_step(AdamState.for_params(p), p, [np.array([np.nan, 0.0])])


def test_clip_global_norm_cases():
    assert clip_global_norm([np.array([0.3, 0.4])])[0] == pytest.approx([0.3, 0.4])
    assert clip_global_norm([np.array([3.0])])[0] == pytest.approx([1.0])
    out = clip_global_norm([np.array([3.0]), np.array([4.0])], 1.0)
    assert out[0][0] == pytest.approx(0.6, abs=1e-15)
    assert out[1][0] == pytest.approx(0.8, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=6), st.floats(0.1, 5.0))
def test_clip_is_idempotent(values, max_norm):
    g = [np.array(values)]
    once = clip_global_norm(g, max_norm)
    twice = clip_global_norm(once, max_norm)
    assert np.allclose(once[0], twice[0], rtol=1e-12, atol=1e-12)


def _dual_forward(weights, x, dx):
    """Forward-mode (value, tangent) propagation through MLP + softmax."""
    h, dh = x, dx
    n = len(weights.layers)
    for k, (W, b) in enumerate(weights.layers):
        z, dz = h @ W + b, dh @ W
        if k < n - 1:
            s = 1 / (1 + np.exp(-z))
            h, dh = z * s, dz * s * (1 + z * (1 - s))
        else:
            h, dh = z, dz
    e = np.exp(h - h.max())
    w = e / e.sum()
    return w, w * (dh - np.sum(w * dh))


def test_input_jacobian_matches_forward_mode():
    w = random_weights([4, 5, 5, 3, 3], seed=2, scale=0.7)
    s = np.array([0.2, -0.4, 1.1, 0.5])
    J = input_jacobian_fd(w, s, [0, 1, 2, 3], h=1e-4)
    for j in range(4):
        e = np.zeros(4)
        e[j] = 1.0
        _, dw = _dual_forward(w, s, e)
        assert np.allclose(J[:, j], dw, atol=1e-4)


def test_input_jacobian_degenerate_cases():
    # constant shares: only output biases non-zero
    w = MLPWeights.zeros_like(init_weights(3, 4, 3, seed=0))
    w.layers[3][1][:] = [0.5, -1.0, 2.0]
    assert np.all(input_jacobian_fd(w, [1.0, 2.0, 3.0], [0, 1, 2]) == 0)
    # single good: share is identically 1
    w1 = init_weights(3, 4, 1, seed=0)
    assert np.all(input_jacobian_fd(w1, [0.1, 0.2, 0.3], [0, 1, 2]) == 0)


def test_fd_jacobian_is_on_the_tape():
    from neuraldemand.nn import fd_share_derivatives

    w = random_weights([2, 3, 3, 2, 2], seed=4)
    s = np.array([[0.3, -0.2], [0.1, 0.4]])

    def objective(arrays):
        tape = GradientTape()
        params = [tape.variable(a) for a in arrays]
        _, d = fd_share_derivatives(lambda x: shares_forward(params, x), tape, s, [0], 1e-3)
        return tape, params, ad.sum(ad.square(d[0]))

    tape, params, loss = objective(w.arrays())
    grads = tape.gradient(loss, params)
    arrays = [a.copy() for a in w.arrays()]
    h = 1e-6
    a = arrays[0]
    old = a[0, 0]
    a[0, 0] = old + h
    up = objective(arrays)[2].value
    a[0, 0] = old - h
    dn = objective(arrays)[2].value
    a[0, 0] = old
    assert grads[0][0, 0] == pytest.approx((up - dn) / (2 * h), rel=1e-4)


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="extension not built")
def test_compiled_kernels_match_fallback():
    from neuraldemand.nn import _kernels

    rng = np.random.default_rng(0)
    z = rng.normal(scale=30, size=(7, 5))
    a1, s1 = _kernels.silu_forward(z)
    a2, s2 = _kernels_py.silu_forward(z)
    assert np.allclose(a1, a2, rtol=1e-14, atol=0) and np.allclose(s1, s2, rtol=1e-14, atol=1e-300)
    g = rng.normal(size=z.shape)
    assert np.allclose(_kernels.silu_backward(g, z, s1), _kernels_py.silu_backward(g, z, s2), rtol=1e-13)
    assert np.allclose(_kernels.softmax_rows(z), _kernels_py.softmax_rows(z), rtol=1e-13)
    start = rng.normal(size=4)
    params = [start.copy(), start.copy()]
    grads = rng.normal(size=4)
    state = [np.zeros(4), np.zeros(4), np.zeros(4), np.zeros(4)]
    for step in (1, 2, 3):
        _kernels.adam_update(params[0], grads, state[0], state[1], 1e-2, 0.9, 0.999, 1e-8, 1e-3, step)
        _kernels_py.adam_update(params[1], grads, state[2], state[3], 1e-2, 0.9, 0.999, 1e-8, 1e-3, step)
    assert np.allclose(params[0], params[1], rtol=1e-13)
