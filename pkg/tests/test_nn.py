import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedwind import nn
from fedwind.errors import DomainError, NumericError, ShapeError
from fedwind.nn import (
    BEARING_TEMP_ARCH,
    POWER_CURVE_ARCH,
    Architecture,
    Batch,
    ModelParams,
    OptimizerState,
)


def fd_gradient(arch, flat, x, t, h=1e-5):
    """Central differences of the batch MSE, one coordinate at a time."""
    out = np.empty_like(flat)
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += h
        down[i] -= h
        lu = nn.mse_loss(nn.forward(ModelParams(arch, up), x), t)
        ld = nn.mse_loss(nn.forward(ModelParams(arch, down), x), t)
        out[i] = (lu - ld) / (2 * h)
    return out


def test_table_architectures_have_expected_sizes():
    assert POWER_CURVE_ARCH.n_params == 137
    assert BEARING_TEMP_ARCH.n_params == 185
    assert nn.flatten(nn.init_weights(POWER_CURVE_ARCH, 0)).size == 137
    assert nn.flatten(nn.init_weights(BEARING_TEMP_ARCH, 0)).size == 185


def test_init_is_glorot_bounded_with_zero_biases():
    p = nn.init_weights(BEARING_TEMP_ARCH, 5)
    for i, (fan_in, fan_out, _) in enumerate(BEARING_TEMP_ARCH.layers):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        assert np.all(np.abs(p.weight(i)) <= limit)
        assert np.all(p.bias(i) == 0)
    assert p == nn.init_weights(BEARING_TEMP_ARCH, 5)
    assert not p == nn.init_weights(BEARING_TEMP_ARCH, 6)


def test_live_init_keeps_relu_output_active():
    grid = np.linspace(0, 1, 200)
    for seed in range(20):
        p = nn.init_live_weights(POWER_CURVE_ARCH, seed)
        lin = Architecture(1, POWER_CURVE_ARCH.hidden, "linear")
        assert np.mean(nn.forward(ModelParams(lin, p.flat), grid) > 0) >= 0.5


def test_architecture_validation():
    with pytest.raises(ShapeError):
        Architecture(1, ((4, "elu"),) * 4, "linear")
    with pytest.raises(ShapeError):
        Architecture(1, ((0, "elu"),), "linear")
    with pytest.raises(ShapeError):
        Architecture(1, ((4, "tanh"),), "linear")
    with pytest.raises(ShapeError):
        Architecture(1, (), "elu")
    a = Architecture(2, ((8, "elu"), (16, "elu")), "linear")
    assert Architecture.from_dict(a.to_dict()) == a


def test_identity_network():
    arch = Architecture(1, (), "linear")
    p = ModelParams(arch, [1.0, 0.0])
    assert nn.forward(p, [[0.5]])[0] == 0.5


def test_elu_and_relu_values():
    arch = Architecture(1, ((1, "elu"),), "linear")
    p = ModelParams(arch, [1.0, 0.0, 1.0, 0.0])
    assert nn.forward(p, [[-1.0]])[0] == pytest.approx(math.exp(-1) - 1, abs=1e-15)
    assert nn.forward(p, [[-1.0]])[0] == pytest.approx(-0.6321, abs=1e-4)
    relu = Architecture(1, (), "relu")
    assert nn.forward(ModelParams(relu, [1.0, 0.0]), [[-3.2]])[0] == 0.0


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        nn.forward(nn.init_weights(BEARING_TEMP_ARCH, 0), np.zeros((3, 1)))


def test_mse_and_rmse_hand_values():
    assert nn.mse_loss([1, 3], [0, 0]) == 5.0
    assert nn.mse_loss([2], [-2]) == 16.0
    assert nn.mse_loss([1.5, 2.5], [1.5, 2.5]) == 0.0
    assert nn.rmse([1, 3], [0, 0]) == pytest.approx(2.2361, abs=1e-4)
    with pytest.raises(DomainError):
        nn.mse_loss([], [])
    with pytest.raises(ShapeError):
        nn.mse_loss([1, 2], [1])


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30), st.integers(0, 2**32 - 1))
def test_rmse_squared_is_mse(preds, seed):
    t = np.random.default_rng(seed).normal(size=len(preds))
    assert nn.rmse(preds, t) ** 2 == pytest.approx(nn.mse_loss(preds, t), rel=1e-12, abs=1e-300)


def test_one_parameter_gradient_by_hand():
    # y = w*x + b with w=1, b=0; loss (2 - 0)^2 -> dL/dw = 2*2*2 = 8, dL/db = 4
    arch = Architecture(1, (), "linear")
    g = nn.backward(ModelParams(arch, [1.0, 0.0]), Batch([[2.0]], [0.0]))
    assert list(g.flat) == [8.0, 4.0]


def test_zero_network_has_zero_gradient():
    arch = Architecture(2, ((4, "elu"),), "linear")
    g = nn.backward(ModelParams(arch, np.zeros(arch.n_params)), Batch(np.ones((5, 2)), np.zeros(5)))
    assert np.all(g.flat == 0)


def test_relu_gradient_at_zero_is_zero():
    arch = Architecture(1, (), "relu")
    g = nn.backward(ModelParams(arch, [1.0, 0.0]), Batch([[0.0]], [1.0]))
    assert np.all(g.flat == 0)


def test_backward_reports_overflowing_layer():
    arch = Architecture(1, ((2, "linear"),), "linear")
    p = ModelParams(arch, [1e300, 1e300, 0.0, 0.0, 1e300, 1e300, 0.0])
    with pytest.raises(NumericError) as exc:
        nn.backward(p, Batch([[1e300]], [0.0]))
    assert exc.value.layer == 0


def test_backward_empty_batch():
    with pytest.raises(DomainError):
        nn.backward(nn.init_weights(POWER_CURVE_ARCH, 0), Batch(np.zeros((0, 1)), np.zeros(0)))


arch_strategy = st.builds(
    lambda d, hidden, out: Architecture(d, tuple((u, "elu") for u in hidden), out),
    st.integers(1, 2),
    st.lists(st.sampled_from([4, 8, 12, 16]), max_size=3),
    st.sampled_from(["relu", "linear"]),
)


@given(arch_strategy, st.integers(0, 2**32 - 1))
def test_gradient_matches_finite_differences(arch, seed):
    rng = np.random.default_rng(seed)
    p = nn.init_weights(arch, rng)
    # random biases too, and keep ReLU output away from its kink
    flat = p.flatten() + rng.normal(0, 0.1, arch.n_params)
    x = rng.uniform(0, 1, (7, arch.input_dim))
    t = rng.normal(size=7)
    if arch.output_activation == "relu":
        lin = Architecture(arch.input_dim, arch.hidden, "linear")
        z = nn.forward(ModelParams(lin, flat), x)
        if np.min(np.abs(z)) < 1e-3:
            return
    g = nn.backward(ModelParams(arch, flat), Batch(x, t)).flat
    fd = fd_gradient(arch, flat, x, t)
    np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-7)


def test_nesterov_hand_examples():
    arch = Architecture(1, (), "linear")
    p = ModelParams(arch, [1.0, 0.0])
    g = ModelParams(arch, [0.5, 0.0])
    q, _ = nn.sgd_nesterov_step(p, g, OptimizerState.zeros(arch, 0.1, momentum=0.0))
    assert q.flat[0] == pytest.approx(0.95, abs=1e-15)
    q, o = nn.sgd_nesterov_step(p, g, OptimizerState.zeros(arch, 0.1, momentum=0.9))
    assert o.velocity[0] == pytest.approx(-0.05, abs=1e-15)
    assert q.flat[0] == pytest.approx(0.905, abs=1e-15)


@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0, 0.99))
def test_nesterov_coasting(w, v, mu):
    arch = Architecture(1, (), "linear")
    opt = OptimizerState(np.array([v, 0.0]), 0.1, mu)
    q, o = nn.sgd_nesterov_step(ModelParams(arch, [w, 0.0]), ModelParams(arch, [0.0, 0.0]), opt)
    assert o.velocity[0] == mu * v
    assert q.flat[0] == w + mu * (mu * v) - 0.0


def test_nesterov_shape_error():
    with pytest.raises(ShapeError):
        nn.sgd_nesterov_step(nn.init_weights(POWER_CURVE_ARCH, 0), nn.init_weights(BEARING_TEMP_ARCH, 0),
                             OptimizerState.zeros(POWER_CURVE_ARCH, 0.1))


def test_one_epoch_one_batch_equals_manual_step(rng):
    arch = BEARING_TEMP_ARCH
    x = rng.uniform(size=(20, 2))
    t = rng.normal(size=20)
    p = nn.init_weights(arch, 3)
    opt = OptimizerState.zeros(arch, 0.05, 0.9, batch_size=64)
    got, got_opt = nn.train_epochs(p, opt, Batch(x, t), 1, seed=9)
    perm = np.random.default_rng(9).permutation(20)
    want, want_opt = nn.sgd_nesterov_step(p, nn.backward(p, Batch(x[perm], t[perm])), opt)
    assert got == want
    assert np.array_equal(got_opt.velocity, want_opt.velocity)


def test_full_batch_without_momentum_is_gradient_descent(rng):
    arch = Architecture(1, ((4, "elu"),), "linear")
    x = rng.uniform(size=(10, 1))
    t = rng.normal(size=10)
    p = nn.init_weights(arch, 1)
    got, _ = nn.train_epochs(p, OptimizerState.zeros(arch, 0.1, 0.0, batch_size=10), Batch(x, t), 1, seed=0)
    g = fd_gradient(arch, p.flat, x, t)
    np.testing.assert_allclose(got.flat, p.flat - 0.1 * g, rtol=1e-6, atol=1e-9)


def test_train_epochs_deterministic_and_fixed_point(rng):
    arch = BEARING_TEMP_ARCH
    x = rng.uniform(size=(50, 2))
    t = rng.normal(size=50)
    p = nn.init_weights(arch, 0)
    opt = OptimizerState.zeros(arch, 0.01)
    assert nn.train_epochs(p, opt, Batch(x, t), 0, seed=4)[0] == p
    assert nn.train_epochs(p, opt, Batch(x, t), 3, seed=4)[0] == nn.train_epochs(p, opt, Batch(x, t), 3, seed=4)[0]
    # a model that already fits exactly (integer arithmetic, zero residuals)
    line = Architecture(1, (), "linear")
    q = ModelParams(line, [2.0, 1.0])
    xs = np.arange(10.0)
    fitted, _ = nn.train_epochs(q, OptimizerState.zeros(line, 0.1), Batch(xs, 2 * xs + 1), 5, seed=1)
    assert fitted == q


def test_train_epochs_freezes_leading_parameters(rng):
    arch = BEARING_TEMP_ARCH
    p = nn.init_weights(arch, 0)
    start = arch.layer_start(2)
    q, _ = nn.train_epochs(p, OptimizerState.zeros(arch, 0.05), Batch(rng.uniform(size=(40, 2)), rng.normal(size=40)),
                           2, seed=0, trainable_from=start)
    assert np.array_equal(q.flat[:start].view(np.uint64), p.flat[:start].view(np.uint64))
    assert not np.array_equal(q.flat[start:], p.flat[start:])


def test_train_epochs_errors():
    p = nn.init_weights(POWER_CURVE_ARCH, 0)
    with pytest.raises(DomainError):
        nn.train_epochs(p, OptimizerState.zeros(POWER_CURVE_ARCH, 0.1), Batch(np.zeros((0, 1)), np.zeros(0)), 1, 0)
    with pytest.raises(DomainError):
        Batch([[np.nan]], [0.0])


@given(arch_strategy, st.integers(0, 2**32 - 1))
def test_flatten_roundtrip_bit_exact(arch, seed):
    flat = np.random.default_rng(seed).normal(size=arch.n_params) * 10.0 ** np.random.default_rng(seed).integers(
        -300, 300, arch.n_params)
    p = ModelParams(arch, flat)
    assert nn.unflatten(arch, nn.flatten(p)) == p
    layers = [(p.weight(i), p.bias(i)) for i in range(arch.n_layers)]
    assert ModelParams.from_layers(arch, layers) == p


def test_unflatten_length_mismatch():
    with pytest.raises(ShapeError):
        nn.unflatten(POWER_CURVE_ARCH, np.zeros(136))


def test_canonical_flatten_order():
    arch = Architecture(2, ((3, "elu"),), "linear")
    w0 = np.arange(6.0).reshape(3, 2)
    p = ModelParams.from_layers(arch, [(w0, [10, 11, 12]), ([[20, 21, 22]], [30])])
    assert list(p.flat) == [0, 1, 2, 3, 4, 5, 10, 11, 12, 20, 21, 22, 30]


@given(arch_strategy.filter(lambda a: a.output_activation == "relu"), st.integers(0, 2**32 - 1))
def test_relu_output_never_negative(arch, seed):
    rng = np.random.default_rng(seed)
    p = ModelParams(arch, rng.normal(size=arch.n_params))
    assert np.all(nn.forward(p, rng.normal(size=(25, arch.input_dim)) * 5) >= 0)


def test_search_space_size():
    shapes = nn.search_space_shapes()
    assert len(shapes) == 1 + 4 + 16 + 64 == 85
    assert len(set(shapes)) == 85
