import numpy as np
import pytest

from _helpers import curve_client
from fedwind import nn
from fedwind.customization import FinetunePlan, choose_k, finetune, run_customized, select_customization
from fedwind.data import VALIDATION
from fedwind.errors import ConfigError
from fedwind.federation import ClientState, evaluate
from fedwind.nn import BEARING_TEMP_ARCH, Batch, OptimizerState

ARCH = BEARING_TEMP_ARCH


def client_for(global_params, offset=0.0, seed=0, n=120):
    rng = np.random.default_rng(seed)

    def part(m):
        x = rng.uniform(0, 1, (m, 2))
        return Batch(x, nn.forward(global_params, x) + offset)

    return ClientState(0, part(n), part(n // 2), part(n // 2), OptimizerState.zeros(ARCH, 0.02, 0.9, 16), seed)


@pytest.fixture
def global_params():
    return nn.init_weights(ARCH, 7)


def test_zero_rate_keeps_global(global_params):
    c = client_for(global_params, offset=1.0)
    params, score = finetune(global_params, c, FinetunePlan(3, 0.0, patience=2))
    assert params == global_params
    assert score == evaluate(global_params, c, VALIDATION)


def test_k1_freezes_all_but_last_layer(global_params):
    c = client_for(global_params, offset=0.5)
    params, _ = finetune(global_params, c, FinetunePlan(1, 0.05, patience=3, max_epochs=10))
    start = ARCH.layer_start(ARCH.n_layers - 1)
    assert np.array_equal(params.flat[:start].view(np.uint64), global_params.flat[:start].view(np.uint64))
    assert not np.array_equal(params.flat[start:], global_params.flat[start:])


@pytest.mark.parametrize("k", [1, 2])
def test_freezing_boundary(global_params, k):
    c = client_for(global_params, offset=0.5)
    params, _ = finetune(global_params, c, FinetunePlan(k, 0.05, patience=2, max_epochs=3))
    start = ARCH.layer_start(ARCH.n_layers - k)
    assert np.array_equal(params.flat[:start], global_params.flat[:start])


def test_constant_offset_absorbed_by_output_bias(global_params):
    c = client_for(global_params, offset=2.0)
    before = evaluate(global_params, c, VALIDATION)
    assert before == pytest.approx(2.0)
    params, score = finetune(global_params, c, FinetunePlan.half_rate(0.2, 1, patience=10, max_epochs=400))
    assert score < 1e-3
    assert params.bias(ARCH.n_layers - 1)[0] - global_params.bias(ARCH.n_layers - 1)[0] == pytest.approx(2.0, abs=1e-2)


def test_finetune_never_worse_than_global():
    for seed in range(5):
        c = curve_client(seed, n=80, arch=ARCH, seed=seed, lr=0.1)
        g = nn.init_weights(ARCH, seed)
        _, score = finetune(g, c, FinetunePlan(2, 0.05, patience=2, max_epochs=20))
        assert score <= evaluate(g, c, VALIDATION)


def test_finetune_deterministic(global_params):
    a = finetune(global_params, client_for(global_params, 0.3), FinetunePlan(2, 0.02, patience=3, max_epochs=15))
    b = finetune(global_params, client_for(global_params, 0.3), FinetunePlan(2, 0.02, patience=3, max_epochs=15))
    assert a[0] == b[0] and a[1] == b[1]


def test_k_out_of_range(global_params):
    c = client_for(global_params)
    for k in (0, 4):
        with pytest.raises(ConfigError):
            finetune(global_params, c, FinetunePlan(k, 0.01))


# validation RMSE grid of a nine-turbine customization experiment, k = 1, 2, 3
PUBLISHED_GRID = {
    1: (3.656, 4.126, 3.921),
    2: (4.942, 5.066, 4.960),
    3: (3.678, 3.767, 3.779),
    4: (3.702, 3.952, 3.863),
    5: (4.676, 4.712, 4.704),
    6: (3.710, 3.713, 3.720),
    7: (3.733, 3.735, 3.745),
    8: (5.670, 5.720, 5.697),
    9: (3.809, 3.829, 3.860),
}


@pytest.mark.parametrize("wt,row", sorted(PUBLISHED_GRID.items()))
def test_choose_k_on_published_grid(wt, row):
    grid = dict(zip((1, 2, 3), row))
    oracle = min((v, k) for k, v in grid.items())[1]
    assert choose_k(grid) == oracle == 1


def test_choose_k_ties_and_minimum():
    assert choose_k({1: 2.0, 2: 2.0, 3: 2.0}) == 1
    assert choose_k({1: 3.0, 2: 1.0, 3: 1.0}) == 2
    assert choose_k({1: 3.0, 2: 2.0, 3: 0.5}) == 3


def test_select_customization_returns_min(global_params):
    c = client_for(global_params, offset=0.4)
    res = select_customization(global_params, c, 0.05, patience=3, max_epochs=10)
    assert set(res.val_by_k) == {1, 2, 3}
    assert res.val_rmse == min(res.val_by_k.values())
    assert res.k == choose_k(res.val_by_k)
    assert evaluate(res.params, c, VALIDATION) == res.val_rmse


def test_run_customized_times_include_base(global_params):
    clients = [client_for(global_params, offset=0.1 * i, seed=i) for i in range(3)]
    for i, c in enumerate(clients):
        c.client_id = i
    chosen, report = run_customized(global_params, clients, 0.05, patience=2, max_epochs=5, base_seconds=100.0)
    for c in clients:
        assert report.seconds[c.client_id] == pytest.approx(100.0 + report.meta["finetune_seconds"][c.client_id])
        assert report.seconds[c.client_id] >= 100.0
        assert report.val_rmse[c.client_id] <= evaluate(global_params, c, VALIDATION)
        assert report.iterations[c.client_id] == chosen[c.client_id].k
