import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cycletrain.errors import ConfigError, NonFiniteError
from cycletrain.nn import Dense, Network, build_classifier, softmax_cross_entropy
from cycletrain.optim import AdamWConfig, AdamWState, ParamGroup, adamw_step, build_groups, group_rates


def scalar_net(theta=1.0, grad=1.0):
    net = Network([[Dense(1, 1, bias=False)]]).astype(np.float64)
    p = net.parameters()[0]
    p.data = np.array([[theta]])
    p.grad = np.array([[grad]])
    return net, p


def step(net, lr=0.1, wd=0.0, momentum=0.9, state=None, groups=None):
    state = state if state is not None else AdamWState()
    adamw_step(net, state, AdamWConfig(weight_decay=wd), lr, momentum,
               groups or build_groups(net.num_groups, lr))
    return state


def test_first_step_hand_value():
    net, p = scalar_net()
    state = step(net)
    # t=1: m_hat = 1, v_hat = 1
    assert abs(p.data[0, 0] - (1.0 - 0.1 / (1.0 + 1e-8))) < 1e-12
    assert abs(p.data[0, 0] - 0.9) < 1e-8
    assert state.t == 1
    assert p.grad is None


def test_first_step_with_decay_hand_value():
    net, p = scalar_net()
    step(net, wd=0.01)
    assert abs(p.data[0, 0] - (1.0 - 0.1 * 0.01 * 1.0 - 0.1 / (1.0 + 1e-8))) < 1e-12
    assert abs(p.data[0, 0] - 0.899) < 1e-8


def test_zero_grad_leaves_theta():
    net, p = scalar_net(0.7, 0.0)
    state = AdamWState()
    for _ in range(5):
        p.grad = np.zeros((1, 1))
        step(net, state=state)
    assert p.data[0, 0] == 0.7
    assert state.t == 5


def test_second_step_matches_reference():
    net, p = scalar_net(1.0, 1.0)
    state = step(net, momentum=0.9)
    p.grad = np.array([[-0.5]])
    step(net, momentum=0.88, state=state)
    m = 0.88 * 0.1 + 0.12 * -0.5
    v = 0.999 * 0.001 + 0.001 * 0.25
    expected = (1 - 0.1 / (1 + 1e-8)) - 0.1 * (m / (1 - 0.88 ** 2)) / (math.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    assert abs(p.data[0, 0] - expected) < 1e-12


@given(st.floats(-3, 3), st.floats(-3, 3).filter(lambda g: abs(g) > 1e-3), st.floats(1e-4, 1.0),
       st.floats(1e-4, 0.5))
def test_decay_is_a_shrink_of_the_pre_step_weights(theta, g, lr, wd):
    decayed, p1 = scalar_net(theta, g)
    step(decayed, lr=lr, wd=wd)
    plain, p2 = scalar_net(theta * (1 - lr * wd), g)
    step(plain, lr=lr, wd=0.0)
    assert p1.data[0, 0] == p2.data[0, 0]


@pytest.mark.parametrize("c", [0.1, 10.0])
def test_first_step_is_scale_free(c):
    rng = np.random.default_rng(0)
    g = rng.normal(size=(1, 1))
    a, pa = scalar_net(0.3, g[0, 0])
    b, pb = scalar_net(0.3, c * g[0, 0])
    step(a)
    step(b)
    da, db = pa.data[0, 0] - 0.3, pb.data[0, 0] - 0.3
    assert abs(abs(db) / abs(da) - 1) < 1e-6


def test_second_moment_non_negative_and_decay_skipped_for_frozen():
    rng = np.random.default_rng(1)
    net = build_classifier(1, 3, seed=0, widths=(4, 8), hidden=8)
    groups = build_groups(net.num_groups, (1e-4, 1e-2), frozen=[True, False, False])
    before = net.checksum(groups=[0])
    state = AdamWState()
    for _ in range(3):
        _, g = softmax_cross_entropy(net.forward(rng.random((4, 1, 8, 8))), [0, 1, 2, 0])
        net.backward(g)
        adamw_step(net, state, AdamWConfig(), 1e-2, 0.9, groups)
    assert net.checksum(groups=[0]) == before
    assert all((v >= 0).all() for v in state.v.values())
    assert not any(k.startswith("g0.") for k in state.m)


def test_base_lr_must_be_positive():
    net, _ = scalar_net()
    with pytest.raises(ConfigError):
        adamw_step(net, AdamWState(), AdamWConfig(), 0.0, 0.9, build_groups(1, 1e-2))


def test_non_finite_update_names_parameter():
    net, p = scalar_net(1.0, np.inf)
    with pytest.raises(NonFiniteError, match=r"g0\.l0\.weight"):
        step(net)
    assert p.data[0, 0] == 1.0


def test_config_validation():
    for bad in [dict(beta1=1.0), dict(beta2=0.0), dict(eps=0.0), dict(weight_decay=-1.0)]:
        with pytest.raises(ConfigError):
            AdamWConfig(**bad)
    with pytest.raises(ConfigError):
        ParamGroup(0, 0.0)


def test_group_rates_examples():
    np.testing.assert_allclose(group_rates(3, (1e-4, 1e-2)), [1e-4, 1e-3, 1e-2], rtol=1e-12)
    assert group_rates(2, 2e-2) == [2e-2, 2e-2]
    assert group_rates(1, (3e-4, 3e-2)) == [3e-2]
    with pytest.raises(ConfigError):
        group_rates(3, (1e-2, 1e-4))


def test_build_groups_scales_relative_to_upper_rate():
    groups = build_groups(3, (1e-4, 1e-2))
    np.testing.assert_allclose([1e-2 * g.lr_scale for g in groups], [1e-4, 1e-3, 1e-2], rtol=1e-12)
    assert groups[-1].lr_scale == 1.0


@given(st.integers(1, 8), st.floats(1e-7, 1.0), st.floats(1.0, 1e4))
def test_group_rates_monotone_and_geometric(n, lo, ratio):
    rates = group_rates(n, (lo, lo * ratio))
    assert all(a <= b * (1 + 1e-12) for a, b in zip(rates, rates[1:]))
    assert rates[-1] == pytest.approx(lo * ratio, rel=1e-12)
    if n >= 3:
        q = [b / a for a, b in zip(rates, rates[1:])]
        np.testing.assert_allclose(q, q[0], rtol=1e-9)
