import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latent_replay.arch import get_preset
from latent_replay.cost import CostModel, blocks_from_spec, cost_table, relative_cost, updates
from latent_replay.errors import ConfigError
from latent_replay.replay import ReplayStrategy

ARCH1 = blocks_from_spec(get_preset("ARCH1"))
ARCH2 = blocks_from_spec(get_preset("ARCH2"))


def test_blocks():
    assert ARCH1.blocks == (4_000_000, 200_000)
    assert ARCH2.blocks == (1_000_000, 1_000_000, 100_000)
    assert blocks_from_spec(get_preset("ARCH1"), include_biases=True).blocks == (4_002_000, 200_100)


def test_updates_by_hand():
    assert updates(ARCH1, [0.5, 0.5]) == pytest.approx(0.5 * 4_000_000 + 200_000)
    assert updates(ARCH2, [0.2, 0.3, 0.5]) == pytest.approx(800_000)
    assert updates(ARCH1, [1, 0]) == ARCH1.max_updates == 4_200_000


@pytest.mark.parametrize("model,strategy,expected", [
    (ARCH1, (0.7, 0.3), 71.4), (ARCH1, (0.5, 0.5), 52.4), (ARCH1, (0.3, 0.7), 33.3),
    (ARCH2, (0.5, 0.3, 0.2), 66.7), (ARCH2, (0.34, 0.33, 0.33), 52.9), (ARCH2, (0.2, 0.3, 0.5), 38.1),
])
def test_reference_relative_costs(model, strategy, expected):
    assert round(100 * relative_cost(model, strategy), 1) == expected


@pytest.mark.parametrize("strategy,expected", [((0.7, 0.3), 71.4), ((0.5, 0.5), 52.4), ((0.3, 0.7), 33.3)])
def test_bias_accounting_keeps_one_decimal(strategy, expected):
    model = blocks_from_spec(get_preset("ARCH1"), include_biases=True)
    assert round(100 * relative_cost(model, strategy), 1) == expected


def test_internal_replay_is_exactly_one():
    for model in (ARCH1, ARCH2):
        assert relative_cost(model, ReplayStrategy.internal_replay(len(model))) == 1.0


def test_errors():
    with pytest.raises(ConfigError):
        updates(ARCH1, [0.2, 0.3, 0.5])
    with pytest.raises(ConfigError):
        CostModel((0, 0))


def test_deepest_injection_costs_last_block():
    assert updates(ARCH2, [0, 0, 1]) == 100_000


def test_cost_table():
    rows = cost_table(get_preset("ARCH1"), [ReplayStrategy((0.5, 0.5))])
    assert rows[0]["U"] == pytest.approx(2_200_000) and rows[0]["R"] == pytest.approx(2.2 / 4.2)


blocks_st = st.lists(st.integers(1, 10**7), min_size=1, max_size=6)


def simplex(n, data):
    raw = data.draw(st.lists(st.floats(0.0, 1.0), min_size=n, max_size=n).filter(lambda v: sum(v) > 1e-3))
    arr = np.asarray(raw) / sum(raw)
    return arr


@given(blocks_st, st.data())
def test_relative_cost_bounds(blocks, data):
    model = CostModel(tuple(blocks))
    r = relative_cost(model, simplex(len(blocks), data))
    assert 0 < r <= 1 + 1e-12


@settings(max_examples=200)
@given(st.lists(st.integers(1, 10**7), min_size=2, max_size=6), st.data())
def test_depth_monotonicity(blocks, data):
    model = CostModel(tuple(blocks))
    s = simplex(len(blocks), data)
    a = data.draw(st.integers(0, len(blocks) - 2))
    b = data.draw(st.integers(a + 1, len(blocks) - 1))
    if s[a] < 1e-6:
        return
    eps = data.draw(st.floats(1e-6, 1.0)) * s[a]
    moved = s.copy()
    moved[a] -= eps
    moved[b] += eps
    drop = updates(model, s) - updates(model, moved)
    expected = eps * sum(blocks[a:b])
    assert drop > 0
    assert drop == pytest.approx(expected, rel=1e-9, abs=1e-6)


@given(blocks_st, st.data(), st.floats(0, 1))
def test_linearity(blocks, data, lam):
    model = CostModel(tuple(blocks))
    s1, s2 = simplex(len(blocks), data), simplex(len(blocks), data)
    mix = lam * s1 + (1 - lam) * s2
    assert updates(model, mix) == pytest.approx(lam * updates(model, s1) + (1 - lam) * updates(model, s2),
                                                rel=1e-9, abs=1e-6)
