import numpy as np
import pytest

from pmt.geo_vocab import build_grid_vocab
from pmt.synth import (
    AgentState, EprParams, distance_matrix, emit_records, epr_next, explore_probability,
    simulate_agent, simulate_population, thin_observations,
)
from pmt.trajectory import MISSING, TrajectorySequence, temporal_occupancy, windowize

T0 = 1_578_268_800
WORLD = build_grid_vocab((0, 0, 2500, 2500), 500, seed=0)


def test_explore_probability():
    p = EprParams()
    assert explore_probability(1, p) == pytest.approx(0.6)
    assert explore_probability(10, p) == pytest.approx(0.6 * 10 ** -0.21)


def test_params_validated():
    for bad in (dict(rho=0.0), dict(rho=1.5), dict(gamma=-1.0), dict(alpha=-0.1),
                dict(mean_stay=0.5)):
        with pytest.raises(ValueError):
            EprParams(**bad)


def test_rho_one_gamma_zero_always_explores():
    p = EprParams(rho=1.0, gamma=0.0)
    st = AgentState(0, 1)
    st.visit(0)
    rng = np.random.default_rng(0)
    for _ in range(10):
        before = set(st.visit_counts)
        nxt = epr_next(st, p, WORLD, rng)
        assert nxt not in before
    assert st.S == 11


def test_forced_return_when_everything_visited():
    p = EprParams(rho=1.0, gamma=0.0)
    st = AgentState(0, 1, {k: 1 for k in range(WORLD.n_regions)}, current=0)
    nxt = epr_next(st, p, WORLD, np.random.default_rng(0))
    assert 0 <= nxt < WORLD.n_regions and st.S == WORLD.n_regions


def test_exploration_prefers_near_regions():
    # distance**-2 weighting: the 4 rook neighbours of the centre carry a large share
    p = EprParams(rho=1.0, gamma=0.0, alpha=2.0)
    d = distance_matrix(WORLD)
    centre = 12
    rng = np.random.default_rng(1)
    hits = 0
    n = 2000
    for _ in range(n):
        st = AgentState(centre, centre)
        st.visit(centre)
        hits += d[centre, epr_next(st, p, WORLD, rng, d)] == 500
    w = d[centre][np.arange(25) != centre] ** -2.0
    expect = 4 * 500.0 ** -2 / w.sum()
    assert abs(hits / n - expect) < 4 * np.sqrt(expect * (1 - expect) / n)


def test_return_proportional_to_visit_counts():
    p = EprParams(rho=1e-9, gamma=0.0)
    rng = np.random.default_rng(2)
    counts = np.zeros(3)
    for _ in range(3000):
        st = AgentState(0, 1, {0: 1, 1: 3, 2: 6}, current=0)
        counts[epr_next(st, p, WORLD, rng)] += 1
    np.testing.assert_allclose(counts / counts.sum(), [0.1, 0.3, 0.6], atol=0.03)


def test_agent_is_deterministic_and_home_at_night():
    span = (T0, T0 + 7 * 86_400)
    a = simulate_agent(WORLD, EprParams(), span, seed=5)
    b = simulate_agent(WORLD, EprParams(), span, seed=5)
    np.testing.assert_array_equal(a.tokens, b.tokens)
    night = a.tokens.reshape(7, 48)[:, 2:10]
    assert np.all(night == night[0, 0])
    assert np.all(a.tokens >= 0)


def test_thinning_hits_target_and_keeps_truth():
    full = simulate_agent(WORLD, EprParams(), (T0, T0 + 28 * 86_400), seed=1)
    thin = thin_observations(full, 0.75, 4, seed=2)
    np.testing.assert_array_equal(thin.truth, full.tokens)
    obs = thin.tokens != MISSING
    np.testing.assert_array_equal(thin.tokens[obs], full.tokens[obs])
    assert abs(temporal_occupancy(thin) - 0.75) < 0.08
    assert thin_observations(full, 1.0, 4, 2).tokens.tolist() == full.tokens.tolist()


def test_population_mean_occupancy_near_target():
    seqs = simulate_population(WORLD, EprParams(), 40, (T0, T0 + 14 * 86_400), seed=3)
    occ = np.mean([temporal_occupancy(s) for s in seqs])
    assert abs(occ - 0.75) < 0.03
    assert len({s.user_id for s in seqs}) == 40


def test_emitted_records_windowize_back_to_the_sequences():
    seqs = simulate_population(WORLD, EprParams(), 5, (T0, T0 + 2 * 86_400), seed=4)
    recs = emit_records(seqs, WORLD, seed=0)
    back = {s.user_id: s for s in windowize(recs, (T0, T0 + 2 * 86_400), WORLD)}
    for s in seqs:
        np.testing.assert_array_equal(back[s.user_id].tokens, s.tokens)


def test_span_must_be_window_multiple():
    with pytest.raises(ValueError):
        simulate_agent(WORLD, EprParams(), (T0, T0 + 100), seed=0)
    with pytest.raises(ValueError):
        thin_observations(TrajectorySequence("u", T0, [0, 1]), 0.0, 4, 0)
