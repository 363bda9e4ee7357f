import itertools
import json
from collections import Counter

import numpy as np
import pytest

from pmt.evaluation import (
    MetricsReport, aggregate_errors, eval_fbm_next_location, eval_generation, eval_imputation,
    eval_next_location, fbm_fit, fbm_predict, generate, is_daytime, ngram_precision, ngram_set,
    remove_observations, top_regions, write_reports,
)
from pmt.nn import ModelConfig, PMTModel
from pmt.trajectory import MISSING, TrajectorySequence

T0 = 1_578_268_800
M = MISSING


class CopyLast:
    """Predicts the current input region with certainty; uniform after MISSING or MASK."""

    def __init__(self, V):
        self.n_regions = V

    def logits(self, tokens, windows, causal=True):
        tokens = np.asarray(tokens)
        out = np.zeros(tokens.shape + (self.n_regions,))
        real = tokens < self.n_regions
        idx = np.nonzero(real)
        out[idx + (tokens[real],)] = 10.0
        return out


# -- n-gram precision --------------------------------------------------------------

def test_worked_example_ngram_sets():
    a, b, c = 0, 1, 2
    ref = [a, b, M, b, c, c, c]
    assert Counter(ngram_set(ref, 2)) == Counter([(a, b), (b, c), (c, c), (c, c)])
    assert Counter(ngram_set(ref, 3)) == Counter([(b, c, c), (c, c, c)])


def _brute_precision(gen, ref, n):
    def grams(s):
        out = []
        for i in range(len(s) - n + 1):
            g = tuple(s[i:i + n])
            if all(x != M for x in g):
                out.append(g)
        return out
    rg, gg = grams(ref), grams(gen)
    if not rg:
        return None
    num = 0
    for s in set(rg):
        num += min(sum(1 for g in gg if g == s), sum(1 for r in rg if r == s))
    return num / len(rg)


def test_ngram_precision_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        T = int(rng.integers(1, 13))
        V = int(rng.integers(1, 6))
        gen = rng.integers(0, V, T)
        ref = rng.integers(0, V, T)
        gen[rng.random(T) < 0.2] = M
        ref[rng.random(T) < 0.2] = M
        for n in (1, 2, 3):
            assert ngram_precision(gen, ref, n) == _brute_precision(list(gen), list(ref), n)


def test_ngram_precision_edge_cases():
    assert ngram_precision([0, 1, 2], [0, 1, 2], 2) == 1.0
    assert ngram_precision([0, 1, 2], [M, 1, M], 2) is None
    assert ngram_precision([1, 1, 1], [1, 1, 2], 2) == 0.5  # clipped at the reference count
    with pytest.raises(ValueError):
        ngram_precision([0], [0, 1], 1)


# -- aggregation -------------------------------------------------------------------

def test_aggregate_single_window_case():
    res = aggregate_errors([[0], [0], [0], [1]], [[0], [0], [1], [1]], [10, 5])
    assert res["rmse"] == pytest.approx(1.0)
    assert res["mape"] == pytest.approx(0.5)  # top region is 0: |3 - 2| / 2


def test_aggregate_respects_unknown_reference():
    gen = [[0, 1], [1, 1]]
    ref = [[0, M], [2, 1]]
    res = aggregate_errors(gen, ref, [1, 3, 2])
    assert res["rmse"] == pytest.approx(np.sqrt(2 / 6))
    assert res["mape"] == pytest.approx(0.0)
    np.testing.assert_array_equal(res["gen_totals"], [2, 1])


def test_aggregate_population_tie_break():
    res = aggregate_errors([[1], [1], [0]], [[0], [0], [0]], [5, 5, 1, 1])
    assert res["rmse"] == pytest.approx(np.sqrt(2))
    assert res["mape"] == pytest.approx(2 / 3)
    np.testing.assert_array_equal(top_regions([5, 5, 1, 1]), [0])
    np.testing.assert_array_equal(top_regions([1, 2, 3, 4, 5]), [3, 4])


def test_aggregate_totals_always_agree():
    rng = np.random.default_rng(1)
    for _ in range(200):
        U, T, V = rng.integers(1, 6), rng.integers(1, 8), rng.integers(1, 6)
        ref = rng.integers(0, V, (U, T))
        ref[rng.random((U, T)) < 0.3] = M
        gen = rng.integers(0, V, (U, T))
        res = aggregate_errors(gen, ref, rng.random(V))
        np.testing.assert_array_equal(res["gen_totals"], res["ref_totals"])
    same = aggregate_errors(ref, ref, np.ones(V))
    assert same["rmse"] == 0 and same["mape"] in (0.0, None)


# -- next location ------------------------------------------------------------------

def test_copy_last_predictor_scores_match_direct_count():
    rng = np.random.default_rng(2)
    seqs = []
    for i in range(5):
        tok = rng.integers(0, 4, 60)
        tok[rng.random(60) < 0.3] = M
        seqs.append(TrajectorySequence(f"u{i}", T0, tok))
    for ctx in (None, 7):
        rep = {r.stratum: r for r in eval_next_location(CopyLast(4), seqs, context_length=ctx)}
        hits = n = 0
        for s in seqs:
            for t in range(1, 60):
                if s.tokens[t] == M:
                    continue
                n += 1
                hits += s.tokens[t - 1] == s.tokens[t]
        assert rep["all-day"].metrics["n"] == n
        assert rep["all-day"].metrics["acc@1"] == pytest.approx(hits / n)
        assert rep["all-day"].metrics["acc@3"] == pytest.approx(hits / n)  # uniform: ties lose


def test_daytime_window():
    slots = np.arange(48)
    day = is_daytime(slots)
    assert day.sum() == 24 and day[15] and not day[14] and day[38] and not day[39]
    assert is_daytime(np.array([0]), phase_offset=20)[0]


def test_fbm_orders_by_own_stratum_then_other_then_global():
    day = np.full(48, M)
    day[20:23] = [2, 2, 1]
    day[1] = 3
    s = TrajectorySequence("a", T0, day)
    other = TrajectorySequence("b", T0, np.full(48, 0))
    fbm = fbm_fit([s, other], 5)
    assert fbm_predict(fbm, "a", 21, k=4) == [2, 1, 3, 0]
    assert fbm_predict(fbm, "a", 2, k=3) == [3, 2, 1]
    order, fallback = fbm.ranking("zz", 21)
    assert fallback and order[0] == 0


def test_fbm_report_counts_the_same_targets():
    seqs = [TrajectorySequence("a", T0, [0, M, 1, 1, 2]), TrajectorySequence("b", T0, [3, 3, 3, M, 3])]
    fbm = fbm_fit(seqs, 4)
    rep = {r.stratum: r for r in eval_fbm_next_location(fbm, seqs)}
    ours = {r.stratum: r for r in eval_next_location(CopyLast(4), seqs)}
    assert rep["all-day"].metrics["n"] == ours["all-day"].metrics["n"] == 6


def test_report_validation_and_files(tmp_path):
    with pytest.raises(ValueError):
        MetricsReport("t", "m", "s", {"acc@1": 0.5, "acc@3": 0.4})
    with pytest.raises(ValueError):
        MetricsReport("t", "m", "s", {"acc@1": 1.5})
    r = MetricsReport("t", "m", "s", {"acc@1": 0.25, "acc@3": 0.5, "n": 4})
    text = write_reports([r], tmp_path / "r.csv", tmp_path / "r.json")
    assert text.splitlines()[0] == "model,task,stratum,metric,value"
    assert json.loads((tmp_path / "r.json").read_text())[0]["metrics"]["n"] == 4


# -- imputation ----------------------------------------------------------------------

def test_removal_is_exact_fraction_of_observed():
    tok = np.array([[0, M, 1, 2, 3, M, 1, 1, 2, 0], [M] * 9 + [1]])
    rm = remove_observations(tok, 0.5, np.random.default_rng(0))
    assert rm[0].sum() == 4
    assert rm[1].sum() == 0  # round(0.5) is 0 under round-half-even
    assert not np.any(rm & (tok == M))


def test_imputation_scores_only_removed_real_positions():
    seqs = [TrajectorySequence(f"u{i}", T0, np.r_[np.full(20, 1), np.full(10, M)]) for i in range(3)]
    reps = eval_imputation(CopyLast(3), seqs, (0.5, 0.9), seed=0)
    for r, ratio in zip(reps, (0.5, 0.9)):
        assert r.metrics["n"] == 3 * round(ratio * 20)
        assert r.metrics["majority_base_rate"] == 1.0
        assert r.metrics["acc@1"] == 0.0  # the copy predictor sees MASK, not the answer


# -- generation -----------------------------------------------------------------------

def test_generate_greedy_shapes_and_determinism():
    m = PMTModel(ModelConfig(D=8, H=8, L=1, A=2, V_out=5), seed=0)
    hist = np.array([[0, 1, M, 2], [3, 3, 3, 3]])
    win = np.tile(np.arange(4), (2, 1))
    a = generate(m, hist, win, 16)
    assert a.shape == (2, 16) and a.min() >= 0 and a.max() < 5
    assert np.array_equal(a, generate(m, hist, win, 16))
    assert generate(m, hist[0], win[0], 0).shape == (0,)
    assert np.array_equal(generate(m, hist, win, 5, context_length=2),
                          generate(m, hist[:, -2:], win[:, -2:], 5, context_length=2))


def test_copy_generation_on_constant_days_is_perfect():
    T = 48 * 2
    seqs = [TrajectorySequence(f"u{i}", T0, np.full(T, i % 3)) for i in range(4)]
    reps = eval_generation(CopyLast(3), seqs, [3, 2, 1], horizons=(16,))
    (r,) = reps
    assert r.metrics["2-gram"] == 1.0 and r.metrics["rmse"] == 0.0 and r.metrics["mape"] == 0.0
    assert r.metadata["n_starts"] == 2
