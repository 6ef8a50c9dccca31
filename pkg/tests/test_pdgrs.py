import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_pdgrs, stable_sigmoid
from rsdpo.pdgrs import (
    CandidateSet,
    PDGRSConfig,
    ScoredResponse,
    generate_candidates,
    pair_counts,
    pdgrs_pairs,
    reward_gap_histogram,
    reward_gap_sigma,
    select_best_vs_random,
    select_best_vs_worst,
    select_dataset,
    select_rs_best,
    subsample,
)
from rsdpo.reward import RewardModelParams
from rsdpo.rng import RngStream
from rsdpo.toylm import BOS, EOS, SEP, GenerationConfig, ToyLMParams

X = (BOS, 5, SEP)


def cands(rewards, responses=None, prompt=X):
    if responses is None:
        responses = [(4 + i % 20, 4 + i // 20, EOS) for i in range(len(rewards))]
    return CandidateSet.from_lists(prompt, responses, rewards)


reward_lists = st.lists(st.floats(-5, 5, allow_nan=False), min_size=2, max_size=8)


# --- gap and config ----------------------------------------------------------------


def test_gap_examples():
    assert reward_gap_sigma(1.7, 1.7, 0.3) == 0.5
    assert reward_gap_sigma(2.0, 0.0, 1.0) == pytest.approx(0.880797, abs=1e-6)
    assert reward_gap_sigma(2.0, 0.0, 2.0) == pytest.approx(0.731059, abs=1e-6)
    assert reward_gap_sigma(2.0, 0.0, 2.0) == reward_gap_sigma(1.0, 0.0, 1.0)


def test_gap_rejects_bad_temperature():
    with pytest.raises(ValueError):
        reward_gap_sigma(1.0, 0.0, 0.0)


def test_config_validation_and_warning(caplog):
    for kw in ({"temperature": 0}, {"threshold": 0.0}, {"threshold": 1.0}):
        with pytest.raises(ValueError):
            PDGRSConfig(**kw)
    with caplog.at_level("WARNING"):
        PDGRSConfig(threshold=0.4)
    assert "0.5" in caplog.text


def test_candidate_set_checks():
    with pytest.raises(ValueError):
        cands([1.0])
    with pytest.raises(ValueError):
        ScoredResponse((4, EOS), math.nan)


# --- pair enumeration --------------------------------------------------------------


def test_worked_example():
    c = cands([2.0, 0.5, -1.0])
    out = pdgrs_pairs(c, PDGRSConfig(1.0, 0.85))
    assert len(out) == 1
    t = out[0]
    assert t.chosen == c.responses[0] and t.rejected == c.responses[2]
    assert t.gap_sigma == pytest.approx(0.952574, abs=1e-6)


def test_equal_rewards_give_nothing():
    assert pdgrs_pairs(cands([0.3] * 6), PDGRSConfig(1.0, 0.51)) == []


@settings(max_examples=1000)
@given(reward_lists, st.floats(0.2, 3.0), st.floats(0.05, 0.95), st.integers(0, 3))
def test_matches_brute_force(rewards, tau, eta, n_dup):
    responses = [(4 + i, EOS) for i in range(len(rewards))]
    for i in range(min(n_dup, len(rewards) - 1)):
        responses[i + 1] = responses[0]
    c = cands(rewards, responses)
    got = [(t.chosen, t.rejected, t.gap_sigma) for t in pdgrs_pairs(c, PDGRSConfig(tau, eta))]
    want = [(responses[j], responses[l], g) for j, l, g in brute_pdgrs(rewards, responses, tau, eta)]
    assert got == want


@given(reward_lists, st.floats(0.2, 3.0), st.floats(0.51, 0.95))
def test_invariants_above_half(rewards, tau, eta):
    c = cands(rewards)
    out = pdgrs_pairs(c, PDGRSConfig(tau, eta))
    k = len(rewards)
    assert len(out) <= k * (k - 1) // 2
    by_resp = dict(zip(c.responses, rewards))
    seen = set()
    for t in out:
        rw, rl = by_resp[t.chosen], by_resp[t.rejected]
        assert rw > rl
        assert stable_sigmoid((rw - rl) / tau) > eta
        key = frozenset((t.chosen, t.rejected))
        assert key not in seen
        seen.add(key)


def test_both_orderings_below_half():
    c = cands([0.0, 0.1])
    out = pdgrs_pairs(c, PDGRSConfig(1.0, 0.45))
    assert len(out) == 2


@given(reward_lists, st.floats(0.2, 3.0))
def test_threshold_nesting(rewards, tau):
    c = cands(rewards)
    key = lambda ts: {(t.chosen, t.rejected) for t in ts}  # noqa: E731
    low, mid, high = (key(pdgrs_pairs(c, PDGRSConfig(tau, e))) for e in (0.80, 0.85, 0.90))
    assert high <= mid <= low


@given(reward_lists, st.floats(0.51, 0.95), st.floats(0.2, 2.0), st.floats(0.01, 2.0))
def test_count_non_increasing_in_temperature(rewards, eta, tau, dt):
    c = cands(rewards)
    assert len(pdgrs_pairs(c, PDGRSConfig(tau + dt, eta))) <= len(pdgrs_pairs(c, PDGRSConfig(tau, eta)))


@given(reward_lists, st.floats(0.2, 3.0), st.floats(0.05, 0.95), st.integers(-4, 4))
def test_scale_equivalence(rewards, tau, eta, e):
    # powers of two scale exactly, so the output must match bit for bit
    s = 2.0**e
    a = pdgrs_pairs(cands(rewards), PDGRSConfig(tau, eta))
    b = pdgrs_pairs(cands([r * s for r in rewards]), PDGRSConfig(tau * s, eta))
    assert a == b


def test_scale_equivalence_general_constant():
    g = np.random.default_rng(3)
    for _ in range(200):
        r = g.normal(size=6)
        c = float(g.uniform(0.1, 10))
        a = pdgrs_pairs(cands(r), PDGRSConfig(1.0, 0.8))
        b = pdgrs_pairs(cands(r * c), PDGRSConfig(c, 0.8))
        assert [(t.chosen, t.rejected) for t in a] == [(t.chosen, t.rejected) for t in b]
        assert np.allclose([t.gap_sigma for t in a], [t.gap_sigma for t in b], atol=1e-12)


def test_duplicate_pair_yields_nothing():
    c = cands([0.7, 0.7], [(4, EOS), (4, EOS)])
    assert pdgrs_pairs(c, PDGRSConfig(1.0, 0.85)) == []
    assert pdgrs_pairs(c, PDGRSConfig(1.0, 0.3)) == []


def test_pair_counts_sum():
    cs = [cands([2.0, 0.5, -1.0]), cands([0.0, 3.0, 3.0, -2.0])]
    cfg = PDGRSConfig(1.0, 0.85)
    assert pair_counts(cs, cfg) == sum(len(pdgrs_pairs(c, cfg)) for c in cs)


# --- generation -----------------------------------------------------------------------


def test_generation_deterministic_and_scored(rng):
    lm = ToyLMParams.random(8, 2, rng)
    rm = RewardModelParams.random(8, 2, rng)
    prompts = [(BOS, 4 + i % 4, SEP) for i in range(5)]
    gen = GenerationConfig(k=4, max_new_tokens=6)
    a = generate_candidates(lm, rm, prompts, gen, 3)
    b = generate_candidates(lm, rm, prompts, gen, 3)
    assert a == b
    assert [c.prompt_id for c in a] == list(range(5))
    assert all(len(c.scored) == 4 for c in a)
    with pytest.raises(ValueError):
        generate_candidates(lm, rm, [], gen, 3)


# --- competing policies --------------------------------------------------------------


def test_best_vs_worst_example_and_ties():
    c = cands([2.0, 0.5, -1.0])
    t = select_best_vs_worst(c)
    assert (t.chosen, t.rejected) == (c.responses[0], c.responses[2])
    tie = cands([1.0, 1.0, 0.0, 0.0])
    t = select_best_vs_worst(tie)
    assert (t.chosen, t.rejected) == (tie.responses[0], tie.responses[2])


def test_best_vs_worst_skips_identical():
    c = cands([0.5, 0.5], [(4, EOS), (4, EOS)])
    assert select_best_vs_worst(c) is None
    data, stats = select_dataset([c, cands([1.0, 0.0])], "best-vs-worst")
    assert (stats.prompts, stats.emitted, stats.skipped) == (2, 1, 1) and len(data) == 1


@given(st.lists(st.integers(-5000, 5000).map(lambda v: v / 1000), min_size=2, max_size=8), st.floats(0.01, 100))
def test_best_vs_worst_scale_invariant(rewards, s):
    assert select_best_vs_worst(cands(rewards)) == select_best_vs_worst(cands([r * s for r in rewards]))


@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=2, max_size=2, unique=True), st.floats(0.2, 3), st.floats(0.51, 0.95))
def test_k2_best_vs_worst_equals_passing_pdgrs_pair(rewards, tau, eta):
    c = cands(rewards)
    out = pdgrs_pairs(c, PDGRSConfig(tau, eta))
    if out:
        t = select_best_vs_worst(c)
        assert (t.chosen, t.rejected) == (out[0].chosen, out[0].rejected)


def test_best_vs_random_k2_forced():
    c = cands([0.0, 1.0])
    for i in range(20):
        assert select_best_vs_random(c, RngStream(i)).rejected == c.responses[0]


def test_best_vs_random_uniform_over_others():
    c = cands([0.3, -1.0, 2.0, 0.1, 0.5])
    n, k = 10_000, 5
    picks = [c.responses.index(select_best_vs_random(c, RngStream(0, "bvr").child(i)).rejected) for i in range(n)]
    freq = np.bincount(picks, minlength=k) / n
    assert freq[2] == 0.0
    se = math.sqrt((1 / (k - 1)) * (1 - 1 / (k - 1)) / n)
    others = np.delete(freq, 2)
    assert np.all(np.abs(others - 1 / (k - 1)) <= 3 * se)


def test_best_vs_random_can_reject_above_median():
    c = cands([3.0, 2.9, -1.0, -2.0, -3.0])
    rejected = {select_best_vs_random(c, RngStream(0).child(i)).rejected for i in range(50)}
    assert c.responses[1] in rejected


def test_best_vs_random_deterministic():
    c = cands([0.3, -1.0, 2.0, 0.1])
    assert select_best_vs_random(c, RngStream(4, "x")) == select_best_vs_random(c, RngStream(4, "x"))


def test_rs_best():
    c = cands([0.1, 0.9])
    assert select_rs_best(c) == (X, c.responses[1])
    assert select_rs_best(cands([0.1 * 7, 0.9 * 7])) == select_rs_best(c)
    data, stats = select_dataset([c] * 7, "rejection-sampling")
    assert len(data) == 7 == stats.prompts
    with pytest.raises(ValueError):
        select_dataset([c], "tournament")


# --- subsampling -----------------------------------------------------------------------


def test_subsample_edges():
    data = list(range(10))
    assert sorted(subsample(data, 10, RngStream(0))) == data
    assert subsample(data, 0, RngStream(0)) == []
    with pytest.raises(ValueError):
        subsample(data, 11, RngStream(0))
    assert subsample(data, 4, RngStream(5)) == subsample(data, 4, RngStream(5))


def test_subsample_uniform_chi_square():
    n_items, draws, size = 10, 10_000, 3
    counts = np.zeros(n_items)
    for i in range(draws):
        for v in subsample(list(range(n_items)), size, RngStream(1, "sub").child(i)):
            counts[v] += 1
    expected = draws * size / n_items
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    # 9 degrees of freedom; 27.88 is the 0.999 quantile
    assert chi2 < 27.88


# --- gap histogram ----------------------------------------------------------------------


def test_histogram_all_equal_rewards():
    h = reward_gap_histogram([cands([0.2] * 5)], PDGRSConfig(1.0, 0.85), n_bins=10)
    assert h.counts[0] == 10 and h.counts[1:].sum() == 0
    assert h.mean == 0.5 and h.std == 0.0 and h.frac_above == 0.0


def test_histogram_totals_and_threshold_share():
    g = np.random.default_rng(0)
    cs = [cands(g.normal(size=6)) for _ in range(30)]
    cfg = PDGRSConfig(1.0, 0.85)
    h = reward_gap_histogram(cs, cfg)
    assert h.counts.sum() == h.n_pairs == 30 * 15
    assert h.n_above == pair_counts(cs, cfg)
    assert h.edges[0] == 0.5 and h.edges[-1] == 1.0
