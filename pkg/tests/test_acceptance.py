"""One test per acceptance criterion; a summary line per criterion is printed at the end of the run."""

import math
import time

import numpy as np
import pytest

from conftest import random_prompt, random_response, random_triple
from oracles import brute_pdgrs, central_difference, filter_probs, lm_logits, max_rel_error
from rsdpo import experiment as ex
from rsdpo import io
from rsdpo.dpo import DPOConfig, dpo_grad, dpo_loss, implicit_reward, reward_accuracy_and_margin, train_dpo
from rsdpo.optim import ScheduleSpec, sft_loss, sft_loss_and_grad
from rsdpo.pdgrs import CandidateSet, PDGRSConfig, pair_counts, pdgrs_pairs
from rsdpo.reward import PreferenceTriple, RewardModelParams, bt_probability, rm_loss_and_grad
from rsdpo.rng import RngStream
from rsdpo.toylm import BOS, EOS, PAD, SEP, GenerationConfig, ToyLMParams, filter_logits, logits, sample_response

criterion = pytest.mark.criterion


# --- 1 --------------------------------------------------------------------------------


@criterion(1, "analytic SFT/RM/DPO gradients match central differences, rel err < 1e-4, 100 instances each, < 30 s")
def test_gradient_suite():
    g = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = {"sft": 0.0, "rm": 0.0, "dpo": 0.0}
    for _ in range(100):
        lm = ToyLMParams.random(8, 2, g, scale=0.5)
        data = [(random_prompt(g, 8, 4), random_response(g, 8, 4)) for _ in range(2)]
        _, grad = sft_loss_and_grad(lm, data)
        num = central_difference(lambda a: sft_loss(ToyLMParams(*a), data), [lm.tables.copy(), lm.bias.copy()])
        worst["sft"] = max(worst["sft"], max_rel_error(grad.arrays(), num, floor=1e-4))

        rm = RewardModelParams.random(8, 2, g, scale=0.5)
        t = random_triple(g, 8)
        _, grad = rm_loss_and_grad(rm, t)
        num = central_difference(
            lambda a: rm_loss_and_grad(RewardModelParams(a[0], float(a[1][0])), t)[0], [rm.tables.copy(), np.array([rm.bias])]
        )
        worst["rm"] = max(worst["rm"], max_rel_error(grad.arrays(), num, floor=1e-4))

        pol, ref = ToyLMParams.random(8, 2, g, scale=0.5), ToyLMParams.random(8, 2, g, scale=0.5)
        beta = float(g.uniform(0.05, 2.0))
        grad = dpo_grad(pol, ref, t, beta)
        num = central_difference(lambda a: dpo_loss(ToyLMParams(*a), ref, t, beta), [pol.tables.copy(), pol.bias.copy()])
        worst["dpo"] = max(worst["dpo"], max_rel_error(grad.arrays(), num, floor=1e-4))
    elapsed = time.perf_counter() - t0
    print(f"worst relative errors {worst}, {elapsed:.1f}s")
    assert all(v < 1e-4 for v in worst.values()), worst
    assert elapsed < 30


# --- 2 --------------------------------------------------------------------------------


@criterion(2, "pdgrs_pairs equals brute-force enumeration on 1,000 random candidate sets (k <= 8), < 10 s")
def test_pdgrs_oracle_equivalence():
    g = np.random.default_rng(7)
    t0 = time.perf_counter()
    total = 0
    for i in range(1000):
        k = int(g.integers(2, 9))
        rewards = [float(v) for v in g.normal(0, float(g.uniform(0.1, 4)), k)]
        if i % 5 == 0:
            rewards[1] = rewards[0]  # exercise exact ties
        responses = [(4 + int(v), EOS) for v in g.integers(0, 4, k)]  # duplicates happen
        tau, eta = float(g.uniform(0.2, 2.0)), float(g.uniform(0.3, 0.95))
        c = CandidateSet.from_lists((BOS, 5, SEP), responses, rewards)
        got = [(t.chosen, t.rejected, t.gap_sigma) for t in pdgrs_pairs(c, PDGRSConfig(tau, eta))]
        want = [(responses[j], responses[l], gap) for j, l, gap in brute_pdgrs(rewards, responses, tau, eta)]
        assert got == want, i
        total += len(got)
    elapsed = time.perf_counter() - t0
    print(f"{total} triples compared, {elapsed:.2f}s")
    assert total > 1000 and elapsed < 10


# --- 3 --------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def generation_artifact(tmp_path_factory):
    cfg = ex.preset("default", n_seeds=1)
    run = ex.RunDir(tmp_path_factory.mktemp("gen"), cfg, 0)
    ex.stage_synth(run)
    ex.stage_sft(run)
    ex.stage_rm(run, "rich")
    ex.stage_generate(run, "rich")
    return io.read_generations(run / "gen_rich.jsonl")


@criterion(3, "pair counts strictly decrease over eta 0.80/0.85/0.90 and non-strictly over tau 0.8..1.2 (200 prompts, k=16)")
def test_threshold_and_temperature_monotonicity(generation_artifact):
    cands = generation_artifact
    assert len(cands) == 200 and all(len(c.scored) == 16 for c in cands)
    by_eta = [pair_counts(cands, PDGRSConfig(1.0, e)) for e in (0.80, 0.85, 0.90)]
    by_tau = [pair_counts(cands, PDGRSConfig(t, 0.85)) for t in (0.8, 0.9, 1.0, 1.1, 1.2)]
    print(f"counts by eta {by_eta}; by tau {by_tau}")
    assert by_eta[0] > by_eta[1] > by_eta[2]
    assert all(a >= b for a, b in zip(by_tau, by_tau[1:]))


# --- 4 --------------------------------------------------------------------------------


@criterion(4, "DPO at policy = reference: loss ln 2 +- 1e-9, margin 0, accuracy 0.5; reference untouched; swap identity 1e-12")
def test_dpo_identities(tmp_path):
    g = np.random.default_rng(11)
    ref = ToyLMParams.random(8, 2, g)
    data = [random_triple(g, 8) for _ in range(40)]
    m = reward_accuracy_and_margin(ref, ref, data, 0.1)
    assert abs(m.loss - math.log(2)) <= 1e-9
    assert m.reward_margin == 0.0 and m.reward_accuracy == 0.5
    for t in data:
        assert abs(dpo_loss(ref, ref, t, 0.1) - math.log(2)) <= 1e-9

    path = io.save_checkpoint(tmp_path / "ref.ckpt", ref)
    before = io.sha256_file(path)
    blob = io.dumps_checkpoint(ref)
    train_dpo(ref, data, DPOConfig(beta=0.5, epochs=3, batch_size=8, schedule=ScheduleSpec("cosine", 1e-2)), RngStream(0))
    assert io.dumps_checkpoint(ref) == blob
    assert io.sha256_file(path) == before

    worst = 0.0
    for _ in range(200):
        pol = ToyLMParams.random(8, 2, g, scale=float(g.uniform(0.1, 5)))
        t = random_triple(g, 8)
        swapped = PreferenceTriple(t.prompt, t.chosen, t.rejected)
        margin = implicit_reward(pol, ref, t.prompt, t.chosen, 1.0) - implicit_reward(pol, ref, t.prompt, t.rejected, 1.0)
        worst = max(worst, abs(dpo_loss(pol, ref, swapped, 1.0) - (margin + dpo_loss(pol, ref, t, 1.0))))
    print(f"worst swap-identity residual {worst:.2e}")
    assert worst <= 1e-12


# --- 5 --------------------------------------------------------------------------------


@criterion(5, "Bradley-Terry complementarity and sigma/exponential agreement within 1e-12 for |gap| up to 500")
def test_bradley_terry_exactness():
    g = np.random.default_rng(5)
    a = g.uniform(-250, 250, 20_000)
    b = a + g.uniform(-500, 500, 20_000)
    worst_c = worst_e = 0.0
    for x, y in zip(a, b):
        p, q = bt_probability(x, y), bt_probability(y, x)
        worst_c = max(worst_c, abs(p + q - 1.0))
        m = max(x, y)
        direct = math.exp(x - m) / (math.exp(x - m) + math.exp(y - m))
        worst_e = max(worst_e, abs(p - direct))
        assert math.isfinite(p)
    print(f"complementarity {worst_c:.1e}, exponential form {worst_e:.1e}")
    assert worst_c <= 1e-12 and worst_e <= 1e-12


# --- 6 --------------------------------------------------------------------------------


@criterion(6, "filtered distributions sum to 1 +- 1e-12 within top_k; top_k=1 is greedy; first-token frequencies within 3 SE")
def test_decoding_contracts():
    g = np.random.default_rng(6)
    for _ in range(2000):
        n = int(g.integers(2, 40))
        raw = g.normal(0, float(g.uniform(0.1, 10)), n)
        temp, top_k, top_p = float(g.uniform(0.2, 3)), int(g.integers(1, 60)), float(g.uniform(0.05, 1.0))
        p = filter_logits(raw, temp, top_k, top_p)
        assert abs(p.sum() - 1.0) <= 1e-12
        assert np.count_nonzero(p) <= top_k
        assert np.allclose(p, filter_probs(list(raw), temp, top_k, top_p), atol=1e-12)

    greedy_cfg = GenerationConfig(k=2, max_new_tokens=10, top_k=1, top_p=1.0)
    for s in range(50):
        lm = ToyLMParams.random(8, 2, g)
        x = random_prompt(g, 8)
        hist, want = list(x), []
        for _ in range(10):
            z = np.array(lm_logits(lm.tables, lm.bias, hist))
            z[[PAD, BOS, SEP]] = -np.inf
            nxt = int(np.argmax(z))
            want.append(nxt)
            hist.append(nxt)
            if nxt == EOS:
                break
        assert sample_response(lm, x, greedy_cfg, RngStream(s)) == tuple(want)

    lm = ToyLMParams.random(8, 2, g)
    x = (BOS, 4, 6, SEP)
    cfg = GenerationConfig(k=2, max_new_tokens=1, top_k=4, top_p=0.95)
    expected = filter_logits(logits(lm, list(x[-2:])), 1.0, 4, 0.95, banned=(PAD, BOS, SEP))
    n = 10_000
    counts = np.bincount([sample_response(lm, x, cfg, RngStream(1, "freq").child(i))[0] for i in range(n)], minlength=8)
    se = np.sqrt(expected * (1 - expected) / n)
    print(f"expected {np.round(expected, 4)}, observed {np.round(counts / n, 4)}")
    assert np.all(np.abs(counts / n - expected) <= 3 * se)


# --- 7 to 10: five-seed desk pipeline ------------------------------------------------------


@pytest.fixture(scope="module")
def five_seed(tmp_path_factory):
    cfg = ex.preset(
        "default",
        policies=["proposed", "best-vs-worst", "original-annotation"],
        rm_variants=["rich", "narrow"],
        etas=[0.85, 0.90],
        size_controlled=[False, True],
    )
    assert cfg.n_seeds == 5 and cfg.generation.k == 16 and (cfg.sizes.n_sft, cfg.sizes.n_pref) == (500, 200)
    root = tmp_path_factory.mktemp("five_seed")
    t0 = time.perf_counter()
    table, per_seed = ex.run_experiment(cfg, root)
    elapsed = time.perf_counter() - t0
    return {"cfg": cfg, "root": root, "table": table, "per_seed": per_seed, "seconds": elapsed}


def _cell(rows, policy, variant="rich", eta=None, sub=False):
    if policy != "proposed":
        eta, variant = None, (variant if policy != "original-annotation" else "none")
    else:
        eta = eta or 0.85
    out = [r for r in rows if r["policy"] == policy and r["rm_variant"] == variant and r["eta"] == eta and r["subsampled"] == sub]
    assert out, (policy, variant, eta, sub)
    return out


@criterion(7, "5-seed mean win rate: proposed >= best-vs-worst >= original > 0.5; proposed - original >= 0.05 in >= 4 seeds; < 10 min")
def test_end_to_end_ordering(five_seed):
    per = five_seed["per_seed"]
    prop = {r["seed"]: r["win_rate"] for r in _cell(per, "proposed")}
    bvw = {r["seed"]: r["win_rate"] for r in _cell(per, "best-vs-worst")}
    orig = {r["seed"]: r["win_rate"] for r in _cell(per, "original-annotation")}
    mp, mb, mo = (float(np.mean(list(d.values()))) for d in (prop, bvw, orig))
    gaps = [prop[s] - orig[s] for s in sorted(prop)]
    print(f"means proposed {mp:.4f}, best-vs-worst {mb:.4f}, original {mo:.4f}; per-seed gaps {np.round(gaps, 4)}")
    print(f"five-seed pipeline wall-clock {five_seed['seconds']:.1f}s")
    assert len(prop) == len(bvw) == len(orig) == 5
    assert mp >= mb >= mo > 0.5
    assert sum(gap >= 0.05 for gap in gaps) >= 4
    assert five_seed["seconds"] < 600


@criterion(8, "narrow RM: proposed win-rate degradation smaller than best-vs-worst's, over 5 seeds")
def test_rm_quality_robustness(five_seed):
    per = five_seed["per_seed"]

    def mean(policy, variant):
        return float(np.mean([r["win_rate"] for r in _cell(per, policy, variant)]))

    d_prop = mean("proposed", "rich") - mean("proposed", "narrow")
    d_bvw = mean("best-vs-worst", "rich") - mean("best-vs-worst", "narrow")
    print(f"degradation proposed {d_prop:.4f}, best-vs-worst {d_bvw:.4f}")
    assert d_prop < d_bvw


@criterion(9, "final-epoch held-out DPO reward accuracy on proposed data > 0.70 and > original-annotation's")
def test_reward_accuracy_diagnostics(five_seed):
    per = five_seed["per_seed"]
    prop = [r["dpo_reward_accuracy"] for r in _cell(per, "proposed")]
    orig = [r["dpo_reward_accuracy"] for r in _cell(per, "original-annotation")]
    print(f"held-out accuracy proposed {np.round(prop, 3)}, original {np.round(orig, 3)}")
    # the trace starts at 0.5 before any update
    trace = io.read_metrics(five_seed["root"] / "seed_0" / "metrics" / f"dpo_{ex.pdgrs_tag('rich', 0.85, 1.0)}.jsonl")
    held = [r for r in trace if r["split"] == "held_out"]
    assert held[0]["epoch"] == 0 and held[0]["reward_accuracy"] == 0.5
    assert held[-1]["reward_accuracy"] == prop[0]
    assert np.mean(prop) > 0.70 and np.mean(prop) > np.mean(orig)
    assert all(p > 0.70 for p in prop)


@criterion(10, "subsampling D_P to the prompt count moves the 5-seed mean win rate by < 2 SE at eta=0.90")
def test_sample_size_control(five_seed):
    per = five_seed["per_seed"]
    full = [r for r in _cell(per, "proposed", eta=0.90)]
    sub = [r for r in _cell(per, "proposed", eta=0.90, sub=True)]
    wf, ws = np.array([r["win_rate"] for r in full]), np.array([r["win_rate"] for r in sub])
    se = float(wf.std(ddof=1) / np.sqrt(len(wf)))
    print(
        f"full {wf.mean():.4f} (n={[r['sample_size'] for r in full]}), "
        f"subsampled {ws.mean():.4f} (n={[r['sample_size'] for r in sub]}), se {se:.4f}"
    )
    assert all(r["sample_size"] <= five_seed["cfg"].sizes.n_pref for r in sub)
    assert abs(ws.mean() - wf.mean()) < 2 * se
