"""Preference pairs from rejection sampling over k policy samples per prompt.

Every ordered pair ``(j, l)`` of a prompt's scored responses is accepted when
``sigmoid((r_j - r_l) / tau) > eta``; ``j`` becomes the chosen response. The
competing single-pair selection rules (best-vs-worst, best-vs-random, best
only) and sample-size controlled subsampling live here too.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .reward import PreferenceTriple, RewardModelParams, score_many, sigmoid
from .rng import RngStream
from .toylm import GenerationConfig, TokenSeq, ToyLMParams, sample_many

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoredResponse:
    response: TokenSeq
    reward: float

    def __post_init__(self):
        if not math.isfinite(self.reward):
            raise ValueError(f"non-finite reward {self.reward}")


@dataclass(frozen=True)
class CandidateSet:
    prompt: TokenSeq
    scored: tuple[ScoredResponse, ...]
    prompt_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scored", tuple(self.scored))
        if len(self.scored) < 2:
            raise ValueError("a candidate set needs at least two responses")

    @classmethod
    def from_lists(cls, prompt, responses, rewards, prompt_id: int = 0) -> "CandidateSet":
        scored = [ScoredResponse(tuple(y), float(r)) for y, r in zip(responses, rewards, strict=True)]
        return cls(tuple(prompt), tuple(scored), prompt_id)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([s.reward for s in self.scored])

    @property
    def responses(self) -> list[TokenSeq]:
        return [s.response for s in self.scored]


@dataclass(frozen=True)
class PDGRSConfig:
    temperature: float = 1.0
    threshold: float = 0.85

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not 0 < self.threshold < 1:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.threshold <= 0.5:
            log.warning(
                "threshold %.3f <= 0.5: both orderings of a pair can be accepted", self.threshold
            )


def _sigma(x: float) -> float:
    # scalar libm evaluation so gap values are reproducible bit for bit
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def reward_gap_sigma(r_hi: float, r_lo: float, tau: float) -> float:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return _sigma((float(r_hi) - float(r_lo)) / tau)


def _accepted(cands: CandidateSet, cfg: PDGRSConfig):
    """(j, l, gap) for every accepted ordered pair, lexicographic in (j, l)."""
    r = [s.reward for s in cands.scored]
    for j, rj in enumerate(r):
        for l, rl in enumerate(r):
            if j == l:
                continue
            g = reward_gap_sigma(rj, rl, cfg.temperature)
            if g > cfg.threshold:
                yield j, l, g


def pdgrs_pairs(cands: CandidateSet, cfg: PDGRSConfig) -> list[PreferenceTriple]:
    out = []
    for j, l, g in _accepted(cands, cfg):
        y_w, y_l = cands.scored[j].response, cands.scored[l].response
        if y_w == y_l:
            continue  # only reachable for threshold < 0.5
        out.append(PreferenceTriple(cands.prompt, y_l, y_w, g))
    return out


def pair_counts(cands_list: Sequence[CandidateSet], cfg: PDGRSConfig) -> int:
    """Number of triples ``pdgrs_pairs`` would emit over all candidate sets."""
    return sum(len(pdgrs_pairs(c, cfg)) for c in cands_list)


def generate_candidates(
    sft: ToyLMParams,
    rm: RewardModelParams,
    prompts: Sequence[TokenSeq],
    gen: GenerationConfig,
    seed: int,
    prompt_ids: Sequence[int] | None = None,
    workers: int = 1,
) -> list[CandidateSet]:
    """Sample k responses per prompt and score each with the reward model."""
    if not prompts:
        raise ValueError("no prompts")
    if prompt_ids is None:
        prompt_ids = list(range(len(prompts)))
    samples = sample_many(sft, prompts, gen, seed, "generate", prompt_ids, workers)
    out = []
    for pid, prompt, ys in zip(prompt_ids, prompts, samples):
        try:
            rewards = score_many(rm, prompt, ys)
        except ValueError as exc:
            raise ValueError(f"prompt {pid}: {exc}") from exc
        out.append(CandidateSet.from_lists(prompt, ys, rewards, pid))
    return out


def rescore(cands_list: Sequence[CandidateSet], rm: RewardModelParams) -> list[CandidateSet]:
    """Same responses, rewards from another reward model."""
    return [
        CandidateSet.from_lists(c.prompt, c.responses, score_many(rm, c.prompt, c.responses), c.prompt_id)
        for c in cands_list
    ]


def run_pdgrs(
    sft: ToyLMParams,
    rm: RewardModelParams,
    prompts: Sequence[TokenSeq],
    gen: GenerationConfig,
    cfg: PDGRSConfig,
    seed: int,
    workers: int = 1,
) -> tuple[list[PreferenceTriple], list[CandidateSet]]:
    """Generate, score and pair. Returns the dataset and the scored candidates."""
    cands = generate_candidates(sft, rm, prompts, gen, seed, workers=workers)
    data = [t for c in cands for t in pdgrs_pairs(c, cfg)]
    return data, cands


# --- competing selection policies ----------------------------------------------


def _best_worst(r: np.ndarray) -> tuple[int, int]:
    # argmax/argmin return the first index on ties
    return int(np.argmax(r)), int(np.argmin(r))


def select_best_vs_worst(cands: CandidateSet) -> PreferenceTriple | None:
    """Highest-reward response as chosen, lowest as rejected; None when they coincide."""
    best, worst = _best_worst(cands.rewards)
    y_w, y_l = cands.scored[best].response, cands.scored[worst].response
    if best == worst or y_w == y_l:
        return None
    return PreferenceTriple(cands.prompt, y_l, y_w)


def select_best_vs_random(cands: CandidateSet, rng: RngStream) -> PreferenceTriple | None:
    """Highest-reward response as chosen, rejected drawn uniformly from the other k-1."""
    k = len(cands.scored)
    best = int(np.argmax(cands.rewards))
    pick = int(rng.generator().integers(k - 1))
    other = pick if pick < best else pick + 1
    y_w, y_l = cands.scored[best].response, cands.scored[other].response
    if y_w == y_l:
        return None
    return PreferenceTriple(cands.prompt, y_l, y_w)


def select_rs_best(cands: CandidateSet) -> tuple[TokenSeq, TokenSeq]:
    """(prompt, best response) record for rejection-sampling fine-tuning."""
    return cands.prompt, cands.scored[int(np.argmax(cands.rewards))].response


@dataclass
class SelectionStats:
    prompts: int = 0
    emitted: int = 0
    skipped: int = 0


def select_dataset(
    cands_list: Sequence[CandidateSet], policy: str, seed: int = 0
) -> tuple[list, SelectionStats]:
    """Apply a single-pair policy to every prompt.

    ``policy`` is ``best-vs-worst``, ``best-vs-random`` or
    ``rejection-sampling``; the last returns SFT records.
    """
    stats = SelectionStats(prompts=len(cands_list))
    out = []
    for c in cands_list:
        if policy == "best-vs-worst":
            item = select_best_vs_worst(c)
        elif policy == "best-vs-random":
            item = select_best_vs_random(c, RngStream.for_prompt(seed, "best-vs-random", c.prompt_id))
        elif policy == "rejection-sampling":
            item = select_rs_best(c)
        else:
            raise ValueError(f"unknown selection policy {policy!r}")
        if item is None:
            stats.skipped += 1
        else:
            out.append(item)
    stats.emitted = len(out)
    return out, stats


def subsample(dataset: Sequence, n: int, rng: RngStream) -> list:
    """Uniform sample of ``n`` rows without replacement, in original order."""
    if not 0 <= n <= len(dataset):
        raise ValueError(f"cannot subsample {n} rows from {len(dataset)}")
    idx = np.sort(rng.generator().choice(len(dataset), size=n, replace=False))
    return [dataset[i] for i in idx]


@dataclass(frozen=True)
class GapHistogram:
    edges: np.ndarray
    counts: np.ndarray
    mean: float
    std: float
    threshold: float
    n_pairs: int
    n_above: int

    @property
    def frac_above(self) -> float:
        """Share of unordered pairs whose winning-side gap clears the threshold."""
        return self.n_above / self.n_pairs if self.n_pairs else 0.0


def reward_gap_histogram(
    cands_list: Sequence[CandidateSet], cfg: PDGRSConfig, n_bins: int = 20
) -> GapHistogram:
    """Winning-orientation gaps ``sigmoid(|r_j - r_l| / tau)`` over unordered pairs, binned on [0.5, 1]."""
    gaps = []
    for c in cands_list:
        r = c.rewards
        j, l = np.triu_indices(len(r), 1)
        gaps.append(sigmoid(np.abs(r[j] - r[l]) / cfg.temperature))
    if not gaps:
        raise ValueError("no candidate sets")
    g = np.concatenate(gaps)
    counts, edges = np.histogram(g, bins=n_bins, range=(0.5, 1.0))
    return GapHistogram(
        edges, counts, float(g.mean()), float(g.std()), cfg.threshold, int(g.size), int(np.count_nonzero(g > cfg.threshold))
    )
