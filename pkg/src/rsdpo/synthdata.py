"""Synthetic instruction-following task with an exact reward oracle.

A prompt is ``BOS x_1 .. x_L SEP`` over content tokens; the ideal response is
``perm(x_1) .. perm(x_L) EOS``. Prompts use only half of the content tokens
(the prompt alphabet) and ``perm`` maps that half onto the other, so prompt
and response tokens never share an id.

Prompt content is a walk down a successor tree over the prompt alphabet that
ends on a terminal token, followed by a restatement of the first token::

    x_1 -> successor(x_1) -> ... -> terminal, x_1

Each step follows the tree with probability ``chain_prob`` and otherwise
jumps to a uniform prompt token. The restated token sits just before SEP, so
a model with a three-token window sees it when the response starts; after
that every ideal token is predictable from the previous ones except after a
jump and at the restatement.
"""

from __future__ import annotations

import json
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from .reward import PreferenceTriple
from .rng import RngStream
from .toylm import BOS, EOS, N_SPECIAL, SEP, GenerationConfig, TokenSeq, ToyLMParams, Vocab, sample_response


@dataclass(frozen=True)
class TaskSpec:
    """``perm`` and ``successor`` are indexed by ``token - N_SPECIAL``.

    ``successor`` is only meaningful on non-terminal prompt tokens; elsewhere
    it stores the token itself. Lengths count content tokens, restatement
    included.
    """

    vocab_size: int
    perm: tuple[int, ...]
    successor: tuple[int, ...]
    prompt_tokens: tuple[int, ...]
    terminals: tuple[int, ...]
    min_len: int = 4
    max_len: int = 10
    length_penalty: float = 0.5
    chain_prob: float = 0.9

    def __post_init__(self):
        Vocab(self.vocab_size)
        content = list(range(N_SPECIAL, self.vocab_size))
        for name in ("perm", "successor", "prompt_tokens", "terminals"):
            object.__setattr__(self, name, tuple(int(t) for t in getattr(self, name)))
        if sorted(self.perm) != content:
            raise ValueError("perm must be a bijection on content tokens")
        if len(self.successor) != len(content) or not set(self.successor) <= set(content):
            raise ValueError("successor must map content tokens to content tokens")
        if not set(self.prompt_tokens) <= set(content):
            raise ValueError("prompt tokens must be content tokens")
        if not self.terminals or not set(self.terminals) < set(self.prompt_tokens):
            raise ValueError("terminals must be a non-empty proper subset of the prompt tokens")
        for t in self.body:
            if self.successor[t - N_SPECIAL] not in self.prompt_tokens:
                raise ValueError("successor must stay inside the prompt alphabet")
        if not 3 <= self.min_len <= self.max_len:
            raise ValueError("need 3 <= min_len <= max_len")
        if self.length_penalty < 0 or not 0 <= self.chain_prob <= 1:
            raise ValueError("bad length_penalty or chain_prob")

    @classmethod
    def make(cls, vocab_size: int = 32, seed: int = 0, depth: int = 5, n_terminals: int | None = None, **kw):
        """Random split, perm and successor tree ``depth`` levels above the terminals."""
        g = RngStream(seed, "task").generator()
        content = g.permutation(np.arange(N_SPECIAL, vocab_size))
        half = len(content) // 2
        prompt_side, response_side = content[:half], content[half : 2 * half]
        perm = {int(t): int(t) for t in content}
        for a, b in zip(prompt_side, g.permutation(response_side)):
            perm[int(a)], perm[int(b)] = int(b), int(a)
        n_term = n_terminals or max(1, half // 5)
        terminals, body = prompt_side[:n_term], prompt_side[n_term:]
        successor = {int(t): int(t) for t in content}
        below = terminals
        for level in np.array_split(body, min(depth, len(body))):
            for t in level:
                successor[int(t)] = int(g.choice(below))
            below = level
        return cls(
            vocab_size,
            tuple(perm[t] for t in range(N_SPECIAL, vocab_size)),
            tuple(successor[t] for t in range(N_SPECIAL, vocab_size)),
            tuple(sorted(int(t) for t in prompt_side)),
            tuple(sorted(int(t) for t in terminals)),
            **kw,
        )

    @property
    def n_content(self) -> int:
        return self.vocab_size - N_SPECIAL

    @property
    def body(self) -> tuple[int, ...]:
        term = set(self.terminals)
        return tuple(t for t in self.prompt_tokens if t not in term)

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "TaskSpec":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class AnnotatorConfig:
    """``style`` selects how annotated (not SFT) responses are written:
    ``"drift"`` (see ``drift_response``) or ``"substitute"`` (plain token
    corruption of the ideal response)."""

    flip_prob: float = 0.1
    corruption: float = 0.2
    style: str = "drift"

    def __post_init__(self):
        if not 0 <= self.flip_prob < 0.5:
            raise ValueError(f"label flip probability must be in [0, 0.5), got {self.flip_prob}")
        if not 0 <= self.corruption < 1:
            raise ValueError(f"corruption rate must be in [0, 1), got {self.corruption}")
        if self.style not in ("drift", "substitute"):
            raise ValueError(f"unknown annotator style {self.style!r}")


def prompt_content(prompt: TokenSeq) -> TokenSeq:
    return tuple(prompt[1:-1])


def sample_prompt(task: TaskSpec, g: np.random.Generator) -> TokenSeq:
    body, term, alphabet = task.body, set(task.terminals), task.prompt_tokens
    walk = [body[int(g.integers(len(body)))]]
    while True:
        if g.random() < task.chain_prob:
            nxt = task.successor[walk[-1] - N_SPECIAL]
        else:
            nxt = alphabet[int(g.integers(len(alphabet)))]
        if len(walk) + 2 < task.min_len and nxt in term:
            nxt = body[int(g.integers(len(body)))]
        if len(walk) + 2 == task.max_len and nxt not in term:
            nxt = task.terminals[int(g.integers(len(task.terminals)))]
        walk.append(nxt)
        if nxt in term:
            break
    return (BOS, *walk, walk[0], SEP)


def sample_prompts(task: TaskSpec, n: int, rng: RngStream) -> list[TokenSeq]:
    return [sample_prompt(task, rng.child(i).generator()) for i in range(n)]


def ideal_response(task: TaskSpec, prompt: TokenSeq) -> TokenSeq:
    return tuple(task.perm[t - N_SPECIAL] for t in prompt_content(prompt)) + (EOS,)


def _strip_eos(seq: TokenSeq) -> TokenSeq:
    return seq[:-1] if seq and seq[-1] == EOS else seq


def oracle_reward(task: TaskSpec, prompt: TokenSeq, response: TokenSeq) -> float:
    """Token agreement with the ideal response minus a relative length penalty, in [-1, 1].

    Agreement counts matching content positions over the longer of the two
    contents, so it reaches 1 only for an exact copy.
    """
    if not response:
        raise ValueError("response is empty")
    ideal = ideal_response(task, prompt)
    a, b = _strip_eos(tuple(response)), _strip_eos(ideal)
    hits = sum(x == y for x, y in zip(a, b))
    match = hits / max(len(a), len(b), 1)
    penalty = task.length_penalty * abs(len(response) - len(ideal)) / len(ideal)
    return float(min(1.0, max(-1.0, match - penalty)))


def corrupt(task: TaskSpec, response: TokenSeq, rate: float, g: np.random.Generator) -> TokenSeq:
    """Replace each content token, with probability ``rate``, by a different content token."""
    out = list(response)
    for i, t in enumerate(out):
        if t == EOS or g.random() >= rate:
            continue
        r = int(g.integers(task.n_content - 1))
        out[i] = N_SPECIAL + (r if r < t - N_SPECIAL else r + 1)
    return tuple(out)


def drift_response(task: TaskSpec, prompt: TokenSeq, rate: float, g: np.random.Generator, max_len: int = 24) -> TokenSeq:
    """A writer that copies the ideal response until its first error, then drifts.

    Each step errs with probability ``rate`` by emitting a different uniform
    content token. Once off track it continues the task's own dynamics from
    its last token (mapped successor with probability ``chain_prob``, else a
    uniform image of a prompt token). Later tokens are locally plausible but
    no longer aligned with the prompt; after a terminal it writes one more
    token and stops.
    """
    ideal = ideal_response(task, prompt)
    inv = {p: i + N_SPECIAL for i, p in enumerate(task.perm)}
    term = {task.perm[t - N_SPECIAL] for t in task.terminals}
    body = set(task.body)
    targets = [task.perm[t - N_SPECIAL] for t in task.prompt_tokens]
    out: list[int] = []
    on_track = True
    after_terminal = False
    while len(out) < max_len:
        pos = len(out)
        if on_track:
            nxt = ideal[pos]
            if nxt == EOS:
                break
            if g.random() < rate:
                nxt = corrupt(task, (nxt,), 1.0, g)[0]
                on_track = False
        elif after_terminal:
            out.append(targets[int(g.integers(len(targets)))])
            break
        elif inv[out[-1]] in body and g.random() < task.chain_prob:
            nxt = task.perm[task.successor[inv[out[-1]] - N_SPECIAL] - N_SPECIAL]
        else:
            nxt = targets[int(g.integers(len(targets)))]
        out.append(nxt)
        if not on_track and nxt in term:
            after_terminal = True
    return (*out, EOS)


def annotated_response(task: TaskSpec, prompt: TokenSeq, annot: AnnotatorConfig, g: np.random.Generator) -> TokenSeq:
    if annot.style == "drift":
        return drift_response(task, prompt, annot.corruption, g)
    return corrupt(task, ideal_response(task, prompt), annot.corruption, g)


def gen_sft_dataset(task: TaskSpec, n: int, annot: AnnotatorConfig, rng: RngStream) -> list[tuple[TokenSeq, TokenSeq]]:
    out = []
    for i in range(n):
        g = rng.child(i).generator()
        prompt = sample_prompt(task, g)
        out.append((prompt, corrupt(task, ideal_response(task, prompt), annot.corruption, g)))
    return out


@dataclass
class AnnotationStats:
    prompts: int = 0
    flipped: int = 0
    skipped: int = 0
    flips: list[bool] = field(default_factory=list)


def gen_preference_dataset(
    task: TaskSpec,
    n: int,
    annot: AnnotatorConfig,
    rng: RngStream,
    stats: AnnotationStats | None = None,
    max_redraws: int = 50,
) -> list[PreferenceTriple]:
    """Two independently corrupted demonstrations per prompt, labelled by the oracle.

    Responses come from ``annotated_response``. The label is then flipped with
    probability ``flip_prob``; oracle ties keep the first response as
    chosen before the flip. A second response
    identical to the first is redrawn; prompts that never yield two distinct
    responses are skipped.
    """
    stats = stats if stats is not None else AnnotationStats()
    out = []
    for i in range(n):
        g = rng.child(i).generator()
        prompt = sample_prompt(task, g)
        a = annotated_response(task, prompt, annot, g)
        b = annotated_response(task, prompt, annot, g)
        for _ in range(max_redraws):
            if b != a:
                break
            b = annotated_response(task, prompt, annot, g)
        stats.prompts += 1
        if a == b:
            stats.skipped += 1
            continue
        ra, rb = oracle_reward(task, prompt, a), oracle_reward(task, prompt, b)
        chosen, rejected = (a, b) if ra >= rb else (b, a)
        flip = bool(g.random() < annot.flip_prob)
        if flip:
            chosen, rejected = rejected, chosen
        stats.flipped += flip
        stats.flips.append(flip)
        out.append(PreferenceTriple(prompt, rejected, chosen))
    return out


# --- oracle-judged evaluation --------------------------------------------------

Responder = Callable[[TokenSeq, RngStream], TokenSeq]


def as_responder(model: ToyLMParams | Responder, gen: GenerationConfig) -> Responder:
    if isinstance(model, ToyLMParams):
        return lambda prompt, rng: sample_response(model, prompt, gen, rng)
    return model


def ideal_responder(task: TaskSpec) -> Responder:
    return lambda prompt, rng: ideal_response(task, prompt)


def uniform_responder(task: TaskSpec, max_new_tokens: int) -> Responder:
    """Uniform over content tokens and EOS at every step."""

    def respond(prompt, rng):
        g = rng.generator()
        out = []
        for _ in range(max_new_tokens):
            t = int(g.integers(N_SPECIAL - 1, task.vocab_size))
            t = EOS if t == N_SPECIAL - 1 else t
            out.append(t)
            if t == EOS:
                break
        return tuple(out)

    return respond


@dataclass(frozen=True)
class WinRate:
    rate: float
    stderr: float
    n: int
    wins: int
    ties: int
    losses: int
    per_prompt: tuple[float, ...] = ()


def eval_winrate(
    candidate: ToyLMParams | Responder,
    baseline: ToyLMParams | Responder,
    task: TaskSpec,
    prompts: Sequence[TokenSeq],
    gen: GenerationConfig,
    seed: int,
    shared_streams: bool = False,
) -> WinRate:
    """Oracle-judged pairwise win rate of ``candidate`` against ``baseline``.

    One sample per model per prompt; a strictly higher oracle reward wins and
    exact ties score 0.5. The two models draw from independent streams unless
    ``shared_streams`` is set.
    """
    if not prompts:
        raise ValueError("no evaluation prompts")
    cand, base = as_responder(candidate, gen), as_responder(baseline, gen)
    scores = []
    for i, prompt in enumerate(prompts):
        rc = RngStream.for_prompt(seed, "eval/candidate", i)
        rb = rc if shared_streams else RngStream.for_prompt(seed, "eval/baseline", i)
        a = oracle_reward(task, prompt, cand(prompt, rc))
        b = oracle_reward(task, prompt, base(prompt, rb))
        scores.append(1.0 if a > b else 0.5 if a == b else 0.0)
    s = np.array(scores)
    p = float(s.mean())
    return WinRate(
        rate=p,
        stderr=float(np.sqrt(p * (1 - p) / len(s))),
        n=len(s),
        wins=int((s == 1.0).sum()),
        ties=int((s == 0.5).sum()),
        losses=int((s == 0.0).sum()),
        per_prompt=tuple(scores),
    )
