"""Linear c-gram softmax language model.

The logit for the next token is a sum of table lookups, one table per lag::

    logits[t] = b[t] + sum_i T_i[token i positions back, t]

so log-likelihoods and their gradients are exact and cheap. Sequences are
tuples of small ints over a vocabulary with four reserved ids.
"""

from __future__ import annotations

from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .rng import RngStream

PAD, BOS, EOS, SEP = 0, 1, 2, 3
N_SPECIAL = 4

TokenSeq = tuple[int, ...]


@dataclass(frozen=True)
class Vocab:
    size: int = 32

    def __post_init__(self):
        if self.size < 8:
            raise ValueError(f"vocabulary size must be >= 8, got {self.size}")

    @property
    def content(self) -> range:
        return range(N_SPECIAL, self.size)


def check_tokens(seq: Sequence[int], vocab_size: int, what: str = "sequence") -> TokenSeq:
    seq = tuple(int(t) for t in seq)
    for t in seq:
        if not 0 <= t < vocab_size:
            raise ValueError(f"{what} token id {t} outside [0, {vocab_size})")
    return seq


def check_prompt(prompt: Sequence[int], vocab_size: int) -> TokenSeq:
    prompt = check_tokens(prompt, vocab_size, "prompt")
    if len(prompt) < 2 or prompt[0] != BOS or prompt[-1] != SEP:
        raise ValueError("prompt must start with BOS and end with SEP")
    return prompt


def check_response(response: Sequence[int], vocab_size: int) -> TokenSeq:
    response = check_tokens(response, vocab_size, "response")
    if not response:
        raise ValueError("response is empty")
    if BOS in response or SEP in response:
        raise ValueError("response may not contain BOS or SEP")
    return response


@dataclass
class ToyLMParams:
    """Lag tables ``tables[i-1] = T_i`` of shape (c, V, V) and bias of shape (V,).

    Also used as the gradient record for the same model.
    """

    tables: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.tables = np.asarray(self.tables, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        c, v1, v2 = self.tables.shape
        if c < 1 or v1 != v2 or self.bias.shape != (v1,):
            raise ValueError(f"inconsistent shapes {self.tables.shape} / {self.bias.shape}")

    @property
    def vocab_size(self) -> int:
        return self.bias.shape[0]

    @property
    def context(self) -> int:
        return self.tables.shape[0]

    @property
    def n_params(self) -> int:
        return self.tables.size + self.bias.size

    @classmethod
    def zeros(cls, vocab_size: int = 32, context: int = 3) -> "ToyLMParams":
        Vocab(vocab_size)
        return cls(np.zeros((context, vocab_size, vocab_size)), np.zeros(vocab_size))

    @classmethod
    def random(cls, vocab_size: int, context: int, rng: np.random.Generator, scale: float = 1.0):
        return cls(
            rng.normal(0.0, scale, (context, vocab_size, vocab_size)),
            rng.normal(0.0, scale, vocab_size),
        )

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.tables, self.bias)

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "ToyLMParams":
        tables, bias = arrays
        return ToyLMParams(tables, bias)

    def copy(self) -> "ToyLMParams":
        return ToyLMParams(self.tables.copy(), self.bias.copy())

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.tables).all() and np.isfinite(self.bias).all())


@dataclass(frozen=True)
class GenerationConfig:
    k: int = 16
    max_new_tokens: int = 24
    top_k: int = 50
    top_p: float = 0.98
    sampling_temperature: float = 1.0

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        _check_filter_config(self.sampling_temperature, self.top_k, self.top_p)


def _check_filter_config(temperature, top_k, top_p):
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    if not 0 < top_p <= 1:
        raise ValueError(f"top_p must be in (0, 1], got {top_p}")


# --- exact likelihood -------------------------------------------------------


@dataclass(frozen=True)
class EncodedSeqs:
    """Flattened response positions of several (prompt, response) pairs.

    ``ctx[n, i]`` is the token ``i + 1`` positions before target ``tgt[n]``;
    ``seg[n]`` is the index of the pair the position belongs to.
    """

    ctx: np.ndarray
    tgt: np.ndarray
    seg: np.ndarray
    n_seqs: int


def encode(pairs: Sequence[tuple[TokenSeq, TokenSeq]], context: int, vocab_size: int) -> EncodedSeqs:
    ctxs, tgts, segs = [], [], []
    for s, (prompt, response) in enumerate(pairs):
        prompt = check_prompt(prompt, vocab_size)
        response = check_response(response, vocab_size)
        padded = np.array((PAD,) * context + prompt + response, dtype=np.int64)
        start = context + len(prompt)
        n = len(response)
        # row t: tokens at start+t-1, start+t-2, ... (lag order)
        idx = start + np.arange(n)[:, None] - 1 - np.arange(context)[None, :]
        ctxs.append(padded[idx])
        tgts.append(padded[start : start + n])
        segs.append(np.full(n, s, dtype=np.int64))
    if not pairs:
        empty = np.zeros(0, dtype=np.int64)
        return EncodedSeqs(np.zeros((0, context), dtype=np.int64), empty, empty, 0)
    return EncodedSeqs(np.concatenate(ctxs), np.concatenate(tgts), np.concatenate(segs), len(pairs))


def concat_encoded(encs: Sequence[EncodedSeqs]) -> EncodedSeqs:
    offsets = np.cumsum([0] + [e.n_seqs for e in encs[:-1]])
    return EncodedSeqs(
        np.concatenate([e.ctx for e in encs]),
        np.concatenate([e.tgt for e in encs]),
        np.concatenate([e.seg + o for e, o in zip(encs, offsets)]),
        sum(e.n_seqs for e in encs),
    )


def _position_logits(tables: np.ndarray, bias: np.ndarray, ctx: np.ndarray) -> np.ndarray:
    out = np.broadcast_to(bias, (ctx.shape[0], bias.shape[0])).copy()
    for i in range(tables.shape[0]):
        out += tables[i][ctx[:, i]]
    return out


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def batch_logprobs(params: ToyLMParams, enc: EncodedSeqs) -> np.ndarray:
    """log pi(response | prompt) for every encoded pair."""
    logp = _log_softmax(_position_logits(params.tables, params.bias, enc.ctx))
    per_pos = logp[np.arange(enc.tgt.size), enc.tgt]
    return np.bincount(enc.seg, weights=per_pos, minlength=enc.n_seqs)


def batch_logprob_grad(params: ToyLMParams, enc: EncodedSeqs, weights: np.ndarray) -> ToyLMParams:
    """Gradient of ``sum_s weights[s] * log pi(response_s | prompt_s)``."""
    V = params.vocab_size
    logp = _log_softmax(_position_logits(params.tables, params.bias, enc.ctx))
    g = -np.exp(logp)
    g[np.arange(enc.tgt.size), enc.tgt] += 1.0
    g *= np.asarray(weights, dtype=np.float64)[enc.seg][:, None]
    tables = np.empty_like(params.tables)
    eye = np.eye(V)
    for i in range(params.context):
        tables[i] = eye[enc.ctx[:, i]].T @ g
    return ToyLMParams(tables, g.sum(axis=0))


def logits(params: ToyLMParams, context: Sequence[int]) -> np.ndarray:
    """Next-token logits given the last ``c`` tokens, oldest first, left-padded with PAD."""
    ctx = check_tokens(context, params.vocab_size, "context")
    if len(ctx) != params.context:
        raise ValueError(f"context must have exactly {params.context} entries, got {len(ctx)}")
    lagged = np.array(ctx[::-1], dtype=np.int64)[None, :]
    return _position_logits(params.tables, params.bias, lagged)[0]


def sequence_logprob(params: ToyLMParams, prompt: TokenSeq, response: TokenSeq) -> float:
    enc = encode([(prompt, response)], params.context, params.vocab_size)
    return float(batch_logprobs(params, enc)[0])


def logprob_grad(params: ToyLMParams, prompt: TokenSeq, response: TokenSeq) -> ToyLMParams:
    enc = encode([(prompt, response)], params.context, params.vocab_size)
    return batch_logprob_grad(params, enc, np.ones(1))


# --- decoding ---------------------------------------------------------------


def filter_logits(
    raw: Sequence[float],
    temperature: float = 1.0,
    top_k: int = 50,
    top_p: float = 1.0,
    banned: Sequence[int] = (),
) -> np.ndarray:
    """Temperature, then top-k, then top-p; returns a probability vector.

    Ties in both cut-offs go to the lower token id. ``banned`` ids get zero
    probability and are never counted towards ``top_k``.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if not np.isfinite(raw).all():
        raise ValueError("logits must be finite")
    _check_filter_config(temperature, top_k, top_p)
    V = raw.size
    z = raw / temperature
    allowed = np.ones(V, dtype=bool)
    allowed[list(banned)] = False
    cand = np.flatnonzero(allowed)
    if cand.size == 0:
        raise ValueError("every token is banned")
    order = cand[np.lexsort((cand, -z[cand]))]
    keep = order[: min(top_k, order.size)]
    p = np.exp(z[keep] - z[keep[0]])
    p /= p.sum()
    if top_p < 1.0:
        n = int(np.searchsorted(np.cumsum(p), top_p, side="left")) + 1
        keep, p = keep[:n], p[:n]
        p = p / p.sum()
    out = np.zeros(V)
    out[keep] = p
    return out


_GEN_BANNED = (PAD, BOS, SEP)


def _draw(probs: np.ndarray, u: float) -> int:
    cdf = np.cumsum(probs)
    return int(np.searchsorted(cdf, u * cdf[-1], side="right"))


def sample_response(
    params: ToyLMParams, prompt: TokenSeq, gen: GenerationConfig, rng: RngStream
) -> TokenSeq:
    prompt = check_prompt(prompt, params.vocab_size)
    c = params.context
    draws = rng.generator().random(gen.max_new_tokens)
    window = [PAD] * c + list(prompt[-c:])
    out: list[int] = []
    for step in range(gen.max_new_tokens):
        lagged = np.array(window[-1 : -c - 1 : -1], dtype=np.int64)[None, :]
        z = _position_logits(params.tables, params.bias, lagged)[0]
        probs = filter_logits(z, gen.sampling_temperature, gen.top_k, gen.top_p, _GEN_BANNED)
        tok = _draw(probs, draws[step])
        out.append(tok)
        window.append(tok)
        if tok == EOS:
            break
    return tuple(out)


def sample_k_responses(
    params: ToyLMParams, prompt: TokenSeq, gen: GenerationConfig, rng: RngStream
) -> list[TokenSeq]:
    return [sample_response(params, prompt, gen, rng.child(j)) for j in range(gen.k)]


def sample_many(
    params: ToyLMParams,
    prompts: Sequence[TokenSeq],
    gen: GenerationConfig,
    seed: int,
    label: str,
    prompt_ids: Sequence[int] | None = None,
    workers: int = 1,
) -> list[list[TokenSeq]]:
    """k responses for each prompt; prompt ``i`` draws from stream ``(seed, label, prompt_ids[i])``."""
    if prompt_ids is None:
        prompt_ids = range(len(prompts))

    def one(item):
        pid, prompt = item
        return sample_k_responses(params, prompt, gen, RngStream.for_prompt(seed, label, pid))

    items = list(zip(prompt_ids, prompts, strict=True))
    if workers <= 1:
        return [one(it) for it in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(one, items))
