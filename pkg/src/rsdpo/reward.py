"""Scalar c-gram reward model and Bradley-Terry pairwise training."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .optim import AdamState, MetricsSink, ScheduleSpec, adam_step, lr_at, minibatches, steps_per_epoch
from .rng import RngStream
from .toylm import EncodedSeqs, TokenSeq, concat_encoded, encode


def log_sigmoid(x: float | np.ndarray):
    """log(sigmoid(x)) without overflow for large |x|."""
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def sigmoid(x: float | np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass
class RewardModelParams:
    """Position score ``b_r + sum_i S_i[token i back, y_t]``; sequence score is the mean."""

    tables: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        self.tables = np.asarray(self.tables, dtype=np.float64)
        self.bias = float(self.bias)
        c, v1, v2 = self.tables.shape
        if c < 1 or v1 != v2:
            raise ValueError(f"bad table shape {self.tables.shape}")

    @property
    def vocab_size(self) -> int:
        return self.tables.shape[1]

    @property
    def context(self) -> int:
        return self.tables.shape[0]

    @classmethod
    def zeros(cls, vocab_size: int = 32, context: int = 3) -> "RewardModelParams":
        return cls(np.zeros((context, vocab_size, vocab_size)), 0.0)

    @classmethod
    def random(cls, vocab_size: int, context: int, rng: np.random.Generator, scale: float = 1.0):
        return cls(rng.normal(0.0, scale, (context, vocab_size, vocab_size)), rng.normal(0.0, scale))

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.tables, np.array([self.bias]))

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "RewardModelParams":
        tables, bias = arrays
        return RewardModelParams(tables, float(np.asarray(bias).reshape(-1)[0]))

    def copy(self) -> "RewardModelParams":
        return RewardModelParams(self.tables.copy(), self.bias)


@dataclass(frozen=True)
class PreferenceTriple:
    prompt: TokenSeq
    rejected: TokenSeq
    chosen: TokenSeq
    gap_sigma: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "prompt", tuple(self.prompt))
        object.__setattr__(self, "rejected", tuple(self.rejected))
        object.__setattr__(self, "chosen", tuple(self.chosen))
        if self.rejected == self.chosen:
            raise ValueError("chosen and rejected responses are identical")
        # sigma of a large gap rounds to exactly 1.0 in float64
        if self.gap_sigma is not None and not 0.0 < self.gap_sigma <= 1.0:
            raise ValueError(f"gap_sigma must be in (0, 1), got {self.gap_sigma}")


PreferenceDataset = list[PreferenceTriple]


def _encode_scored(pairs, rm: RewardModelParams) -> tuple[EncodedSeqs, np.ndarray]:
    enc = encode(pairs, rm.context, rm.vocab_size)
    return enc, np.bincount(enc.seg, minlength=enc.n_seqs).astype(np.float64)


def batch_scores(rm: RewardModelParams, enc: EncodedSeqs, lengths: np.ndarray) -> np.ndarray:
    per_pos = np.zeros(enc.tgt.size)
    for i in range(rm.context):
        per_pos += rm.tables[i][enc.ctx[:, i], enc.tgt]
    return rm.bias + np.bincount(enc.seg, weights=per_pos, minlength=enc.n_seqs) / lengths


def batch_score_grad(
    rm: RewardModelParams, enc: EncodedSeqs, lengths: np.ndarray, weights: np.ndarray
) -> RewardModelParams:
    """Gradient of ``sum_s weights[s] * score_s``."""
    w_pos = (np.asarray(weights, dtype=np.float64) / lengths)[enc.seg]
    tables = np.zeros_like(rm.tables)
    for i in range(rm.context):
        np.add.at(tables[i], (enc.ctx[:, i], enc.tgt), w_pos)
    return RewardModelParams(tables, float(np.sum(weights)))


def reward_score(rm: RewardModelParams, x: TokenSeq, y: TokenSeq) -> float:
    enc, lengths = _encode_scored([(x, y)], rm)
    return float(batch_scores(rm, enc, lengths)[0])


def score_many(rm: RewardModelParams, x: TokenSeq, ys: Sequence[TokenSeq]) -> np.ndarray:
    enc, lengths = _encode_scored([(x, y) for y in ys], rm)
    return batch_scores(rm, enc, lengths)


def bt_probability(r_w: float, r_l: float) -> float:
    """Bradley-Terry probability that the response scored ``r_w`` is preferred."""
    return float(sigmoid(r_w - r_l))


def rm_loss_and_grad(rm: RewardModelParams, triple: PreferenceTriple) -> tuple[float, RewardModelParams]:
    """Pairwise logistic loss ``-log sigmoid(r(x, y_w) - r(x, y_l))`` and its gradient."""
    enc, lengths = _encode_scored([(triple.prompt, triple.chosen), (triple.prompt, triple.rejected)], rm)
    r_w, r_l = batch_scores(rm, enc, lengths)
    delta = r_w - r_l
    coef = float(sigmoid(-delta))
    return float(-log_sigmoid(delta)), batch_score_grad(rm, enc, lengths, np.array([-coef, coef]))


@dataclass(frozen=True)
class EncodedPreferences:
    """Chosen responses at even segment ids, rejected at odd ones."""

    parts: list[EncodedSeqs]
    lengths: list[np.ndarray]

    @classmethod
    def build(cls, data: Sequence[PreferenceTriple], context: int, vocab_size: int):
        parts, lengths = [], []
        for t in data:
            enc = encode([(t.prompt, t.chosen), (t.prompt, t.rejected)], context, vocab_size)
            parts.append(enc)
            lengths.append(np.bincount(enc.seg, minlength=2).astype(np.float64))
        return cls(parts, lengths)

    def select(self, idx) -> tuple[EncodedSeqs, np.ndarray]:
        return concat_encoded([self.parts[i] for i in idx]), np.concatenate([self.lengths[i] for i in idx])


def rm_margins(rm: RewardModelParams, data: Sequence[PreferenceTriple]) -> np.ndarray:
    """Score differences chosen minus rejected."""
    if not data:
        return np.zeros(0)
    enc_all = EncodedPreferences.build(data, rm.context, rm.vocab_size)
    enc, lengths = enc_all.select(range(len(data)))
    s = batch_scores(rm, enc, lengths)
    return s[0::2] - s[1::2]


def rm_accuracy(rm: RewardModelParams, data: Sequence[PreferenceTriple]) -> float:
    return float(np.mean(rm_margins(rm, data) > 0))


def train_rm(
    init: RewardModelParams,
    data: Sequence[PreferenceTriple],
    epochs: int,
    batch_size: int,
    schedule: ScheduleSpec,
    rng: RngStream,
    on_metrics: MetricsSink | None = None,
) -> RewardModelParams:
    """Adam on the mean pairwise logistic loss over shuffled minibatches.

    Emits one row per step (``loss``, ``lr``) and one per epoch with the
    epoch-mean loss and pairwise accuracy on the training set.
    """
    if not data:
        raise ValueError("preference dataset is empty")
    enc_all = EncodedPreferences.build(data, init.context, init.vocab_size)
    schedule = schedule.resolved(epochs * steps_per_epoch(len(data), batch_size))
    rm, state = init.copy(), AdamState.for_params(init)
    step = 0
    for epoch in range(epochs):
        losses = []
        for idx in minibatches(len(data), batch_size, rng.child(epoch)):
            enc, lengths = enc_all.select(idx)
            s = batch_scores(rm, enc, lengths)
            delta = s[0::2] - s[1::2]
            loss = float(-log_sigmoid(delta).mean())
            coef = sigmoid(-delta) / len(idx)
            w = np.empty(2 * len(idx))
            w[0::2], w[1::2] = -coef, coef
            grad = batch_score_grad(rm, enc, lengths, w)
            lr = lr_at(schedule, step)
            rm, state = adam_step(rm, grad, state, lr)
            losses.append(loss)
            if on_metrics is not None:
                on_metrics({"step": step, "epoch": epoch, "lr": lr, "loss": loss})
            step += 1
        if on_metrics is not None:
            enc, lengths = enc_all.select(range(len(data)))
            s = batch_scores(rm, enc, lengths)
            margins = s[0::2] - s[1::2]
            on_metrics(
                {
                    "epoch": epoch,
                    "split": "train",
                    "loss": float(np.mean(losses)),
                    "accuracy": float(np.mean(margins > 0)),
                }
            )
    return rm

