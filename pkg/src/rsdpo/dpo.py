"""Direct preference optimisation against a frozen reference policy."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .optim import AdamState, MetricsSink, ScheduleSpec, adam_step, lr_at, minibatches, steps_per_epoch
from .reward import EncodedPreferences, PreferenceTriple, log_sigmoid, sigmoid
from .rng import RngStream
from .toylm import TokenSeq, ToyLMParams, batch_logprob_grad, batch_logprobs, encode, sequence_logprob


@dataclass(frozen=True)
class DPOConfig:
    beta: float = 0.1
    epochs: int = 4
    batch_size: int = 16
    schedule: ScheduleSpec = field(default_factory=lambda: ScheduleSpec("cosine", 1e-3))
    held_out_fraction: float = 0.1

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0 <= self.held_out_fraction < 1:
            raise ValueError("held_out_fraction must be in [0, 1)")


@dataclass(frozen=True)
class DPOBatchMetrics:
    loss: float
    reward_accuracy: float
    reward_margin: float


def implicit_reward(policy: ToyLMParams, ref: ToyLMParams, x: TokenSeq, y: TokenSeq, beta: float) -> float:
    return beta * (sequence_logprob(policy, x, y) - sequence_logprob(ref, x, y))


def _margin(policy, ref, triple, beta):
    return implicit_reward(policy, ref, triple.prompt, triple.chosen, beta) - implicit_reward(
        policy, ref, triple.prompt, triple.rejected, beta
    )


def dpo_loss(policy: ToyLMParams, ref: ToyLMParams, triple: PreferenceTriple, beta: float) -> float:
    return float(-log_sigmoid(_margin(policy, ref, triple, beta)))


def dpo_grad(policy: ToyLMParams, ref: ToyLMParams, triple: PreferenceTriple, beta: float) -> ToyLMParams:
    """Gradient of ``dpo_loss`` with respect to the policy parameters."""
    m = _margin(policy, ref, triple, beta)
    coef = beta * float(sigmoid(-m))
    enc = encode([(triple.prompt, triple.chosen), (triple.prompt, triple.rejected)], policy.context, policy.vocab_size)
    return batch_logprob_grad(policy, enc, np.array([-coef, coef]))


def _metrics_from_margins(margins: np.ndarray) -> DPOBatchMetrics:
    acc = np.where(margins > 0, 1.0, np.where(margins == 0, 0.5, 0.0))
    return DPOBatchMetrics(
        loss=float(np.mean(-log_sigmoid(margins))),
        reward_accuracy=float(acc.mean()),
        reward_margin=float(margins.mean()),
    )


def reward_accuracy_and_margin(
    policy: ToyLMParams, ref: ToyLMParams, eval_set: Sequence[PreferenceTriple], beta: float
) -> DPOBatchMetrics:
    """Mean loss, accuracy (exact ties count 0.5) and mean implicit-reward margin."""
    if not eval_set:
        raise ValueError("evaluation set is empty")
    enc_all = EncodedPreferences.build(eval_set, policy.context, policy.vocab_size)
    enc, _ = enc_all.select(range(len(eval_set)))
    ir = beta * (batch_logprobs(policy, enc) - batch_logprobs(ref, enc))
    return _metrics_from_margins(ir[0::2] - ir[1::2])


def split_held_out(
    data: Sequence[PreferenceTriple], fraction: float, rng: RngStream
) -> tuple[list[PreferenceTriple], list[PreferenceTriple]]:
    """Shuffle, then keep the final ``fraction`` as the held-out split."""
    order = rng.generator().permutation(len(data))
    n_held = min(int(len(data) * fraction), len(data) - 1)
    shuffled = [data[i] for i in order]
    return shuffled[: len(data) - n_held], shuffled[len(data) - n_held :]


def _fingerprint(params: ToyLMParams) -> bytes:
    return params.tables.tobytes() + params.bias.tobytes()


def train_dpo(
    sft_ref: ToyLMParams,
    data: Sequence[PreferenceTriple],
    cfg: DPOConfig,
    rng: RngStream,
    on_metrics: MetricsSink | None = None,
) -> tuple[ToyLMParams, list[dict]]:
    """Train a copy of ``sft_ref`` with the DPO loss.

    Returns the policy and a trace of per-epoch metric rows
    ``{epoch, split, loss, reward_accuracy, reward_margin}``; epoch 0 is the
    initial policy.
    """
    if not data:
        raise ValueError("preference dataset is empty")
    before = _fingerprint(sft_ref)
    train, held = split_held_out(data, cfg.held_out_fraction, rng.child("split"))
    beta = cfg.beta
    enc_train = EncodedPreferences.build(train, sft_ref.context, sft_ref.vocab_size)
    enc_full, _ = enc_train.select(range(len(train)))
    ref_lp = batch_logprobs(sft_ref, enc_full).reshape(-1, 2)
    enc_held = ref_held = None
    if held:
        enc_held, _ = EncodedPreferences.build(held, sft_ref.context, sft_ref.vocab_size).select(range(len(held)))
        ref_held = batch_logprobs(sft_ref, enc_held)

    policy = sft_ref.copy()
    trace: list[dict] = []

    def record(epoch):
        ir = beta * (batch_logprobs(policy, enc_full) - ref_lp.reshape(-1))
        rows = [("train", _metrics_from_margins(ir[0::2] - ir[1::2]))]
        if held:
            ir = beta * (batch_logprobs(policy, enc_held) - ref_held)
            rows.append(("held_out", _metrics_from_margins(ir[0::2] - ir[1::2])))
        for split, m in rows:
            row = {"epoch": epoch, "split": split, "loss": m.loss, "reward_accuracy": m.reward_accuracy, "reward_margin": m.reward_margin}
            trace.append(row)
            if on_metrics is not None:
                on_metrics(row)

    record(0)
    schedule = cfg.schedule.resolved(cfg.epochs * steps_per_epoch(len(train), cfg.batch_size))
    state = AdamState.for_params(policy)
    step = 0
    for epoch in range(cfg.epochs):
        for idx in minibatches(len(train), cfg.batch_size, rng.child(epoch)):
            enc, _ = enc_train.select(idx)
            ir = beta * (batch_logprobs(policy, enc).reshape(-1, 2) - ref_lp[idx])
            margins = ir[:, 0] - ir[:, 1]
            coef = beta * sigmoid(-margins) / len(idx)
            w = np.empty(2 * len(idx))
            w[0::2], w[1::2] = -coef, coef
            grad = batch_logprob_grad(policy, enc, w)
            policy, state = adam_step(policy, grad, state, lr_at(schedule, step))
            step += 1
        record(epoch + 1)

    if _fingerprint(sft_ref) != before:
        raise RuntimeError("reference model was modified during DPO training")
    return policy, trace


def final_metrics(trace: list[dict], split: str = "held_out") -> dict | None:
    rows = [r for r in trace if r["split"] == split]
    return rows[-1] if rows else None

