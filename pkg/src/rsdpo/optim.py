"""Adam, learning-rate schedules and the supervised fine-tuning loop."""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, replace

import numpy as np

from .rng import RngStream
from .toylm import (
    TokenSeq,
    ToyLMParams,
    batch_logprob_grad,
    batch_logprobs,
    concat_encoded,
    encode,
)

MetricsSink = Callable[[dict], None]

SCHEDULE_KINDS = ("linear", "cosine", "constant")


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "linear"
    base_lr: float = 2e-5
    total_steps: int | None = None
    warmup_steps: int = 0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.base_lr < 0 or self.warmup_steps < 0:
            raise ValueError("learning rate and warmup must be non-negative")

    def resolved(self, total_steps: int) -> "ScheduleSpec":
        if self.total_steps is not None:
            return self
        return replace(self, total_steps=total_steps)


def lr_at(spec: ScheduleSpec, step: int) -> float:
    total = spec.total_steps
    if total is None:
        raise ValueError("schedule has no total_steps")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if spec.kind == "constant":
        return spec.base_lr
    w = spec.warmup_steps
    if step < w:
        return spec.base_lr * step / w
    span = total - w
    frac = (step - w) / span if span > 0 else 1.0
    if spec.kind == "linear":
        return spec.base_lr * (1.0 - frac)
    return spec.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamState:
    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "AdamState":
        arrs = params.arrays()
        return cls(tuple(np.zeros_like(a) for a in arrs), tuple(np.zeros_like(a) for a in arrs))


def adam_step(params, grads, state: AdamState, lr: float, weight_decay: float = 0.0):
    """One bias-corrected Adam step descending ``grads``. Returns ``(params, state)``.

    ``params`` and ``grads`` are any records exposing ``arrays()`` and
    ``with_arrays()``; inputs are not modified.
    """
    p_arrs, g_arrs = params.arrays(), grads.arrays()
    if len(p_arrs) != len(g_arrs) or any(p.shape != g.shape for p, g in zip(p_arrs, g_arrs)):
        raise ValueError("gradient shapes do not match parameters")
    if len(state.m) != len(p_arrs) or any(p.shape != m.shape for p, m in zip(p_arrs, state.m)):
        raise ValueError("optimizer state shapes do not match parameters")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_arrs, g_arrs, state.m, state.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        step = lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if weight_decay:
            step = step + lr * weight_decay * p
        new_p.append(p - step)
        new_m.append(m)
        new_v.append(v)
    return params.with_arrays(new_p), replace(state, m=tuple(new_m), v=tuple(new_v), step=t)


def minibatches(n: int, batch_size: int, epoch_rng: RngStream) -> list[np.ndarray]:
    order = epoch_rng.generator().permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def sft_loss(params: ToyLMParams, data: Sequence[tuple[TokenSeq, TokenSeq]]) -> float:
    """Mean negative log-likelihood of responses given prompts."""
    enc = encode(data, params.context, params.vocab_size)
    return float(-batch_logprobs(params, enc).mean())


def sft_loss_and_grad(
    params: ToyLMParams, data: Sequence[tuple[TokenSeq, TokenSeq]]
) -> tuple[float, ToyLMParams]:
    """``sft_loss`` and its exact gradient."""
    enc = encode(data, params.context, params.vocab_size)
    w = np.full(enc.n_seqs, 1.0 / enc.n_seqs)
    return float(-(batch_logprobs(params, enc) * w).sum()), batch_logprob_grad(params, enc, -w)


def train_sft(
    init: ToyLMParams,
    data: Sequence[tuple[TokenSeq, TokenSeq]],
    epochs: int,
    batch_size: int,
    schedule: ScheduleSpec,
    rng: RngStream,
    weight_decay: float = 0.0,
    on_metrics: MetricsSink | None = None,
) -> ToyLMParams:
    """Minimise mean -log pi(y|x) over (prompt, response) records with Adam.

    Prompt tokens only condition the model; the loss covers response tokens.
    """
    if not data:
        raise ValueError("SFT dataset is empty")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    encoded = [encode([rec], init.context, init.vocab_size) for rec in data]
    schedule = schedule.resolved(epochs * steps_per_epoch(len(data), batch_size))
    params, state = init.copy(), AdamState.for_params(init)
    step = 0
    for epoch in range(epochs):
        for idx in minibatches(len(data), batch_size, rng.child(epoch)):
            enc = concat_encoded([encoded[i] for i in idx])
            w = np.full(enc.n_seqs, 1.0 / enc.n_seqs)
            loss = float(-(batch_logprobs(params, enc) * w).sum())
            grad = batch_logprob_grad(params, enc, -w)
            lr = lr_at(schedule, min(step, schedule.total_steps))
            params, state = adam_step(params, grad, state, lr, weight_decay)
            if on_metrics is not None:
                on_metrics({"step": step, "epoch": epoch, "lr": lr, "loss": loss})
            step += 1
    return params

