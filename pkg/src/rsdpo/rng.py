"""Counter-based deterministic random streams.

A stream is named by ``(seed, label, path)``. Drawing from a stream always
starts from the same Philox state, so results never depend on call order or
on how work is scheduled across threads.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np


def _key(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if part < 0:
        raise ValueError(f"stream path entries must be non-negative, got {part}")
    return int(part)


@dataclass(frozen=True)
class RngStream:
    seed: int
    label: str = "root"
    path: tuple[int, ...] = field(default=())

    @classmethod
    def for_prompt(cls, seed: int, label: str, prompt_index: int) -> "RngStream":
        return cls(seed, label, (_key(prompt_index),))

    def child(self, part: int | str) -> "RngStream":
        return RngStream(self.seed, self.label, self.path + (_key(part),))

    def generator(self) -> np.random.Generator:
        entropy = [_key(self.seed), _key(self.label), len(self.path), *self.path]
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
