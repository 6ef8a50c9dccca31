"""File formats shared by every stage: JSONL datasets, checkpoints, metrics.

JSONL schemas (one UTF-8 object per line):

* prompts: ``{"prompt": [ids]}``
* SFT: ``{"prompt": [ids], "response": [ids]}``
* preference: ``{"prompt": [ids], "chosen": [ids], "rejected": [ids], "gap_sigma": real | null}``
* generation: ``{"prompt_id": int, "prompt": [ids], "responses": [{"tokens": [ids], "reward": real}]}``

Checkpoints are little-endian binary: 8-byte magic, a version byte, a kind
byte (``L`` language model, ``R`` reward model), ``V`` and ``c`` as uint32,
then float64 tables ``T_1..T_c`` row-major followed by the bias.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
from collections.abc import Iterable, Sequence
from pathlib import Path

import numpy as np

from .pdgrs import CandidateSet
from .reward import PreferenceTriple, RewardModelParams
from .toylm import TokenSeq, ToyLMParams

MAGIC = b"RSDPOCKP"
VERSION = 1
_HEADER = struct.Struct("<8sBcII")


class SchemaError(ValueError):
    """A malformed row; carries the 1-based row number and offending field."""

    def __init__(self, path, row: int, field: str, message: str):
        self.path, self.row, self.field = str(path), row, field
        super().__init__(f"{path}: row {row}: field {field!r}: {message}")


# --- JSONL --------------------------------------------------------------------


def _write_jsonl(path, rows: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, separators=(",", ":")) + "\n")
    return path


def _read_jsonl(path) -> Iterable[tuple[int, dict]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"expected artifact not found: {path}")
    with path.open(encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(path, n, "<line>", f"invalid JSON ({exc.msg})") from None
            if not isinstance(row, dict):
                raise SchemaError(path, n, "<line>", "expected a JSON object")
            yield n, row


def _ids(path, n, row, field) -> TokenSeq:
    if field not in row:
        raise SchemaError(path, n, field, "missing")
    v = row[field]
    if not isinstance(v, list) or not all(isinstance(t, int) and not isinstance(t, bool) and t >= 0 for t in v):
        raise SchemaError(path, n, field, "expected a list of non-negative integer ids")
    return tuple(v)


def _real(path, n, row, field, optional=False) -> float | None:
    v = row.get(field)
    if v is None:
        if optional:
            return None
        raise SchemaError(path, n, field, "missing")
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise SchemaError(path, n, field, "expected a finite number")
    return float(v)


def write_sft(path, data: Iterable[tuple[TokenSeq, TokenSeq]]) -> Path:
    return _write_jsonl(path, ({"prompt": list(x), "response": list(y)} for x, y in data))


def read_sft(path) -> list[tuple[TokenSeq, TokenSeq]]:
    return [(_ids(path, n, r, "prompt"), _ids(path, n, r, "response")) for n, r in _read_jsonl(path)]


def write_prompts(path, prompts: Iterable[TokenSeq]) -> Path:
    return _write_jsonl(path, ({"prompt": list(x)} for x in prompts))


def read_prompts(path) -> list[TokenSeq]:
    return [_ids(path, n, r, "prompt") for n, r in _read_jsonl(path)]


def write_preferences(path, data: Iterable[PreferenceTriple]) -> Path:
    return _write_jsonl(
        path,
        (
            {"prompt": list(t.prompt), "chosen": list(t.chosen), "rejected": list(t.rejected), "gap_sigma": t.gap_sigma}
            for t in data
        ),
    )


def read_preferences(path) -> list[PreferenceTriple]:
    out = []
    for n, r in _read_jsonl(path):
        prompt, chosen, rejected = (_ids(path, n, r, f) for f in ("prompt", "chosen", "rejected"))
        gap = _real(path, n, r, "gap_sigma", optional=True)
        try:
            out.append(PreferenceTriple(prompt, rejected, chosen, gap))
        except ValueError as exc:
            field = "gap_sigma" if "gap" in str(exc) else "chosen"
            raise SchemaError(path, n, field, str(exc)) from None
    return out


def write_generations(path, cands: Iterable[CandidateSet]) -> Path:
    return _write_jsonl(
        path,
        (
            {
                "prompt_id": c.prompt_id,
                "prompt": list(c.prompt),
                "responses": [{"tokens": list(s.response), "reward": s.reward} for s in c.scored],
            }
            for c in cands
        ),
    )


def read_generations(path) -> list[CandidateSet]:
    out = []
    for n, r in _read_jsonl(path):
        pid = r.get("prompt_id")
        if isinstance(pid, bool) or not isinstance(pid, int):
            raise SchemaError(path, n, "prompt_id", "expected an integer")
        prompt = _ids(path, n, r, "prompt")
        resp = r.get("responses")
        if not isinstance(resp, list) or len(resp) < 2 or not all(isinstance(e, dict) for e in resp):
            raise SchemaError(path, n, "responses", "expected a list of at least two objects")
        ys = [_ids(path, n, e, "tokens") for e in resp]
        rs = [_real(path, n, e, "reward") for e in resp]
        out.append(CandidateSet.from_lists(prompt, ys, rs, pid))
    return out


def write_metrics(path, rows: Iterable[dict]) -> Path:
    return _write_jsonl(path, rows)


def read_metrics(path) -> list[dict]:
    return [r for _, r in _read_jsonl(path)]


def write_csv(path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(columns or (rows[0].keys() if rows else []))
    with path.open("w", encoding="utf-8", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return path


def read_csv(path) -> list[dict]:
    with Path(path).open(encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


# --- checkpoints --------------------------------------------------------------


def dumps_checkpoint(params: ToyLMParams | RewardModelParams) -> bytes:
    kind = b"L" if isinstance(params, ToyLMParams) else b"R"
    bias = np.atleast_1d(np.asarray(params.bias, dtype="<f8"))
    head = _HEADER.pack(MAGIC, VERSION, kind, params.vocab_size, params.context)
    return head + np.ascontiguousarray(params.tables, dtype="<f8").tobytes() + bias.tobytes()


def loads_checkpoint(blob: bytes) -> ToyLMParams | RewardModelParams:
    if len(blob) < _HEADER.size:
        raise ValueError("checkpoint truncated")
    magic, version, kind, v, c = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ValueError("not a checkpoint (bad magic)")
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    n_bias = {b"L": v, b"R": 1}.get(kind)
    if n_bias is None:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    body = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size)
    if body.size != c * v * v + n_bias:
        raise ValueError("checkpoint size does not match its header")
    tables = body[: c * v * v].reshape(c, v, v).astype(np.float64)
    bias = body[c * v * v :].astype(np.float64)
    if kind == b"L":
        return ToyLMParams(tables, bias)
    return RewardModelParams(tables, float(bias[0]))


def save_checkpoint(path, params) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps_checkpoint(params))
    return path


def load_checkpoint(path, kind: type | None = None):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"expected checkpoint not found: {path}")
    params = loads_checkpoint(path.read_bytes())
    if kind is not None and not isinstance(params, kind):
        raise ValueError(f"{path}: expected a {kind.__name__} checkpoint")
    return params


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
