"""Experiment configuration, file-backed pipeline stages and result tables.

Each stage reads and writes files under a run directory and records its
outputs (sha256) and wall-clock in ``manifest.json``. ``run_experiment``
drives the stages over a grid of policies, reward-model variants,
thresholds and temperatures, replicated over seeds.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
import typing
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .dpo import DPOConfig, final_metrics, train_dpo
from .optim import ScheduleSpec, train_sft
from .pdgrs import (
    CandidateSet,
    PDGRSConfig,
    generate_candidates,
    pdgrs_pairs,
    reward_gap_histogram,
    select_dataset,
    subsample,
)
from .reward import PreferenceTriple, RewardModelParams, train_rm
from .rng import RngStream
from .synthdata import AnnotatorConfig, TaskSpec, eval_winrate, gen_preference_dataset, gen_sft_dataset, sample_prompts
from .toylm import GenerationConfig, ToyLMParams

log = logging.getLogger(__name__)

POLICIES = (
    "proposed",
    "best-vs-worst",
    "best-vs-random",
    "original-annotation",
    "rejection-sampling",
    "sft-only",
)
RM_VARIANTS = ("rich", "narrow")
RESULT_COLUMNS = (
    "policy",
    "rm_variant",
    "sample_size",
    "eta",
    "tau",
    "win_rate",
    "win_rate_stderr",
    "dpo_reward_accuracy",
    "dpo_reward_margin",
    "subsampled",
    "n_seeds",
)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        super().__init__(f"stage {stage!r} failed: {cause}")


@dataclass(frozen=True)
class TaskConfig:
    vocab_size: int = 32
    context: int = 3
    depth: int = 5
    chain_prob: float = 0.9
    min_len: int = 4
    max_len: int = 10
    length_penalty: float = 0.5

    def build(self, seed: int) -> TaskSpec:
        return TaskSpec.make(
            self.vocab_size,
            seed,
            depth=self.depth,
            min_len=self.min_len,
            max_len=self.max_len,
            length_penalty=self.length_penalty,
            chain_prob=self.chain_prob,
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    schedule: ScheduleSpec

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass(frozen=True)
class SizeConfig:
    n_sft: int = 500
    n_rm: int = 2000
    n_pref: int = 200
    n_eval: int = 400
    narrow_fraction: float = 0.1

    def __post_init__(self):
        if min(self.n_sft, self.n_rm, self.n_pref, self.n_eval) < 1:
            raise ValueError("dataset sizes must be positive")
        if self.n_pref > self.n_rm:
            raise ValueError("n_pref cannot exceed n_rm")
        if not 0 < self.narrow_fraction <= 1:
            raise ValueError("narrow_fraction must be in (0, 1]")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs. ``seed`` is the first of ``n_seeds`` consecutive seeds."""

    seed: int = 0
    n_seeds: int = 1
    task: TaskConfig = field(default_factory=TaskConfig)
    annotator: AnnotatorConfig = field(default_factory=AnnotatorConfig)
    sizes: SizeConfig = field(default_factory=SizeConfig)
    sft: TrainConfig = field(default_factory=lambda: TrainConfig(30, 16, ScheduleSpec("linear", 1e-1)))
    rm: TrainConfig = field(default_factory=lambda: TrainConfig(3, 16, ScheduleSpec("linear", 3e-2)))
    rs_sft: TrainConfig = field(default_factory=lambda: TrainConfig(4, 16, ScheduleSpec("linear", 1e-2)))
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    etas: tuple[float, ...] = (0.85,)
    taus: tuple[float, ...] = (1.0,)
    dpo: DPOConfig = field(default_factory=lambda: DPOConfig(beta=0.7, schedule=ScheduleSpec("cosine", 1e-2)))
    policies: tuple[str, ...] = POLICIES
    rm_variants: tuple[str, ...] = ("rich",)
    size_controlled: tuple[bool, ...] = (False,)
    histogram_bins: int = 20
    workers: int = 1
    out_dir: str = "runs"

    def __post_init__(self):
        for name in ("etas", "taus", "policies", "rm_variants", "size_controlled"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")
        bad = [p for p in self.policies if p not in POLICIES]
        if bad:
            raise ValueError(f"unknown policy {bad[0]!r}; expected one of {', '.join(POLICIES)}")
        bad = [v for v in self.rm_variants if v not in RM_VARIANTS]
        if bad:
            raise ValueError(f"unknown rm variant {bad[0]!r}")
        if not self.etas or not self.taus or not self.policies or not self.rm_variants:
            raise ValueError("grids must be non-empty")
        for eta in self.etas:
            PDGRSConfig(1.0, eta)
        for tau in self.taus:
            PDGRSConfig(tau, 0.85)
        if self.workers < 1 or self.histogram_bins < 1:
            raise ValueError("workers and histogram_bins must be >= 1")

    @property
    def seeds(self) -> range:
        return range(self.seed, self.seed + self.n_seeds)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


def _build(cls, value):
    """Rebuild a (possibly nested) frozen dataclass from plain JSON values."""
    if not isinstance(value, dict):
        raise ValueError(f"{cls.__name__}: expected an object, got {type(value).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(value) - names
    if unknown:
        raise ValueError(f"{cls.__name__}: unknown field(s) {', '.join(sorted(unknown))}")
    kw = {}
    for name, v in value.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kw[name] = _build(hint, v)
        elif typing.get_origin(hint) is tuple:
            if not isinstance(v, (list, tuple)):
                raise ValueError(f"{cls.__name__}.{name}: expected a list")
            kw[name] = tuple(v)
        else:
            kw[name] = v
    return cls(**kw)


PRESETS: dict[str, dict] = {
    "default": {"n_seeds": 5},
    "threshold-ablation": {
        "n_seeds": 5,
        "policies": ["proposed"],
        "etas": [0.80, 0.85, 0.90],
    },
    "temperature-ablation": {
        "n_seeds": 5,
        "policies": ["proposed"],
        "taus": [0.8, 0.9, 1.0, 1.1, 1.2],
    },
    "size-controlled": {
        "n_seeds": 5,
        "policies": ["proposed"],
        "etas": [0.85, 0.90],
        "size_controlled": [False, True],
    },
    "rm-ablation": {
        "n_seeds": 5,
        "policies": ["proposed", "best-vs-worst"],
        "rm_variants": ["rich", "narrow"],
    },
    # a one-seed miniature for smoke runs
    "smoke": {
        "sizes": {"n_sft": 60, "n_rm": 120, "n_pref": 12, "n_eval": 30},
        "generation": {"k": 4, "max_new_tokens": 12},
        "sft": {"epochs": 2, "batch_size": 16, "schedule": {"kind": "linear", "base_lr": 0.1}},
        "dpo": {"beta": 0.7, "epochs": 1, "schedule": {"kind": "cosine", "base_lr": 0.01}},
        "etas": [0.6, 0.7],
        "taus": [0.05],
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def preset(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; expected one of {', '.join(PRESETS)}")
    d = _merge(ExperimentConfig().to_dict(), PRESETS[name])
    return ExperimentConfig.from_dict(_merge(d, overrides))


# --- run directory and manifest ----------------------------------------------


class RunDir:
    """A seed's artifact directory plus its manifest."""

    def __init__(self, path, cfg: ExperimentConfig, seed: int):
        self.path = Path(path)
        self.cfg, self.seed = cfg, seed
        self.path.mkdir(parents=True, exist_ok=True)

    def __truediv__(self, rel: str) -> Path:
        return self.path / rel

    @property
    def manifest_path(self) -> Path:
        return self.path / "manifest.json"

    def manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text(encoding="utf-8"))
        return {"config_hash": None, "seed": self.seed, "stages": {}}

    def require(self, rel: str) -> Path:
        p = self.path / rel
        if not p.exists():
            raise FileNotFoundError(f"missing input artifact {p}; run the stage that produces it first")
        return p

    def record(self, stage: str, outputs: Sequence[Path], seconds: float) -> None:
        m = self.manifest()
        m["config_hash"], m["seed"] = self.cfg.config_hash(), self.seed
        m["stages"][stage] = {
            "artifacts": {str(Path(p).relative_to(self.path)): io.sha256_file(p) for p in outputs},
            "seconds": round(seconds, 4),
        }
        self.manifest_path.write_text(json.dumps(m, indent=2, sort_keys=True), encoding="utf-8")


def verify_manifest(run_dir) -> list[str]:
    """Problems with a manifest: missing artifacts or checksum mismatches."""
    run_dir = Path(run_dir)
    m = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
    problems = []
    for stage, info in m["stages"].items():
        for rel, digest in info["artifacts"].items():
            p = run_dir / rel
            if not p.exists():
                problems.append(f"{stage}: missing {rel}")
            elif io.sha256_file(p) != digest:
                problems.append(f"{stage}: checksum mismatch for {rel}")
    return problems


class _Timed:
    def __init__(self, run: RunDir, stage: str):
        self.run, self.stage = run, stage

    def __enter__(self):
        self.t0 = time.perf_counter()
        self.outputs: list[Path] = []
        return self.outputs

    def __exit__(self, exc_type, exc, tb):
        if exc is not None:
            if isinstance(exc, (FileNotFoundError, io.SchemaError, StageError)):
                return False
            raise StageError(self.stage, exc) from exc
        self.run.record(self.stage, self.outputs, time.perf_counter() - self.t0)
        return False


# --- stages -------------------------------------------------------------------


def _tag(*parts) -> str:
    return "-".join(str(p) for p in parts if p not in (None, ""))


def pdgrs_tag(variant: str, eta: float, tau: float, sub: bool = False) -> str:
    return _tag("proposed", variant, f"eta{eta:.2f}", f"tau{tau:.2f}", "sub" if sub else "")


def stage_synth(run: RunDir) -> None:
    cfg, seed = run.cfg, run.seed
    with _Timed(run, "synth") as out:
        task = cfg.task.build(seed)
        (run / "task.json").write_text(task.to_json(), encoding="utf-8")
        out.append(run / "task.json")
        sft = gen_sft_dataset(task, cfg.sizes.n_sft, cfg.annotator, RngStream(seed, "sft-data"))
        rm = gen_preference_dataset(task, cfg.sizes.n_rm, cfg.annotator, RngStream(seed, "rm-data"))
        evalp = sample_prompts(task, cfg.sizes.n_eval, RngStream(seed, "eval"))
        out.append(io.write_sft(run / "sft_data.jsonl", sft))
        out.append(io.write_preferences(run / "rm_data.jsonl", rm))
        out.append(io.write_preferences(run / "pref_data.jsonl", rm[: cfg.sizes.n_pref]))
        out.append(io.write_prompts(run / "eval_prompts.jsonl", evalp))


def load_task(run: RunDir) -> TaskSpec:
    return TaskSpec.from_json(run.require("task.json").read_text(encoding="utf-8"))


def stage_sft(run: RunDir) -> ToyLMParams:
    cfg = run.cfg
    data = io.read_sft(run.require("sft_data.jsonl"))
    with _Timed(run, "sft") as out:
        rows: list[dict] = []
        params = train_sft(
            ToyLMParams.zeros(cfg.task.vocab_size, cfg.task.context),
            data,
            cfg.sft.epochs,
            cfg.sft.batch_size,
            cfg.sft.schedule,
            RngStream(run.seed, "sft"),
            on_metrics=rows.append,
        )
        out.append(io.save_checkpoint(run / "sft.ckpt", params))
        out.append(io.write_metrics(run / "metrics/sft.jsonl", rows))
    return params


def stage_rm(run: RunDir, variant: str) -> RewardModelParams:
    """Rich RM: the full preference set. Narrow RM: its first ``narrow_fraction``, same step budget."""
    cfg = run.cfg
    data = io.read_preferences(run.require("rm_data.jsonl"))
    epochs = cfg.rm.epochs
    if variant == "narrow":
        data = data[: max(1, int(len(data) * cfg.sizes.narrow_fraction))]
        epochs = int(round(epochs / cfg.sizes.narrow_fraction))
    elif variant != "rich":
        raise ValueError(f"unknown rm variant {variant!r}")
    with _Timed(run, f"rm-{variant}") as out:
        rows: list[dict] = []
        rm = train_rm(
            RewardModelParams.zeros(cfg.task.vocab_size, cfg.task.context),
            data,
            epochs,
            cfg.rm.batch_size,
            cfg.rm.schedule,
            RngStream(run.seed, "rm"),
            on_metrics=rows.append,
        )
        out.append(io.save_checkpoint(run / f"rm_{variant}.ckpt", rm))
        out.append(io.write_metrics(run / f"metrics/rm_{variant}.jsonl", rows))
    return rm


def stage_generate(run: RunDir, variant: str) -> list[CandidateSet]:
    cfg = run.cfg
    sft = io.load_checkpoint(run.require("sft.ckpt"), ToyLMParams)
    rm = io.load_checkpoint(run.require(f"rm_{variant}.ckpt"), RewardModelParams)
    prompts = [t.prompt for t in io.read_preferences(run.require("pref_data.jsonl"))]
    with _Timed(run, f"generate-{variant}") as out:
        cands = generate_candidates(sft, rm, prompts, cfg.generation, run.seed, workers=cfg.workers)
        out.append(io.write_generations(run / f"gen_{variant}.jsonl", cands))
    return cands


def stage_pdgrs(run: RunDir, variant: str, eta: float, tau: float) -> tuple[Path, int]:
    cands = io.read_generations(run.require(f"gen_{variant}.jsonl"))
    cfg = PDGRSConfig(tau, eta)
    tag = pdgrs_tag(variant, eta, tau)
    with _Timed(run, f"pdgrs-{tag}") as out:
        data = [t for c in cands for t in pdgrs_pairs(c, cfg)]
        path = io.write_preferences(run / f"data/{tag}.jsonl", data)
        out.append(path)
    return path, len(data)


def stage_subsample(run: RunDir, variant: str, eta: float, tau: float) -> tuple[Path, int]:
    """Shrink a PDGRS dataset to at most the preference-prompt count."""
    full = io.read_preferences(run.require(f"data/{pdgrs_tag(variant, eta, tau)}.jsonl"))
    tag = pdgrs_tag(variant, eta, tau, sub=True)
    n = min(len(full), run.cfg.sizes.n_pref)
    with _Timed(run, f"subsample-{tag}") as out:
        data = subsample(full, n, RngStream(run.seed, "subsample").child(pdgrs_tag(variant, eta, tau)))
        path = io.write_preferences(run / f"data/{tag}.jsonl", data)
        out.append(path)
    return path, len(data)


def stage_select(run: RunDir, policy: str, variant: str) -> tuple[Path, int]:
    cands = io.read_generations(run.require(f"gen_{variant}.jsonl"))
    tag = _tag(policy, variant)
    with _Timed(run, f"select-{tag}") as out:
        data, stats = select_dataset(cands, policy, run.seed)
        if stats.skipped:
            log.info("%s: skipped %d of %d prompts with coincident responses", tag, stats.skipped, stats.prompts)
        writer = io.write_sft if policy == "rejection-sampling" else io.write_preferences
        path = writer(run / f"data/{tag}.jsonl", data)
        out.append(path)
    return path, len(data)


def stage_dpo(run: RunDir, data_path: Path, tag: str) -> tuple[ToyLMParams, dict]:
    data = io.read_preferences(data_path)
    sft_path = run.require("sft.ckpt")
    ref = io.load_checkpoint(sft_path, ToyLMParams)
    before = io.sha256_file(sft_path)
    with _Timed(run, f"dpo-{tag}") as out:
        policy, trace = train_dpo(ref, data, run.cfg.dpo, RngStream(run.seed, "dpo"))
        if io.sha256_file(sft_path) != before:
            raise RuntimeError("reference checkpoint changed on disk during DPO")
        out.append(io.save_checkpoint(run / f"models/{tag}.ckpt", policy))
        out.append(io.write_metrics(run / f"metrics/dpo_{tag}.jsonl", trace))
        out.append(io.write_csv(run / f"metrics/dpo_{tag}.csv", trace))
    return policy, final_metrics(trace) or final_metrics(trace, "train")


def stage_rs_sft(run: RunDir, data_path: Path, tag: str) -> ToyLMParams:
    cfg = run.cfg
    data = io.read_sft(data_path)
    sft = io.load_checkpoint(run.require("sft.ckpt"), ToyLMParams)
    with _Timed(run, f"rs-sft-{tag}") as out:
        rows: list[dict] = []
        policy = train_sft(
            sft, data, cfg.rs_sft.epochs, cfg.rs_sft.batch_size, cfg.rs_sft.schedule, RngStream(run.seed, "rs-sft"), on_metrics=rows.append
        )
        out.append(io.save_checkpoint(run / f"models/{tag}.ckpt", policy))
        out.append(io.write_metrics(run / f"metrics/rs_sft_{tag}.jsonl", rows))
    return policy


def stage_eval(
    run: RunDir, candidate: ToyLMParams, tag: str, baseline: ToyLMParams | None = None, shared_streams: bool = False
) -> dict:
    """Oracle win rate of ``candidate`` against ``baseline`` (the SFT model by default)."""
    task = load_task(run)
    if baseline is None:
        baseline = io.load_checkpoint(run.require("sft.ckpt"), ToyLMParams)
    prompts = io.read_prompts(run.require("eval_prompts.jsonl"))
    with _Timed(run, f"eval-{tag}") as out:
        w = eval_winrate(candidate, baseline, task, prompts, run.cfg.generation, run.seed, shared_streams)
        row = {"tag": tag, "win_rate": w.rate, "stderr": w.stderr, "n": w.n, "wins": w.wins, "ties": w.ties, "losses": w.losses}
        path = run / f"eval/{tag}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(row, sort_keys=True), encoding="utf-8")
        out.append(path)
    return row


def stage_histogram(run: RunDir, variant: str, eta: float, tau: float) -> dict:
    cands = io.read_generations(run.require(f"gen_{variant}.jsonl"))
    with _Timed(run, f"histogram-{variant}-tau{tau:.2f}") as out:
        h = reward_gap_histogram(cands, PDGRSConfig(tau, eta), run.cfg.histogram_bins)
        rows = [
            {"bin_lo": float(lo), "bin_hi": float(hi), "count": int(n)}
            for lo, hi, n in zip(h.edges[:-1], h.edges[1:], h.counts)
        ]
        stem = f"histograms/gap_{variant}_tau{tau:.2f}"
        out.append(io.write_csv(run / f"{stem}.csv", rows, ["bin_lo", "bin_hi", "count"]))
        summary = {
            "mean": h.mean,
            "std": h.std,
            "eta": h.threshold,
            "tau": tau,
            "n_pairs": h.n_pairs,
            "frac_above_eta": h.frac_above,
        }
        (run / f"{stem}.json").write_text(json.dumps(summary, sort_keys=True), encoding="utf-8")
        out.append(run / f"{stem}.json")
    return summary


# --- experiment driver ---------------------------------------------------------


def run_seed(cfg: ExperimentConfig, seed: int, root: Path) -> list[dict]:
    """All stages for one seed; returns one result row per grid cell."""
    run = RunDir(root / f"seed_{seed}", cfg, seed)
    stage_synth(run)
    stage_sft(run)
    rows: list[dict] = []

    def add(policy, variant, size, model, metrics=None, eta=None, tau=None, sub=False, tag=None):
        ev = stage_eval(run, model, tag)
        rows.append(
            {
                "seed": seed,
                "policy": policy,
                "rm_variant": variant,
                "sample_size": size,
                "eta": eta,
                "tau": tau,
                "win_rate": ev["win_rate"],
                "win_rate_stderr": ev["stderr"],
                "dpo_reward_accuracy": metrics["reward_accuracy"] if metrics else None,
                "dpo_reward_margin": metrics["reward_margin"] if metrics else None,
                "subsampled": sub,
            }
        )

    if "sft-only" in cfg.policies:
        add("sft-only", "none", 0, io.load_checkpoint(run / "sft.ckpt", ToyLMParams), tag="sft-only")
    if "original-annotation" in cfg.policies:
        path = run.require("pref_data.jsonl")
        policy, m = stage_dpo(run, path, "original-annotation")
        add("original-annotation", "none", cfg.sizes.n_pref, policy, m, tag="original-annotation")

    needs_rm = set(cfg.policies) & {"proposed", "best-vs-worst", "best-vs-random", "rejection-sampling"}
    for variant in cfg.rm_variants if needs_rm else ():
        stage_rm(run, variant)
        stage_generate(run, variant)
        for tau in cfg.taus:
            stage_histogram(run, variant, max(cfg.etas), tau)
        if "proposed" in cfg.policies:
            for eta in cfg.etas:
                for tau in cfg.taus:
                    full_path, n_full = stage_pdgrs(run, variant, eta, tau)
                    for sub in cfg.size_controlled:
                        path, n = stage_subsample(run, variant, eta, tau) if sub else (full_path, n_full)
                        tag = pdgrs_tag(variant, eta, tau, sub)
                        if n == 0:
                            log.warning("%s: no accepted pairs; skipping DPO", tag)
                            rows.append(_empty_row(seed, variant, eta, tau, sub))
                            continue
                        policy, m = stage_dpo(run, path, tag)
                        add("proposed", variant, n, policy, m, eta, tau, sub, tag)
        for name in ("best-vs-worst", "best-vs-random"):
            if name in cfg.policies:
                path, n = stage_select(run, name, variant)
                tag = _tag(name, variant)
                policy, m = stage_dpo(run, path, tag)
                add(name, variant, n, policy, m, tag=tag)
        if "rejection-sampling" in cfg.policies:
            path, n = stage_select(run, "rejection-sampling", variant)
            tag = _tag("rejection-sampling", variant)
            add("rejection-sampling", variant, n, stage_rs_sft(run, path, tag), tag=tag)
    return rows


def _empty_row(seed, variant, eta, tau, sub) -> dict:
    return {
        "seed": seed,
        "policy": "proposed",
        "rm_variant": variant,
        "sample_size": 0,
        "eta": eta,
        "tau": tau,
        "win_rate": None,
        "win_rate_stderr": None,
        "dpo_reward_accuracy": None,
        "dpo_reward_margin": None,
        "subsampled": sub,
    }


def _key(row: dict) -> tuple:
    return (row["policy"], row["rm_variant"], row["eta"], row["tau"], row["subsampled"])


def aggregate(rows: Sequence[dict]) -> list[dict]:
    """Seed means per grid cell.

    With several seeds the stderr is that of the seed mean (sample std over
    seeds / sqrt(n)); with one seed it is the binomial stderr of that run.
    """
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault(_key(r), []).append(r)
    out = []
    for key, rs in groups.items():
        wins = np.array([r["win_rate"] for r in rs if r["win_rate"] is not None])

        def mean(col):
            vals = [r[col] for r in rs if r[col] is not None]
            return float(np.mean(vals)) if vals else None

        if len(wins) > 1:
            se = float(wins.std(ddof=1) / np.sqrt(len(wins)))
        else:
            se = mean("win_rate_stderr")
        out.append(
            {
                "policy": key[0],
                "rm_variant": key[1],
                "sample_size": mean("sample_size"),
                "eta": key[2],
                "tau": key[3],
                "win_rate": float(wins.mean()) if len(wins) else None,
                "win_rate_stderr": se,
                "dpo_reward_accuracy": mean("dpo_reward_accuracy"),
                "dpo_reward_margin": mean("dpo_reward_margin"),
                "subsampled": key[4],
                "n_seeds": len(rs),
            }
        )
    return out


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> tuple[list[dict], list[dict]]:
    """Run every seed, write ``results.csv`` and ``results_per_seed.csv``; return (aggregate, per-seed)."""
    root = Path(out_dir or cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(cfg.to_json(), encoding="utf-8")
    per_seed: list[dict] = []
    for seed in cfg.seeds:
        t0 = time.perf_counter()
        per_seed.extend(run_seed(cfg, seed, root))
        log.info("seed %d done in %.1fs", seed, time.perf_counter() - t0)
    table = aggregate(per_seed)
    io.write_csv(root / "results.csv", table, RESULT_COLUMNS)
    io.write_csv(root / "results_per_seed.csv", per_seed, ("seed",) + RESULT_COLUMNS[:-1])
    return table, per_seed
