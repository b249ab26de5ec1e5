"""Joint training of encoder, abstraction and head under the worst-environment objective."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .causal_space import build_finite_scm, toy_scm
from .datasets import EnvironmentDataset, concat, hash_split
from .errors import ConfigError, DivergenceDetected, EmptyDataset, NonFiniteObjective, SingleEnvironment
from .intervention import DataIntervention, intervene_batch
from .metrics import MetricsReport, accuracy_from_outputs, compute_metrics
from .model import AciaModel, Arch, default_arch, forward, init_model
from .objective import DEFAULT_LAMBDA1, DEFAULT_LAMBDA2, EnvBatch, ObjectiveBreakdown, interventional_expectation, total_objective


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    batch_size: int = Field(32, ge=2)
    learning_rate: float = Field(1e-4, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    max_epochs: int = Field(10, ge=0)
    early_stop_patience: Optional[int] = Field(None, ge=1)
    lambda1: float = Field(DEFAULT_LAMBDA1, ge=0.0)
    lambda2: float = Field(DEFAULT_LAMBDA2, ge=0.0)
    seed: int = Field(0, ge=0)
    eval_every: int = Field(0, ge=0)
    r2_mode: Literal["simulation", "exact", "off"] = "simulation"
    encoder: Optional[list[int]] = None
    abstract_dim: Optional[int] = Field(None, ge=1)


@dataclass
class TrainHistory:
    steps: list[ObjectiveBreakdown] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)
    stopped_early: bool = False
    best_step: Optional[int] = None

    def objective_trace(self) -> np.ndarray:
        return np.array([b.total for b in self.steps])

    def jsonl(self) -> str:
        """One breakdown per line; evaluation records are interleaved after their step."""
        lines = []
        evals = {ev["step"]: ev for ev in self.evals}
        for b in self.steps:
            lines.append(json.dumps(b.to_dict(), sort_keys=True))
            if b.step in evals:
                lines.append(json.dumps(evals[b.step], sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")


class Adam:
    def __init__(self, n: int, lr: float, beta1: float, beta2: float, eps: float):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps

    def update(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad**2
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class EnvSampler:
    """Endless per-environment stream of shuffled indices (reshuffled on each pass)."""

    def __init__(self, sizes: dict, per_env: int, seed: int):
        self.sizes, self.per_env = sizes, per_env
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        self.queues = {e: np.zeros(0, dtype=np.int64) for e in sizes}

    def steps_per_epoch(self) -> int:
        return int(np.ceil(max(self.sizes.values()) / self.per_env))

    def next(self) -> dict:
        out = {}
        for e in sorted(self.sizes):
            q = self.queues[e]
            while len(q) < self.per_env:
                q = np.concatenate([q, self.rng.permutation(self.sizes[e])])
            out[e], self.queues[e] = q[: self.per_env], q[self.per_env :]
        return out


def split_envs(datasets) -> dict[int, EnvironmentDataset]:
    if isinstance(datasets, EnvironmentDataset):
        datasets = [datasets]
    merged: dict[int, list] = {}
    for ds in datasets:
        for e, part in ds.by_env().items():
            merged.setdefault(e, []).append(part)
    return {e: concat(parts) for e, parts in sorted(merged.items())}


def arch_for(cfg: TrainConfig, ds: EnvironmentDataset) -> Arch:
    out_dim = ds.labels.shape[1] if ds.is_regression else int(ds.gen_config.get("n_classes", ds.labels.max() + 1))
    if ds.family == "toy-scm":
        out_dim = 2
    arch = default_arch(ds.family, ds.dim, out_dim)
    if cfg.encoder is not None:
        arch = Arch(arch.input_dim, tuple(cfg.encoder), arch.abstract_dim, arch.out_dim)
    if cfg.abstract_dim is not None:
        arch = Arch(arch.input_dim, arch.encoder, cfg.abstract_dim, arch.out_dim)
    return arch


def _reference(spec: Optional[DataIntervention]) -> dict:
    scm = toy_scm() if spec is None or spec.scm is None else build_finite_scm(spec.scm)
    return interventional_expectation(scm, 1 if spec is None else spec.do_label)


def worst_env_risk(model: AciaModel, envs: dict[int, EnvironmentDataset]) -> float:
    batches = [EnvBatch(e, d.features, d.labels) for e, d in envs.items() if len(d)]
    br, _ = total_objective(model, batches, 0.0, 0.0, r2_mode="off", with_grad=False)
    return br.total


def train(
    cfg: TrainConfig,
    datasets,
    spec: Optional[DataIntervention] = None,
    model: Optional[AciaModel] = None,
) -> tuple[AciaModel, TrainHistory]:
    """Adam on worst-env risk + lambda1 * R1 + lambda2 * R2, one equal-size
    sub-batch per environment per step."""
    envs = split_envs(datasets)
    if len(envs) < 2:
        raise SingleEnvironment("training needs at least two environments")
    if any(len(d) == 0 for d in envs.values()):
        raise EmptyDataset("an environment has no samples")
    if cfg.batch_size < 2 * len(envs):
        raise ConfigError(f"batch_size {cfg.batch_size} < 2 x {len(envs)} environments")
    r2_mode = cfg.r2_mode if cfg.lambda2 > 0 else "off"
    if r2_mode == "simulation" and spec is None:
        raise ConfigError("simulation-mode R2 needs an intervention spec")
    first = next(iter(envs.values()))
    if spec is not None and spec.family != first.family:
        raise ConfigError(f"intervention family {spec.family} does not match data family {first.family}")

    held = None
    if cfg.early_stop_patience:
        pairs = {e: hash_split(d) for e, d in envs.items()}
        envs = {e: p[0] for e, p in pairs.items()}
        held = {e: p[1] for e, p in pairs.items()}

    arch = arch_for(cfg, first)
    model = model or init_model(arch, cfg.seed)
    reference = _reference(spec) if r2_mode == "exact" else None
    per_env = cfg.batch_size // len(envs)
    sampler = EnvSampler({e: len(d) for e, d in envs.items()}, per_env, cfg.seed)
    int_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    opt = Adam(model.n_params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    params = model.flat()
    history = TrainHistory()
    total_steps = cfg.max_epochs * sampler.steps_per_epoch()
    eval_every = cfg.eval_every or sampler.steps_per_epoch()
    best = (np.inf, params.copy(), 0)
    bad_evals = 0

    for step in range(total_steps):
        t0 = time.perf_counter()
        idx = sampler.next()
        batches = []
        for e, ii in idx.items():
            d = envs[e]
            x = d.features[ii]
            xi = None
            if r2_mode == "simulation":
                xi = intervene_batch(x, spec, int_rng, family=d.family, envs=d.envs[ii])
            batches.append(EnvBatch(e, x, d.labels[ii], xi))
        try:
            br, grads = total_objective(model, batches, cfg.lambda1, cfg.lambda2, r2_mode, reference)
        except NonFiniteObjective as exc:
            raise DivergenceDetected(f"step {step}: {exc}") from exc
        params = opt.update(params, grads.flat())
        if not np.all(np.isfinite(params)):
            raise DivergenceDetected(f"step {step}: non-finite parameters")
        model = model.with_flat(params)
        model.step = step + 1
        br.step = step
        history.steps.append(br)
        history.wall_clock.append(time.perf_counter() - t0)

        if held is not None and (step + 1) % eval_every == 0:
            risk = worst_env_risk(model, held)
            history.evals.append({"step": step, "heldout_worst_env_risk": risk})
            if risk < best[0]:
                best, bad_evals = (risk, params.copy(), step + 1), 0
            else:
                bad_evals += 1
                if bad_evals >= cfg.early_stop_patience:
                    history.stopped_early = True
                    break

    if held is not None and np.isfinite(best[0]):
        model = model.with_flat(best[1])
        model.step = best[2]
        history.best_step = best[2]
    return model, history


def evaluate(
    model: AciaModel, dataset: EnvironmentDataset, spec: Optional[DataIntervention] = None, seed: int = 0, lli_mode: str = "between"
) -> MetricsReport:
    """Metrics report plus per-environment accuracy and counts."""
    report = compute_metrics(model, dataset, spec, seed, lli_mode)
    for e, part in dataset.by_env().items():
        acc, err = accuracy_from_outputs(forward(model, part.features)[2], part.labels)
        entry = {"accuracy": acc, "n": len(part)}
        if err is not None:
            entry["position_error"] = err
        report.per_env[str(e)] = entry
    return report


def smoothed(trace: Sequence[float], window: int = 50) -> np.ndarray:
    """Trailing moving average (valid part only)."""
    trace = np.asarray(trace, dtype=np.float64)
    if len(trace) < window:
        return trace.copy()
    c = np.cumsum(np.concatenate([[0.0], trace]))
    return (c[window:] - c[:-window]) / window


def trend_non_increasing(trace: Sequence[float], window: int = 50, fraction: float = 0.8, segments: int = 8) -> bool:
    """Convergence diagnostic on the smoothed objective.

    The final ``fraction`` of the smoothed trace is cut into ``segments`` equal
    blocks; the block means must not increase.  Per-step comparisons are
    dominated by minibatch noise, block means are not.
    """
    sm = smoothed(trace, window)
    tail = sm[int(round((1.0 - fraction) * len(sm))) :]
    if len(tail) < segments:
        return bool(np.all(np.diff(tail) <= 0))
    means = np.array([b.mean() for b in np.array_split(tail, segments)])
    return bool(np.all(np.diff(means) <= 0))
