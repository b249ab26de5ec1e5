"""Worst-environment risk plus environment-independence and causal-consistency penalties.

Every term has a ``*_grad`` twin returning partial derivatives with respect
to the activations it reads; :func:`total_objective` chains them through
:func:`acia.model.backprop`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .causal_space import FiniteSCM, observational_kernel
from .errors import EmptyBatch, NonFiniteObjective, ShapeError
from .intervention import interventional_kernel, point_intervention
from .model import AciaModel, add_grads, backprop, forward_cache

DEFAULT_BATCH = 32
DEFAULT_LAMBDA1 = 0.1 / np.sqrt(DEFAULT_BATCH)
DEFAULT_LAMBDA2 = 0.5 / np.sqrt(DEFAULT_BATCH)
LABEL_BINS = 8


# --- small helpers --------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def _softmax_backward(p: np.ndarray, d_p: np.ndarray) -> np.ndarray:
    return p * (d_p - (d_p * p).sum(axis=1, keepdims=True))


def _safe_unit(v: np.ndarray) -> tuple[float, np.ndarray]:
    """Norm of ``v`` and its gradient (zero at the origin)."""
    n = float(np.sqrt((v**2).sum()))
    return n, (v / n if n > 0.0 else np.zeros_like(v))


def is_regression(y: np.ndarray) -> bool:
    return np.asarray(y).ndim == 2


# --- task loss -------------------------------------------------------------------


def task_loss_grad(output: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy on logits (integer ``y``) or mean squared error
    (2-d float ``y``), with the gradient w.r.t. ``output``."""
    output = np.asarray(output, dtype=np.float64)
    y = np.asarray(y)
    n = output.shape[0]
    if n == 0:
        raise EmptyBatch("task loss of an empty batch")
    if is_regression(y):
        if y.shape != output.shape:
            raise ShapeError(f"outputs {output.shape} vs labels {y.shape}")
        diff = output - y
        return float((diff**2).sum(axis=1).mean()), 2.0 * diff / n
    if y.shape != (n,) or output.ndim != 2:
        raise ShapeError(f"outputs {output.shape} vs labels {y.shape}")
    if y.min() < 0 or y.max() >= output.shape[1]:
        raise ShapeError("label index outside the logit range")
    m = output.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(output - m).sum(axis=1))
    loss = float((lse - output[np.arange(n), y]).mean())
    g = softmax(output)
    g[np.arange(n), y] -= 1.0
    return loss, g / n


def task_loss(output: np.ndarray, y: np.ndarray, family: Optional[str] = None) -> float:
    if family == "ball-agent" and not is_regression(y):
        raise ShapeError("ball-agent labels are coordinate vectors")
    return task_loss_grad(output, y)[0]


# --- environment independence ------------------------------------------------------------


def label_groups(y: np.ndarray, bins: int = LABEL_BINS) -> list[np.ndarray]:
    """Discrete label codes.  Integer labels give one code vector; continuous
    labels give one quantile-binned code vector per coordinate."""
    y = np.asarray(y)
    if not is_regression(y):
        return [y.astype(np.int64)]
    out = []
    for c in range(y.shape[1]):
        edges = np.quantile(y[:, c], np.linspace(0, 1, bins + 1)[1:-1])
        out.append(np.searchsorted(edges, y[:, c], side="right"))
    return out


def _r1_single(z: np.ndarray, codes: np.ndarray, e: np.ndarray):
    n = len(codes)
    total, skipped = 0.0, 0
    grad = np.zeros_like(z)
    envs = np.unique(e)
    for k in np.unique(codes):
        in_k = codes == k
        w = in_k.sum() / n
        cells = []
        for env in envs:
            idx = np.flatnonzero(in_k & (e == env))
            if idx.size == 0:
                skipped += 1
                continue
            cells.append((idx, z[idx].mean(axis=0)))
        for a in range(len(cells)):
            for b in range(a + 1, len(cells)):
                (ia, ma), (ib, mb) = cells[a], cells[b]
                norm, unit = _safe_unit(ma - mb)
                total += w * norm
                grad[ia] += w * unit / ia.size
                grad[ib] -= w * unit / ib.size
    return total, grad, skipped


def r1_grad(z_high: np.ndarray, y: np.ndarray, e: np.ndarray) -> tuple[float, np.ndarray, int]:
    """Label-frequency weighted sum over env pairs of the L2 gap between
    label-conditional mean representations.  Returns ``(value, d_z, skipped_cells)``."""
    z_high = np.asarray(z_high, dtype=np.float64)
    e = np.asarray(e)
    groups = label_groups(y)
    val, grad, skipped = 0.0, np.zeros_like(z_high), 0
    for codes in groups:
        v, g, s = _r1_single(z_high, codes, e)
        val += v / len(groups)
        grad += g / len(groups)
        skipped += s
    return val, grad, skipped


def r1(z_high: np.ndarray, y: np.ndarray, e: np.ndarray) -> float:
    return r1_grad(z_high, y, e)[0]


# --- causal consistency ---------------------------------------------------------------


def _pred_dist(output: np.ndarray, regression: bool) -> np.ndarray:
    return output if regression else softmax(output)


def r2_simulation_grad(out: np.ndarray, out_int: np.ndarray, e: np.ndarray, regression: bool = False):
    """Sum over environments of the mean L2 distance between predictive
    distributions on originals and intervened counterparts.  Regression
    compares raw coordinate outputs.  Returns ``(value, d_out, d_out_int)``."""
    p, q = _pred_dist(out, regression), _pred_dist(out_int, regression)
    diff = p - q
    norms = np.sqrt((diff**2).sum(axis=1))
    safe = np.where(norms > 0, norms, 1.0)
    unit = np.where(norms[:, None] > 0, diff / safe[:, None], 0.0)
    val = 0.0
    weights = np.zeros(len(e))
    for env in np.unique(e):
        m = e == env
        val += float(norms[m].mean())
        weights[m] = 1.0 / m.sum()
    d_p = unit * weights[:, None]
    if regression:
        return val, d_p, -d_p
    return val, _softmax_backward(p, d_p), _softmax_backward(q, -d_p)


def r2_simulation(out: np.ndarray, out_int: np.ndarray, e: np.ndarray, regression: bool = False) -> float:
    return r2_simulation_grad(out, out_int, e, regression)[0]


def interventional_expectation(scm: FiniteSCM, do_label=1) -> dict:
    """Per environment, the mean observation under a hard intervention on the label."""
    per_env = observational_kernel(scm, tuple(scm.env_support), per_env=True)
    done = interventional_kernel(per_env, point_intervention("Y", scm.n_labels, scm.label_index(do_label)))
    values = np.asarray(scm.obs_support, dtype=np.float64)
    return {env: float(done.row({"e": env}) @ values) for env in scm.env_support}


def r2_exact_grad(out: np.ndarray, e: np.ndarray, reference: dict, positive_class: int = 1):
    """Sum over environments of ``|mean predicted P(y=positive) - reference[env]|``."""
    p = softmax(out)
    d_p = np.zeros_like(p)
    val = 0.0
    for env in np.unique(e):
        m = e == env
        gap = float(p[m, positive_class].mean()) - reference[env.item() if hasattr(env, "item") else env]
        val += abs(gap)
        d_p[m, positive_class] = np.sign(gap) / m.sum()
    return val, _softmax_backward(p, d_p)


def r2_exact(out: np.ndarray, e: np.ndarray, reference: dict) -> float:
    return r2_exact_grad(out, e, reference)[0]


# --- composite ----------------------------------------------------------------------


@dataclass
class EnvBatch:
    env: int
    x: np.ndarray
    y: np.ndarray
    x_intervened: Optional[np.ndarray] = None


@dataclass
class ObjectiveBreakdown:
    per_env_risk: dict
    worst_env: int
    r1: float
    r2: float
    total: float
    lambda1: float
    lambda2: float
    r2_mode: str = "simulation"
    r1_skipped_cells: int = 0
    step: Optional[int] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "per_env_risk": {str(k): v for k, v in self.per_env_risk.items()},
            "worst_env": self.worst_env,
            "r1": self.r1,
            "r2": self.r2,
            "total": self.total,
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "r2_mode": self.r2_mode,
            "r1_skipped_cells": self.r1_skipped_cells,
        }
        if self.step is not None:
            d["step"] = self.step
        d.update(self.extra)
        return d


def worst_environment(risks: dict) -> int:
    """Hard max; ties go to the lowest environment id."""
    best = max(risks.values())
    return min(k for k, v in risks.items() if v == best)


def total_objective(
    model: AciaModel,
    env_batches: Sequence[EnvBatch],
    lambda1: float = DEFAULT_LAMBDA1,
    lambda2: float = DEFAULT_LAMBDA2,
    r2_mode: str = "simulation",
    reference: Optional[dict] = None,
    with_grad: bool = True,
) -> tuple[ObjectiveBreakdown, Optional[AciaModel]]:
    """Worst-env risk + lambda1 * R1 + lambda2 * R2 and (optionally) its gradient."""
    batches = sorted((b for b in env_batches if len(b.x)), key=lambda b: b.env)
    if not batches:
        raise EmptyBatch("no non-empty environment batch")
    x = np.concatenate([np.asarray(b.x, np.float64) for b in batches])
    y = np.concatenate([np.asarray(b.y) for b in batches])
    e = np.concatenate([np.full(len(b.x), b.env) for b in batches])
    regression = is_regression(y)
    cache = forward_cache(model, x)
    out = cache.output

    risks, risk_grads, offset = {}, {}, 0
    for b in batches:
        sl = slice(offset, offset + len(b.x))
        risks[b.env], risk_grads[b.env] = task_loss_grad(out[sl], y[sl])
        offset += len(b.x)
    if not all(np.isfinite(r) for r in risks.values()):
        raise NonFiniteObjective(f"environment risks {risks}")
    worst = worst_environment(risks)
    d_out = np.zeros_like(out)
    offset = 0
    for b in batches:
        if b.env == worst:
            d_out[offset : offset + len(b.x)] = risk_grads[b.env]
        offset += len(b.x)

    r1_val, d_high, skipped = r1_grad(cache.z_high, y, e)
    d_high = lambda1 * d_high

    r2_val, cache_int, d_out_int = 0.0, None, None
    if r2_mode == "exact":
        if reference is None:
            raise ValueError("exact mode needs an interventional reference")
        r2_val, g = r2_exact_grad(out, e, reference)
        d_out = d_out + lambda2 * g
    elif r2_mode == "simulation":
        if all(b.x_intervened is not None for b in batches):
            xi = np.concatenate([np.asarray(b.x_intervened, np.float64) for b in batches])
            cache_int = forward_cache(model, xi)
            r2_val, g, gi = r2_simulation_grad(out, cache_int.output, e, regression)
            d_out = d_out + lambda2 * g
            d_out_int = lambda2 * gi
    elif r2_mode != "off":
        raise ValueError(f"unknown R2 mode {r2_mode!r}")

    total = risks[worst] + lambda1 * r1_val + lambda2 * r2_val
    if not np.isfinite(total):
        raise NonFiniteObjective(f"objective is {total}")
    br = ObjectiveBreakdown(risks, int(worst), r1_val, r2_val, float(total), float(lambda1), float(lambda2), r2_mode, skipped)
    if not with_grad:
        return br, None
    grads = backprop(model, cache, d_output=d_out, d_high=d_high)
    if cache_int is not None:
        grads = add_grads(grads, backprop(model, cache_int, d_output=d_out_int))
    return br, grads
