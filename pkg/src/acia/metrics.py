"""Accuracy, environment independence (EI), low-level invariance (LLI) and
intervention robustness (IR)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .datasets import EnvironmentDataset
from .errors import EmptyDataset, FamilyMismatch, SingleEnvironment
from .intervention import DataIntervention, intervene_batch
from .model import AciaModel, forward
from .objective import label_groups, softmax

EI_MAX_DIMS = 8
IR_BINS = 10


def _check_model(model: AciaModel, ds: EnvironmentDataset) -> None:
    if len(ds) == 0:
        raise EmptyDataset("metrics of an empty dataset")
    if model.arch.input_dim != ds.dim:
        raise FamilyMismatch(f"model expects {model.arch.input_dim} features, dataset has {ds.dim}")
    if ds.is_regression:
        if model.arch.out_dim != ds.labels.shape[1]:
            raise FamilyMismatch("regression head size differs from label size")
    elif ds.labels.max() >= model.arch.out_dim:
        raise FamilyMismatch("dataset has labels beyond the classifier head")


def position_error(out: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample mean Euclidean distance between predicted and true (x, y) pairs."""
    d = (out - y).reshape(len(y), -1, 2)
    return np.sqrt((d**2).sum(axis=2)).mean(axis=1)


def accuracy_from_outputs(out: np.ndarray, y: np.ndarray) -> tuple[float, Optional[float]]:
    """``(accuracy, raw position error or None)``.  Regression accuracy is
    ``1 - mean position error`` clipped to [0, 1]."""
    if len(y) == 0:
        raise EmptyDataset("accuracy of an empty dataset")
    if np.asarray(y).ndim == 2:
        err = float(position_error(out, y).mean())
        return float(np.clip(1.0 - err, 0.0, 1.0)), err
    return float((out.argmax(axis=1) == y).mean()), None


def accuracy(model: AciaModel, ds: EnvironmentDataset) -> float:
    _check_model(model, ds)
    return accuracy_from_outputs(forward(model, ds.features)[2], ds.labels)[0]


# --- EI -----------------------------------------------------------------------------


def binary_codes(z: np.ndarray, max_dims: int = EI_MAX_DIMS) -> tuple[np.ndarray, list[int]]:
    """Median-split bits on the highest-variance dims, packed into integers."""
    z = np.asarray(z, dtype=np.float64)
    var = z.var(axis=0)
    dims = sorted(np.argsort(-var, kind="stable")[:max_dims].tolist())
    code = np.zeros(len(z), dtype=np.int64)
    for bit, j in enumerate(dims):
        col = z[:, j]
        med = np.median(col)
        b = col > med
        if not b.any() or b.all():
            b = col >= med
            if b.all():
                b = np.zeros(len(col), dtype=bool)
        code |= b.astype(np.int64) << bit
    return code, dims


def mutual_information(a: np.ndarray, b: np.ndarray) -> float:
    """Plug-in mutual information (nats) between two discrete sequences."""
    n = len(a)
    if n == 0:
        return 0.0
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1.0)
    joint /= n
    pa, pb = joint.sum(axis=1, keepdims=True), joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum())


def conditional_mi(code: np.ndarray, e: np.ndarray, labels: np.ndarray) -> float:
    """sum_k P(label=k) I(code; e | label=k)."""
    total = 0.0
    n = len(labels)
    for k in np.unique(labels):
        m = labels == k
        total += m.sum() / n * mutual_information(code[m], e[m])
    return total


def env_independence(z_high: np.ndarray, y: np.ndarray, e: np.ndarray, max_dims: int = EI_MAX_DIMS) -> float:
    e = np.asarray(e)
    if len(np.unique(e)) < 2:
        raise SingleEnvironment("environment independence needs at least two environments")
    code, _ = binary_codes(z_high, max_dims)
    groups = label_groups(y)
    return max(0.0, sum(conditional_mi(code, e, g) for g in groups) / len(groups))


# --- LLI ----------------------------------------------------------------------------


def low_level_invariance(z_low: np.ndarray, e: np.ndarray, mode: str = "between") -> float:
    """``between``: variance across environments of the per-env mean, averaged
    over dims.  ``pooled``: mean within-environment variance."""
    z_low = np.asarray(z_low, dtype=np.float64)
    e = np.asarray(e)
    envs = np.unique(e)
    if len(envs) < 2:
        raise SingleEnvironment("low-level invariance needs at least two environments")
    if mode == "between":
        means = np.stack([z_low[e == env].mean(axis=0) for env in envs])
        return float(means.var(axis=0).mean())
    if mode == "pooled":
        return float(np.mean([z_low[e == env].var(axis=0).mean() for env in envs]))
    raise ValueError(f"unknown LLI mode {mode!r}")


# --- IR -----------------------------------------------------------------------------


def confidence(out: np.ndarray, y: Optional[np.ndarray] = None, regression: bool = False) -> np.ndarray:
    """Max softmax probability; for regression ``clip(1 - position error, 0, 1)``."""
    if regression:
        return np.clip(1.0 - position_error(out, y), 0.0, 1.0)
    return softmax(out).max(axis=1)


def smoothed_histogram(values: np.ndarray, bins: int = IR_BINS) -> np.ndarray:
    counts, _ = np.histogram(np.clip(values, 0.0, 1.0), bins=bins, range=(0.0, 1.0))
    counts = counts + 1.0
    return counts / counts.sum()


def kl_from_confidences(original: np.ndarray, intervened: np.ndarray, bins: int = IR_BINS) -> float:
    """KL(original || intervened) between add-one smoothed confidence histograms."""
    p, q = smoothed_histogram(original, bins), smoothed_histogram(intervened, bins)
    return max(0.0, float((p * np.log(p / q)).sum()))


def intervention_robustness(
    model: AciaModel, ds: EnvironmentDataset, spec: DataIntervention, seed: int = 0, bins: int = IR_BINS
) -> float:
    _check_model(model, ds)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x12]))
    xi = intervene_batch(ds.features, spec, rng, family=ds.family, envs=ds.envs)
    out = forward(model, ds.features)[2]
    out_i = forward(model, xi)[2]
    reg = ds.is_regression
    return kl_from_confidences(confidence(out, ds.labels, reg), confidence(out_i, ds.labels, reg), bins)


# --- report -------------------------------------------------------------------------


@dataclass
class MetricsReport:
    accuracy: float
    ei: float
    lli: float
    ir: float
    n: int
    family: str
    binning: dict
    position_error: Optional[float] = None
    per_env: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        """Fixed-schema JSON view."""
        return {
            "accuracy": self.accuracy,
            "ei": self.ei,
            "lli": self.lli,
            "ir": self.ir,
            "n": self.n,
            "family": self.family,
            "binning": self.binning,
        }


def compute_metrics(
    model: AciaModel,
    ds: EnvironmentDataset,
    spec: Optional[DataIntervention],
    seed: int = 0,
    lli_mode: str = "between",
) -> MetricsReport:
    """All four metrics on ``ds``.  EI and LLI need two or more environments;
    with one environment they are reported as NaN."""
    _check_model(model, ds)
    z_low, z_high, out = forward(model, ds.features)
    acc, err = accuracy_from_outputs(out, ds.labels)
    multi = len(ds.env_ids) >= 2
    ei = env_independence(z_high, ds.labels, ds.envs) if multi else float("nan")
    lli = low_level_invariance(z_low, ds.envs, lli_mode) if multi else float("nan")
    ir = intervention_robustness(model, ds, spec, seed) if spec is not None else float("nan")
    binning = {
        "ei_code": "median-split",
        "ei_max_dims": EI_MAX_DIMS,
        "ir_bins": IR_BINS,
        "ir_smoothing": "add-one",
        "ir_direction": "KL(original || intervened)",
        "lli_mode": lli_mode,
    }
    if ds.is_regression:
        binning["label_bins_per_coordinate"] = len(np.unique(label_groups(ds.labels)[0]))
    return MetricsReport(acc, ei, lli, ir, len(ds), ds.family, binning, err)
