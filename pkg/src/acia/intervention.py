"""Interventional kernels and data-level intervention operators."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage

from ._tol import DEPENDENCE_TOL, EXACT_TOL
from .causal_space import CausalKernel, FiniteSCM, build_finite_scm, observational_kernel, toy_scm
from .errors import AlphaOutOfRange, FamilyMismatch, NormalizationError, SupportMismatch

FAMILIES = ("toy-scm", "colored-digit", "rotated-digit", "ball-agent")


@dataclass(frozen=True, eq=False)
class Intervention:
    """Kernel-level intervention on ``Y`` or ``X``.

    Hard interventions carry ``hard_dist`` over the target's support; soft ones
    carry a blend strength ``alpha`` (paired with a hard distribution) or a
    general conditional table ``conditional[i, j] = Q({j} | omega'_i)``.
    """

    target: str
    kind: str
    hard_dist: Optional[np.ndarray] = None
    alpha: Optional[float] = None
    conditional: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.target not in ("Y", "X"):
            raise SupportMismatch(f"unknown intervention target {self.target!r}")
        if self.kind not in ("hard", "soft"):
            raise ValueError(f"unknown intervention kind {self.kind!r}")
        if self.hard_dist is not None:
            q = np.asarray(self.hard_dist, dtype=float)
            object.__setattr__(self, "hard_dist", q)
            if np.any(q < 0) or abs(q.sum() - 1.0) > EXACT_TOL:
                raise NormalizationError(f"hard_dist {q.tolist()} is not a distribution")
        if self.alpha is not None and not 0.0 <= self.alpha <= 1.0:
            raise AlphaOutOfRange(f"alpha={self.alpha} outside [0, 1]")
        if self.kind == "hard" and self.hard_dist is None:
            raise ValueError("hard interventions need hard_dist")
        if self.kind == "soft" and self.conditional is None and (self.alpha is None or self.hard_dist is None):
            raise ValueError("soft interventions need alpha with hard_dist, or a conditional table")

    @classmethod
    def from_dict(cls, d: dict) -> "Intervention":
        cond = d.get("conditional")
        return cls(
            target=d["target"],
            kind=d["kind"],
            hard_dist=None if d.get("hard_dist") is None else np.asarray(d["hard_dist"], float),
            alpha=d.get("alpha"),
            conditional=None if cond is None else np.asarray(cond, float),
        )

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "kind": self.kind,
            "alpha": self.alpha,
            "hard_dist": None if self.hard_dist is None else self.hard_dist.tolist(),
        }


def point_intervention(target: str, support_size: int, index: int) -> Intervention:
    q = np.zeros(support_size)
    q[index] = 1.0
    return Intervention(target, "hard", hard_dist=q)


def _label_order(base: CausalKernel) -> list:
    pos = base.components.index("y")
    seen = []
    for key in base.keys:
        if key[pos] not in seen:
            seen.append(key[pos])
    return seen


def _do_label(base: CausalKernel, q: np.ndarray) -> CausalKernel:
    if "y" not in base.components:
        raise SupportMismatch("do(Y) needs a kernel that conditions on the label")
    labels = _label_order(base)
    if len(q) != len(labels):
        raise SupportMismatch(f"intervention over {len(q)} labels, kernel has {len(labels)}")
    pos = base.components.index("y")
    rest = tuple(c for i, c in enumerate(base.components) if i != pos)
    rows: dict = {}
    for key, row in zip(base.keys, base.table):
        r = key[:pos] + key[pos + 1 :]
        weight = q[labels.index(key[pos])]
        if weight == 0.0:
            rows.setdefault(r, np.zeros(base.n_outcomes))
            continue
        rows[r] = rows.get(r, np.zeros(base.n_outcomes)) + weight * row
    keys = tuple(rows)
    return CausalKernel(base.S, rest, keys, np.array([rows[k] for k in keys]), base.outcomes, base.target)


def interventional_kernel(base: CausalKernel, q: Intervention) -> CausalKernel:
    """Finite-sum interventional kernel ``sum_w' K(w, {w'}) Q(A | w')``.

    Targeting the kernel's own outcome variable pushes each row through
    ``Q``; targeting ``Y`` on an ``X`` kernel averages the label-conditioned
    rows under the intervention distribution.
    """
    if q.target == "Y" and base.target == "X":
        if q.kind == "hard":
            return _do_label(base, q.hard_dist)
        if q.conditional is not None:
            raise SupportMismatch("soft label interventions use the alpha blend only")
        return soft_blend(base, _do_label(base, q.hard_dist), q.alpha)
    if q.target != base.target:
        raise SupportMismatch(f"intervention on {q.target} cannot act on a kernel over {base.target}")
    n = base.n_outcomes
    if q.kind == "hard":
        if len(q.hard_dist) != n:
            raise SupportMismatch(f"hard_dist has {len(q.hard_dist)} outcomes, kernel has {n}")
        # Constant Q(A | w') integrates to Q(A) because every row has unit mass.
        table = np.tile(q.hard_dist, (len(base.keys), 1))
        return CausalKernel(base.S, base.components, base.keys, table, base.outcomes, base.target, base.defined)
    if q.conditional is not None:
        Q = np.asarray(q.conditional, float)
        if Q.shape != (n, n):
            raise SupportMismatch(f"conditional table has shape {Q.shape}, expected {(n, n)}")
        table = base.table @ Q
        return CausalKernel(base.S, base.components, base.keys, table, base.outcomes, base.target, base.defined)
    hard = interventional_kernel(base, Intervention(q.target, "hard", hard_dist=q.hard_dist))
    return soft_blend(base, hard, q.alpha)


def soft_blend(base: CausalKernel, hard_done: CausalKernel, alpha: float) -> CausalKernel:
    """Imperfect intervention ``(1 - alpha) K + alpha K^do``, aligned on ``base``'s rows."""
    if not 0.0 <= alpha <= 1.0:
        raise AlphaOutOfRange(f"alpha={alpha} outside [0, 1]")
    if base.outcomes != hard_done.outcomes:
        raise SupportMismatch("kernels range over different outcomes")
    if alpha == 0.0:
        return base
    rows = []
    for key, row in zip(base.keys, base.table):
        do_row = hard_done.row(dict(zip(base.components, key)))
        rows.append(do_row.copy() if alpha == 1.0 else (1.0 - alpha) * row + alpha * do_row)
    return CausalKernel(base.S, base.components, base.keys, np.array(rows), base.outcomes, base.target, base.defined)


@dataclass
class InvarianceReport:
    y_shift_under_do_x: float
    x_shift_under_do_y: float
    verdict: bool
    details: dict

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _label_given_env(joint: np.ndarray) -> np.ndarray:
    """``P(Y | E)`` from a ``(y, e, x)`` joint, shape ``(n_envs, n_labels)``."""
    ye = joint.sum(axis=2)
    return (ye / ye.sum(axis=0, keepdims=True)).T


def verify_invariance_criteria(scm: FiniteSCM, S) -> InvarianceReport:
    """Check the asymmetric response to interventions on ``X`` and ``Y``.

    ``do(X)`` is applied by truncated factorisation of the joint (the ``X``
    mechanism is replaced, the roots are kept); ``do(Y)`` goes through
    :func:`interventional_kernel` on the per-environment observational kernel.
    Shifts are maxima over every event, i.e. total-variation distances, over
    every point intervention and every environment in ``S``.
    """
    S = list(S)
    e_idx = [scm.env_index(e) for e in S]
    obs_y = _label_given_env(scm.joint())[e_idx]
    y_shift = 0.0
    for k in range(scm.n_obs):
        q = np.zeros(scm.n_obs)
        q[k] = 1.0
        joint_do = scm.p_label[:, None, None] * scm.p_env[None, :, None] * q[None, None, :]
        do_y = _label_given_env(joint_do)[e_idx]
        y_shift = max(y_shift, float(0.5 * np.abs(do_y - obs_y).sum(axis=1).max()))

    per_env = observational_kernel(scm, S, per_env=True)
    observational_x = _do_label(per_env, scm.p_label)
    x_shift = 0.0
    details: dict = {"observational_x": {}, "do_y": {}}
    for i, y in enumerate(scm.label_support):
        done = interventional_kernel(per_env, point_intervention("Y", scm.n_labels, i))
        for e in S:
            a = done.row({"e": e})
            b = observational_x.row({"e": e})
            x_shift = max(x_shift, float(0.5 * np.abs(a - b).sum()))
            details["do_y"][f"y={y},e={e}"] = a.tolist()
            details["observational_x"][f"e={e}"] = b.tolist()
    verdict = y_shift <= EXACT_TOL and x_shift > DEPENDENCE_TOL
    return InvarianceReport(y_shift, x_shift, verdict, details)


class DataIntervention(BaseModel):
    """Sample-level intervention operator for one dataset family.

    ``alpha`` is the intervention strength: 0 is the identity, 1 the hard
    version of the operator.
    """

    model_config = ConfigDict(extra="forbid")

    family: Literal["toy-scm", "colored-digit", "rotated-digit", "ball-agent"]
    kind: Literal["hard", "soft"] = "hard"
    alpha: float = Field(1.0, ge=0.0, le=1.0)
    p_red: float = Field(0.5, ge=0.0, le=1.0)
    max_angle: float = Field(45.0, ge=0.0, le=90.0)
    shift: float = Field(2.0, ge=0.0)
    n_balls: int = Field(4, ge=1)
    intervention_prob: float = Field(0.5, ge=0.0, le=1.0)
    do_label: int = 1
    scm: Optional[dict] = None

    def strength(self) -> float:
        return 1.0 if self.kind == "hard" else self.alpha


def _recolor(X, spec, rng):
    d = X.shape[1] // 2
    red, green = X[:, :d], X[:, d:]
    content = red + green
    hit = rng.random(len(X)) < spec.strength()
    to_red = rng.random(len(X)) < spec.p_red
    out = X.copy()
    out[hit & to_red, :d] = content[hit & to_red]
    out[hit & to_red, d:] = 0
    out[hit & ~to_red, :d] = 0
    out[hit & ~to_red, d:] = content[hit & ~to_red]
    return out


def _rerotate(X, spec, rng):
    g = int(round(np.sqrt(X.shape[1])))
    if g * g != X.shape[1]:
        raise FamilyMismatch("rotated-digit features must be square grids")
    angles = spec.strength() * rng.uniform(-spec.max_angle, spec.max_angle, size=len(X))
    out = np.empty_like(X)
    for i, (row, a) in enumerate(zip(X, angles)):
        out[i] = ndimage.rotate(row.reshape(g, g), a, reshape=False, order=1, mode="constant").ravel()
    return out


def _shift_balls(X, spec, rng):
    per_ball = X.shape[1] // spec.n_balls
    g = int(round(np.sqrt(per_ball)))
    if g * g * spec.n_balls != X.shape[1]:
        raise FamilyMismatch("ball-agent features must be n_balls square channels")
    mask = rng.random((len(X), spec.n_balls)) < spec.intervention_prob
    theta = rng.uniform(0, 2 * np.pi, size=(len(X), spec.n_balls))
    out = X.copy()
    for i, j in zip(*np.nonzero(mask)):
        delta = spec.strength() * spec.shift * np.array([np.cos(theta[i, j]), np.sin(theta[i, j])])
        chan = X[i, j * per_ball : (j + 1) * per_ball].reshape(g, g)
        out[i, j * per_ball : (j + 1) * per_ball] = ndimage.shift(chan, delta, order=1, mode="constant").ravel()
    return out


def _resample_toy(X, spec, rng, envs):
    if envs is None:
        raise FamilyMismatch("toy-scm interventions need the environment of each sample")
    scm = toy_scm() if spec.scm is None else build_finite_scm(spec.scm)
    yi = scm.label_index(spec.do_label)
    hit = rng.random(len(X)) < spec.strength()
    u = rng.random(len(X))
    out = X.copy()
    support = np.asarray(scm.obs_support, dtype=X.dtype)
    for j, e in enumerate(scm.env_support):
        sel = hit & (np.asarray(envs) == e)
        cdf = np.cumsum(scm.p_obs_given[yi, j])
        k = np.minimum(np.searchsorted(cdf, u[sel], side="right"), len(cdf) - 1)
        out[sel, 0] = support[k]
    return out


_OPERATORS = {
    "colored-digit": _recolor,
    "rotated-digit": _rerotate,
    "ball-agent": _shift_balls,
}


def intervene_batch(X: np.ndarray, spec: DataIntervention, rng: np.random.Generator, family: str | None = None, envs=None):
    """Apply ``spec`` to every row of ``X``; rows are feature vectors."""
    if family is not None and family != spec.family:
        raise FamilyMismatch(f"intervention for {spec.family} applied to {family} data")
    X = np.asarray(X)
    if spec.strength() == 0.0:
        return X.copy()
    if spec.family == "toy-scm":
        return _resample_toy(X, spec, rng, envs)
    return _OPERATORS[spec.family](X, spec, rng)


def intervene_sample(x: np.ndarray, spec: DataIntervention, rng: np.random.Generator, family: str | None = None, env=None):
    """Counterpart of a single sample under the data-level intervention."""
    envs = None if env is None else np.array([env])
    return intervene_batch(np.asarray(x)[None, :], spec, rng, family=family, envs=envs)[0]
