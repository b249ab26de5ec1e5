"""Causal spaces, product spaces and causal kernels on finite sample spaces.

Every sigma-algebra here is the power set of a finite support, so an event is
just a set of outcome indices and a kernel is a row-stochastic table.  All
quantities are exact float64 tables; nothing is sampled except in
:func:`empirical_kernel`.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from ._tol import EXACT_TOL, NORMALIZATION_TOL
from .errors import (
    DuplicateEnvironmentId,
    EmptyCell,
    EmptyConditioningSet,
    NormalizationError,
    ShapeError,
    UnknownOutcome,
)

Event = Iterable[int]


def _check_distribution(p: np.ndarray, what: str) -> None:
    if np.any(~np.isfinite(p)) or np.any(p < -NORMALIZATION_TOL) or np.any(p > 1 + NORMALIZATION_TOL):
        raise NormalizationError(f"{what} has entries outside [0, 1]")
    total = p.sum(axis=-1)
    bad = np.abs(total - 1.0) > NORMALIZATION_TOL
    if np.any(bad):
        raise NormalizationError(f"{what} sums to {np.atleast_1d(total)[np.atleast_1d(bad)][0]!r}, not 1")


@dataclass(frozen=True, eq=False)
class FiniteSCM:
    """Anti-causal SCM ``Y -> X <- E`` over finite supports.

    ``p_obs_given[i, j, k]`` is ``P(X = obs_support[k] | Y = label_support[i], E = env_support[j])``.
    Y and E are independent roots.
    """

    label_support: tuple
    env_support: tuple
    obs_support: tuple
    p_label: np.ndarray
    p_env: np.ndarray
    p_obs_given: np.ndarray

    @property
    def n_labels(self) -> int:
        return len(self.label_support)

    @property
    def n_envs(self) -> int:
        return len(self.env_support)

    @property
    def n_obs(self) -> int:
        return len(self.obs_support)

    def label_index(self, y) -> int:
        try:
            return self.label_support.index(y)
        except ValueError:
            raise UnknownOutcome(f"label {y!r} not in support {self.label_support}") from None

    def env_index(self, e) -> int:
        try:
            return self.env_support.index(e)
        except ValueError:
            raise UnknownOutcome(f"environment {e!r} not in support {self.env_support}") from None

    def joint(self) -> np.ndarray:
        """Joint table ``P(Y, E, X)`` with shape ``(n_labels, n_envs, n_obs)``."""
        return self.p_label[:, None, None] * self.p_env[None, :, None] * self.p_obs_given

    def slice_env(self, e) -> "FiniteSCM":
        """Single-environment slice used as a component of a product space."""
        j = self.env_index(e)
        return FiniteSCM(
            self.label_support,
            (e,),
            self.obs_support,
            self.p_label.copy(),
            np.array([1.0]),
            self.p_obs_given[:, j : j + 1, :].copy(),
        )

    def to_dict(self) -> dict:
        return {
            "label_support": list(self.label_support),
            "env_support": list(self.env_support),
            "obs_support": list(self.obs_support),
            "p_label": self.p_label.tolist(),
            "p_env": self.p_env.tolist(),
            "p_obs_given": self.p_obs_given.tolist(),
        }


def build_finite_scm(spec: Mapping[str, Any]) -> FiniteSCM:
    """Validate probability tables and build a :class:`FiniteSCM`.

    ``spec`` uses the JSON layout of SCM spec files; ``p_obs_given`` is nested
    row-major ``[y][e][x]``.
    """
    keys = ("label_support", "env_support", "obs_support", "p_label", "p_env", "p_obs_given")
    missing = [k for k in keys if k not in spec]
    if missing:
        raise ShapeError(f"missing tables: {missing}")
    ys, es, xs = (tuple(spec[k]) for k in keys[:3])
    if not ys or not es or not xs:
        raise ShapeError("supports must be non-empty")
    for name, sup in zip(keys[:3], (ys, es, xs)):
        if len(set(sup)) != len(sup):
            raise ShapeError(f"{name} has repeated values")
    p_label = np.asarray(spec["p_label"], dtype=float)
    p_env = np.asarray(spec["p_env"], dtype=float)
    try:
        p_obs = np.asarray(spec["p_obs_given"], dtype=float)
    except ValueError as exc:
        raise ShapeError(f"p_obs_given is ragged: {exc}") from None
    if p_label.shape != (len(ys),):
        raise ShapeError(f"p_label has shape {p_label.shape}, expected ({len(ys)},)")
    if p_env.shape != (len(es),):
        raise ShapeError(f"p_env has shape {p_env.shape}, expected ({len(es)},)")
    if p_obs.shape != (len(ys), len(es), len(xs)):
        raise ShapeError(f"p_obs_given has shape {p_obs.shape}, expected {(len(ys), len(es), len(xs))}")
    _check_distribution(p_label, "p_label")
    _check_distribution(p_env, "p_env")
    _check_distribution(p_obs, "p_obs_given")
    return FiniteSCM(ys, es, xs, p_label, p_env, p_obs)


def load_scm(path) -> FiniteSCM:
    with open(path) as fh:
        return build_finite_scm(json.load(fh))


def toy_scm() -> FiniteSCM:
    """The two-environment binary toy SCM (Y, E ~ Bernoulli(0.5))."""
    return build_finite_scm(
        {
            "label_support": [0, 1],
            "env_support": [0, 1],
            "obs_support": [0, 1],
            "p_label": [0.5, 0.5],
            "p_env": [0.5, 0.5],
            "p_obs_given": [
                [[0.8, 0.2], [0.6, 0.4]],
                [[0.4, 0.6], [0.2, 0.8]],
            ],
        }
    )


def event_mask(event: Event, n: int) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    for i in event:
        if not 0 <= int(i) < n:
            raise UnknownOutcome(f"event index {i} outside outcome range 0..{n - 1}")
        mask[int(i)] = True
    return mask


def all_events(n: int) -> np.ndarray:
    """Indicator matrix of every subset of ``range(n)``, shape ``(2**n, n)``."""
    codes = np.arange(2**n)[:, None]
    return ((codes >> np.arange(n)[None, :]) & 1).astype(bool)


@dataclass(frozen=True, eq=False)
class CausalKernel:
    """Row-stochastic table ``K_S(omega, {x})``.

    ``components`` names the parts of omega the kernel reads (``"y"``, ``"e"``);
    each row of ``table`` is the outcome distribution for one conditioning key.
    Rows whose conditioning cell has no mass are flagged in ``defined``.
    """

    S: tuple
    components: tuple
    keys: tuple
    table: np.ndarray
    outcomes: tuple
    target: str = "X"
    defined: np.ndarray | None = None
    label_measure: np.ndarray | None = None
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index.update({k: i for i, k in enumerate(self.keys)})

    @property
    def n_outcomes(self) -> int:
        return len(self.outcomes)

    def row_index(self, omega: Mapping[str, Any]) -> int:
        try:
            key = tuple(omega[c] for c in self.components)
        except KeyError as exc:
            raise UnknownOutcome(f"omega lacks component {exc.args[0]!r}") from None
        if key not in self._index:
            raise UnknownOutcome(f"conditioning {dict(zip(self.components, key))} outside kernel support")
        return self._index[key]

    def row(self, omega: Mapping[str, Any]) -> np.ndarray:
        i = self.row_index(omega)
        if self.defined is not None and not self.defined[i]:
            raise EmptyCell(f"kernel cell {self.keys[i]} has no supporting mass")
        return self.table[i]

    def marginal_value(self, event: Event) -> float:
        """Label-integrated value ``sum_y mu_Y(y) K_S((y,), A)``."""
        if self.components != ("y",) or self.label_measure is None:
            raise ShapeError("marginal_value needs a label-only kernel carrying its label measure")
        mask = event_mask(event, self.n_outcomes)
        return float(self.label_measure @ self.table[:, mask].sum(axis=1))

    def to_dict(self) -> dict:
        entries = []
        for key, row, ok in zip(self.keys, self.table, self._defined_rows()):
            for k, x in enumerate(self.outcomes):
                entry = dict(zip(self.components, key))
                entry["event"] = [x]
                entry["p"] = float(row[k]) if ok else None
                entries.append(entry)
        return {"S": list(self.S), "target": self.target, "components": list(self.components), "entries": entries}

    def _defined_rows(self) -> np.ndarray:
        if self.defined is None:
            return np.ones(len(self.keys), dtype=bool)
        return self.defined


def kernel_eval(kernel: CausalKernel, omega: Mapping[str, Any], event: Event) -> float:
    """``K_S(omega, A)`` for an event given as outcome indices."""
    row = kernel.row(omega)
    return float(row[event_mask(event, kernel.n_outcomes)].sum())


def _env_weights(scm: FiniteSCM, S) -> tuple[list[int], np.ndarray]:
    S = list(S)
    if not S:
        raise EmptyConditioningSet("conditioning set S is empty")
    idx = [scm.env_index(e) for e in S]
    w = scm.p_env[idx]
    return idx, w


def observational_kernel(scm: FiniteSCM, S, per_env: bool = False) -> CausalKernel:
    """Observational kernel ``P(X in A | Y = y, E in S)``.

    With ``per_env`` the kernel conditions on ``(y, e)`` for each ``e`` in S
    instead of averaging the environments out.
    """
    idx, w = _env_weights(scm, S)
    S = tuple(S)
    if per_env:
        keys, rows, ok = [], [], []
        for i, y in enumerate(scm.label_support):
            for j, e in zip(idx, S):
                keys.append((y, e))
                rows.append(scm.p_obs_given[i, j])
                ok.append(scm.p_env[j] * scm.p_label[i] > 0)
        return CausalKernel(S, ("y", "e"), tuple(keys), np.array(rows), scm.obs_support, defined=np.array(ok))
    mass = w.sum()
    if mass > 0:
        # Y and E are independent roots, so P(E = e | Y = y) = P(E = e).
        table = np.einsum("e,yex->yx", w / mass, scm.p_obs_given[:, idx, :])
    else:
        table = np.full((scm.n_labels, scm.n_obs), np.nan)
    defined = (scm.p_label > 0) & (mass > 0)
    keys = tuple((y,) for y in scm.label_support)
    return CausalKernel(S, ("y",), keys, table, scm.obs_support, defined=defined, label_measure=scm.p_label.copy())


@dataclass
class ViolationReport:
    max_discrepancy: float
    per_env_pair: dict
    passed: bool

    def to_dict(self) -> dict:
        return {
            "max_discrepancy": self.max_discrepancy,
            "per_env_pair": {f"{a}|{b}": v for (a, b), v in self.per_env_pair.items()},
            "passed": self.passed,
        }


def _conditional_event_values(row: np.ndarray, events: np.ndarray) -> np.ndarray:
    """Matrix of ``K(A | B)`` for every pair of events; NaN where ``K(B) = 0``."""
    a_and_b = events[:, None, :] & events[None, :, :]
    num = (a_and_b * row).sum(axis=-1)
    den = events @ row
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den[None, :] > 0, num / den[None, :], np.nan)


def verify_anti_causal_independence(kernel: CausalKernel, scm: FiniteSCM) -> ViolationReport:
    """Compare ``K_S(omega, {A|B})`` across conditionings sharing the label.

    Label-only kernels pass trivially; per-environment kernels report the
    discrepancy for each environment pair.
    """
    n = kernel.n_outcomes
    events = all_events(n) if n <= 6 else np.vstack([np.eye(n, dtype=bool), np.ones((1, n), dtype=bool)])
    y_pos = kernel.components.index("y")
    e_pos = kernel.components.index("e") if "e" in kernel.components else None
    groups: dict = {}
    for i, key in enumerate(kernel.keys):
        if kernel.defined is None or kernel.defined[i]:
            groups.setdefault(key[y_pos], []).append(i)
    per_pair: dict = {}
    worst = 0.0
    for rows in groups.values():
        cond = {i: _conditional_event_values(kernel.table[i], events) for i in rows}
        for a, b in itertools.combinations(rows, 2):
            gap = np.abs(cond[a] - cond[b])
            gap = float(np.nanmax(gap)) if np.any(~np.isnan(gap)) else 0.0
            worst = max(worst, gap)
            if e_pos is not None:
                pair = (kernel.keys[a][e_pos], kernel.keys[b][e_pos])
                per_pair[pair] = max(per_pair.get(pair, 0.0), gap)
    return ViolationReport(worst, per_pair, worst <= EXACT_TOL)


@dataclass
class EventClassReport:
    event: tuple
    invariant_under_U: bool
    omega_dependent: bool
    max_gap_under_U: float
    omega_spread: float

    def to_dict(self) -> dict:
        return dict(self.__dict__, event=list(self.event))


def verify_event_properties(scm: FiniteSCM, event: Event, S, U) -> EventClassReport:
    """Classify an observable event as invariant under dropping ``U`` from ``S``
    and/or as varying with the conditioning outcome."""
    S, U = list(S), list(U)
    if not set(U) <= set(S):
        raise EmptyConditioningSet(f"U={U} is not a subset of S={S}")
    rest = [e for e in S if e not in U]
    if not rest:
        raise EmptyConditioningSet("S \\ U is empty")
    event = tuple(sorted(int(i) for i in event))
    full = observational_kernel(scm, S)
    reduced = observational_kernel(scm, rest)
    mask = event_mask(event, scm.n_obs)
    ok = full.defined & reduced.defined
    v_full = full.table[ok][:, mask].sum(axis=1)
    v_red = reduced.table[ok][:, mask].sum(axis=1)
    gap = float(np.max(np.abs(v_full - v_red))) if v_full.size else 0.0
    spread = float(np.ptp(v_full)) if v_full.size else 0.0
    return EventClassReport(event, gap <= EXACT_TOL, spread > EXACT_TOL, gap, spread)


def empirical_kernel(dataset, S, obs_support: Sequence | None = None, per_env: bool = True) -> CausalKernel:
    """Kernel of empirical conditional frequencies from a discrete-feature dataset.

    Uses the first feature column as the observable.  Cells without samples are
    kept but marked undefined.
    """
    S = tuple(S)
    if not S:
        raise EmptyConditioningSet("conditioning set S is empty")
    x = np.asarray(dataset.features)[:, 0]
    y = np.asarray(dataset.labels)
    e = np.asarray(dataset.envs)
    xs = tuple(obs_support) if obs_support is not None else tuple(np.unique(x).tolist())
    ys = tuple(np.unique(y).tolist())
    x_idx = np.searchsorted(np.asarray(xs), x)
    if x.size and (np.any(x_idx >= len(xs)) or np.any(np.asarray(xs)[np.minimum(x_idx, len(xs) - 1)] != x)):
        raise UnknownOutcome("dataset contains observables outside obs_support")
    in_s = np.isin(e, S)
    keys, rows, ok = [], [], []
    cells = [(yv, ev) for yv in ys for ev in S] if per_env else [(yv, None) for yv in ys]
    for yv, ev in cells:
        sel = in_s & (y == yv) if ev is None else (e == ev) & (y == yv)
        counts = np.bincount(x_idx[sel], minlength=len(xs)).astype(float)
        total = counts.sum()
        keys.append((yv, ev) if per_env else (yv,))
        ok.append(total > 0)
        rows.append(counts / total if total > 0 else np.full(len(xs), np.nan))
    comps = ("y", "e") if per_env else ("y",)
    return CausalKernel(S, comps, tuple(keys), np.array(rows).reshape(len(keys), len(xs)), xs, defined=np.array(ok))


def sup_deviation(estimate: CausalKernel, truth: CausalKernel) -> float:
    """``sup_A |K_hat(omega, A) - K(omega, A)|`` over shared, defined cells.

    For a fixed row the supremum over events is the total-variation distance.
    """
    worst = 0.0
    for i, key in enumerate(estimate.keys):
        if estimate.defined is not None and not estimate.defined[i]:
            continue
        omega = dict(zip(estimate.components, key))
        try:
            ref = truth.row(omega)
        except (UnknownOutcome, EmptyCell):
            continue
        worst = max(worst, 0.5 * float(np.abs(estimate.table[i] - ref).sum()))
    return worst


def merge_scms(components: Sequence[FiniteSCM], env_weights: Sequence[float] | None = None) -> FiniteSCM:
    """Stack single-environment slices back into one multi-environment SCM."""
    base = components[0]
    envs = tuple(c.env_support[0] for c in components)
    w = np.full(len(components), 1.0 / len(components)) if env_weights is None else np.asarray(env_weights, float)
    p_obs = np.concatenate([c.p_obs_given for c in components], axis=1)
    return build_finite_scm(
        {
            "label_support": base.label_support,
            "env_support": envs,
            "obs_support": base.obs_support,
            "p_label": base.p_label,
            "p_env": w / w.sum(),
            "p_obs_given": p_obs,
        }
    )


@dataclass(frozen=True, eq=False)
class ProductCausalSpace:
    """Product of single-environment causal spaces.

    Component ``i`` has sample space ``Y x X`` for its environment; the index
    set ``T`` is the tuple of environment ids.  ``kernel(S)`` conditions on the
    labels of the components whose environment is in ``S`` and uses the
    label-marginal observable law for the rest.
    """

    components: tuple
    env_ids: tuple
    joint_measure: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    def component_index(self, e) -> int:
        try:
            return self.env_ids.index(e)
        except ValueError:
            raise UnknownOutcome(f"environment {e!r} not in product space") from None

    def _factor(self, i: int, conditioned: bool) -> tuple[list, np.ndarray]:
        c = self.components[i]
        rows = c.p_obs_given[:, 0, :]
        if conditioned:
            return list(c.label_support), rows
        return [None], (c.p_label @ rows)[None, :]

    def kernel(self, S) -> CausalKernel:
        """Product kernel ``K_S`` over the joint observable ``X_1 x ... x X_k``."""
        S = tuple(e for e in self.env_ids if e in set(S))
        if S in self._cache:
            return self._cache[S]
        factors = [self._factor(i, e in S) for i, e in enumerate(self.env_ids)]
        keys, rows = [], []
        for combo in itertools.product(*[range(len(f[0])) for f in factors]):
            row = np.ones(1)
            for (labels, table), r in zip(factors, combo):
                row = np.outer(row, table[r]).ravel()
            keys.append(tuple(factors[i][0][r] for i, r in enumerate(combo) if self.env_ids[i] in S))
            rows.append(row)
        outcomes = tuple(itertools.product(*[c.obs_support for c in self.components]))
        comps = tuple(f"y@{e}" for e in S)
        kern = CausalKernel(S, comps, tuple(keys), np.array(rows), outcomes, target="X")
        self._cache[S] = kern
        return kern

    @property
    def kernel_family(self) -> dict:
        subsets = itertools.chain.from_iterable(
            itertools.combinations(self.env_ids, r) for r in range(len(self.env_ids) + 1)
        )
        return {S: self.kernel(S) for S in subsets}

    def omega(self, labels: Mapping) -> dict:
        """Conditioning assignment from a ``{env id: label}`` mapping."""
        return {f"y@{e}": y for e, y in labels.items()}

    def rectangle_value(self, S, labels: Mapping, events: Mapping) -> float:
        """Kernel value on ``A_1 x ... x A_k`` by the rectangle rule.

        ``events`` maps env id to an observable index set; missing components
        are the full space.
        """
        value = 1.0
        for i, e in enumerate(self.env_ids):
            c = self.components[i]
            if e not in events:
                continue
            mask = event_mask(events[e], c.n_obs)
            if e in S:
                value *= float(c.p_obs_given[c.label_index(labels[e]), 0, mask].sum())
            else:
                value *= float((c.p_label @ c.p_obs_given[:, 0, :])[mask].sum())
        return value

    def rectangle_value_enumerated(self, S, labels: Mapping, events: Mapping) -> float:
        """Same quantity by summing the product kernel over every joint atom."""
        kern = self.kernel(S)
        row = kern.row(self.omega({e: labels[e] for e in kern.S}))
        masks = [
            event_mask(events[e], c.n_obs) if e in events else np.ones(c.n_obs, dtype=bool)
            for e, c in zip(self.env_ids, self.components)
        ]
        cell = masks[0]
        for m in masks[1:]:
            cell = np.outer(cell, m).ravel()
        return float(row[cell].sum())

    def env_mixture_value(self, label, event: Event, env_weights: Sequence[float] | None = None) -> float:
        """Environment-weighted kernel for one label, by enumeration over joint atoms.

        Places ``event`` in each component in turn (full space elsewhere) under
        ``K_T`` with every component carrying the same label.
        """
        k = len(self.env_ids)
        w = np.full(k, 1.0 / k) if env_weights is None else np.asarray(env_weights, float) / np.sum(env_weights)
        labels = {e: label for e in self.env_ids}
        return float(
            sum(wi * self.rectangle_value_enumerated(self.env_ids, labels, {e: event}) for wi, e in zip(w, self.env_ids))
        )


def product_space(components: Sequence[FiniteSCM]) -> ProductCausalSpace:
    """Build the product causal space of per-environment SCM slices."""
    if len(components) < 2:
        raise ShapeError("a product space needs at least two components")
    env_ids = []
    for c in components:
        if c.n_envs != 1:
            raise ShapeError("product components must be single-environment slices")
        env_ids.append(c.env_support[0])
    if len(set(env_ids)) != len(env_ids):
        raise DuplicateEnvironmentId(f"environment ids repeat: {env_ids}")
    joint = np.ones(())
    for c in components:
        # Component sample space is Y x X with its environment fixed.
        pc = (c.p_label[:, None] * c.p_obs_given[:, 0, :]).ravel()
        joint = np.multiply.outer(joint, pc)
    return ProductCausalSpace(tuple(components), tuple(env_ids), joint)


def verify_product_measure(space: ProductCausalSpace) -> float:
    """Max gap between the joint measure and the product of component measures
    over every atom rectangle (which determines all rectangles by additivity)."""
    marginals = []
    for i in range(len(space.components)):
        axes = tuple(j for j in range(space.joint_measure.ndim) if j != i)
        marginals.append(space.joint_measure.sum(axis=axes))
    product = np.ones(())
    for m in marginals:
        product = np.multiply.outer(product, m)
    return float(np.max(np.abs(product - space.joint_measure)))


def verify_restriction_consistency(space: ProductCausalSpace) -> float:
    """Max gap between ``K_S2`` restricted to ``S1``-events and ``K_S1``."""
    worst = 0.0
    family = space.kernel_family
    sizes = [c.n_obs for c in space.components]
    for S2, k2 in family.items():
        for r in range(len(S2)):
            for S1 in itertools.combinations(S2, r):
                k1 = family[S1]
                keep = [i for i, e in enumerate(space.env_ids) if e in S1]
                for key, row in zip(k2.keys, k2.table):
                    t = row.reshape(sizes)
                    drop = tuple(i for i in range(len(sizes)) if i not in keep)
                    # S1-measurable events are cylinders over the S1 components, so
                    # the restriction is the marginal of K_S2 on those components.
                    restricted = t.sum(axis=drop) if drop else t
                    labels = dict(zip(S2, key))
                    ref = k1.row(space.omega({e: labels[e] for e in S1})).reshape(sizes)
                    ref_marg = ref.sum(axis=drop) if drop else ref
                    worst = max(worst, float(np.max(np.abs(restricted - ref_marg))))
    return worst


def check_kernel_measure(kernel: CausalKernel) -> float:
    """Worst violation of the finitely-additive probability axioms over all rows."""
    n = kernel.n_outcomes
    worst = 0.0
    for i, row in enumerate(kernel.table):
        if kernel.defined is not None and not kernel.defined[i]:
            continue
        worst = max(worst, abs(float(row.sum()) - 1.0), float(-min(row.min(), 0.0)))
        if n <= 10:
            events = all_events(n)
            vals = events @ row
            # Disjoint additivity: K(A u B) = K(A) + K(B) whenever A n B is empty.
            # Row index of all_events(n) is the subset's bit code.
            for a in range(len(events)):
                b_idx = np.nonzero(~np.any(events & events[a], axis=1))[0]
                worst = max(worst, float(np.max(np.abs(vals[a + b_idx] - vals[a] - vals[b_idx]))))
    return worst
