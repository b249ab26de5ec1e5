"""Property suite over finite SCMs: kernel axioms, anti-causal independence,
intervention identities and product-space consistency."""
from __future__ import annotations

import time
from typing import Optional, Sequence

import numpy as np

from ._tol import EXACT_TOL, NORMALIZATION_TOL
from .causal_space import (
    FiniteSCM,
    build_finite_scm,
    check_kernel_measure,
    merge_scms,
    observational_kernel,
    product_space,
    toy_scm,
    verify_anti_causal_independence,
    verify_product_measure,
    verify_restriction_consistency,
)
from .intervention import Intervention, interventional_kernel, point_intervention, soft_blend, verify_invariance_criteria


def random_scm(rng: np.random.Generator, n_labels: int = 2, n_envs: int = 2, n_obs: int = 3) -> FiniteSCM:
    """Random anti-causal SCM with Dirichlet(1) priors and mechanism rows."""
    return build_finite_scm(
        {
            "label_support": list(range(n_labels)),
            "env_support": list(range(n_envs)),
            "obs_support": list(range(n_obs)),
            "p_label": rng.dirichlet(np.ones(n_labels)).tolist(),
            "p_env": rng.dirichlet(np.ones(n_envs)).tolist(),
            "p_obs_given": rng.dirichlet(np.ones(n_obs), size=(n_labels, n_envs)).tolist(),
        }
    )


def _check(name: str, value: float, tol: float, results: dict) -> None:
    results[name] = {"value": float(value), "tol": tol, "passed": bool(value <= tol)}


def _toy_values(scm: FiniteSCM, results: dict) -> None:
    # Exact toy tables: P(X=1 | y, e) and the derived mixture/do values.
    expected = {(0, 0): 0.2, (0, 1): 0.4, (1, 0): 0.6, (1, 1): 0.8}
    per_env = observational_kernel(scm, (0, 1), per_env=True)
    gap = max(abs(per_env.row({"y": y, "e": e})[1] - p) for (y, e), p in expected.items())
    _check("toy_conditionals", gap, EXACT_TOL, results)
    mixed = observational_kernel(scm, (0, 1))
    _check("toy_mixture_y0", abs(mixed.row({"y": 0})[1] - 0.3), EXACT_TOL, results)
    done = interventional_kernel(per_env, point_intervention("Y", 2, 1))
    _check("toy_do_y1", max(abs(done.row({"e": 0})[1] - 0.6), abs(done.row({"e": 1})[1] - 0.8)), EXACT_TOL, results)


def check_scm(scm: FiniteSCM, toy: bool = False) -> dict:
    """Run every property on one SCM; returns ``{check: {value, tol, passed}}``."""
    results: dict = {}
    envs = tuple(scm.env_support)
    k_mixed = observational_kernel(scm, envs)
    k_env = observational_kernel(scm, envs, per_env=True)
    _check("kernel_measure_mixed", check_kernel_measure(k_mixed), NORMALIZATION_TOL, results)
    _check("kernel_measure_per_env", check_kernel_measure(k_env), NORMALIZATION_TOL, results)
    _check("anti_causal_label_kernel", verify_anti_causal_independence(k_mixed, scm).max_discrepancy, EXACT_TOL, results)

    inv = verify_invariance_criteria(scm, envs)
    _check("do_x_label_shift", inv.y_shift_under_do_x, EXACT_TOL, results)
    results["do_y_obs_shift"] = {"value": inv.x_shift_under_do_y, "tol": 0.0, "passed": bool(inv.verdict)}

    # Hard interventions on X reproduce the intervention distribution exactly.
    q = np.linspace(1.0, 2.0, scm.n_obs)
    q = q / q.sum()
    hard = interventional_kernel(k_env, Intervention("X", "hard", hard_dist=q))
    _check("hard_reproduces_q", float(np.max(np.abs(hard.table - q))), EXACT_TOL, results)

    # Soft blend: exact endpoints and affine midpoint.
    do_y = Intervention("Y", "hard", hard_dist=np.eye(scm.n_labels)[0])
    ends = [interventional_kernel(k_env, Intervention("Y", "soft", hard_dist=do_y.hard_dist, alpha=a)) for a in (0.0, 1.0)]
    full = interventional_kernel(k_env, do_y)
    gap0 = float(np.max(np.abs(ends[0].table - k_env.table)))
    gap1 = max(float(np.max(np.abs(ends[1].row(dict(zip(k_env.components, key))) - full.row({"e": key[k_env.components.index("e")]})))) for key in k_env.keys)
    _check("soft_endpoints", max(gap0, gap1), EXACT_TOL, results)
    mid = soft_blend(k_env, full, 0.3)
    affine = max(
        float(np.max(np.abs(mid.table[i] - (0.7 * k_env.table[i] + 0.3 * full.row({"e": key[k_env.components.index("e")]})))))
        for i, key in enumerate(k_env.keys)
    )
    _check("soft_affine", affine, EXACT_TOL, results)

    if scm.n_envs >= 2:
        slices = [scm.slice_env(e) for e in envs]
        space = product_space(slices)
        _check("product_measure", verify_product_measure(space), NORMALIZATION_TOL, results)
        _check("restriction_consistency", verify_restriction_consistency(space), NORMALIZATION_TOL, results)
        w = scm.p_env / scm.p_env.sum()
        merged = observational_kernel(merge_scms(slices, w), envs)
        gap = 0.0
        for y in scm.label_support:
            for j in range(scm.n_obs):
                mix = space.env_mixture_value(y, (j,), w)
                gap = max(gap, abs(mix - merged.row({"y": y})[j]))
        _check("env_mixture_matches_merge", gap, NORMALIZATION_TOL, results)

    if toy:
        _toy_values(scm, results)
    return results


def run_suite(extra: Sequence[dict] = (), n_random: int = 20, seed: int = 0) -> dict:
    """Built-in toy SCM, supplied SCM specs and ``n_random`` random SCMs."""
    t0 = time.perf_counter()
    entries = [("toy", toy_scm(), True)]
    for i, spec in enumerate(extra):
        entries.append((f"supplied[{i}]", build_finite_scm(spec), False))
    rng = np.random.default_rng(seed)
    for i in range(n_random):
        shape = (int(rng.integers(2, 4)), int(rng.integers(2, 4)), int(rng.integers(2, 5)))
        entries.append((f"random[{i}]", random_scm(rng, *shape), False))
    scms = []
    for name, scm, toy in entries:
        checks = check_scm(scm, toy)
        scms.append({"name": name, "passed": all(c["passed"] for c in checks.values()), "checks": checks})
    return {"passed": all(s["passed"] for s in scms), "n_scms": len(scms), "seconds": time.perf_counter() - t0, "scms": scms}


def summary_line(report: dict) -> Optional[str]:
    failed = [s["name"] for s in report["scms"] if not s["passed"]]
    return None if not failed else "failed: " + ", ".join(failed)
