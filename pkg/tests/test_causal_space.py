import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acia.causal_space import (
    build_finite_scm,
    check_kernel_measure,
    empirical_kernel,
    kernel_eval,
    merge_scms,
    observational_kernel,
    product_space,
    sup_deviation,
    toy_scm,
    verify_anti_causal_independence,
    verify_event_properties,
    verify_product_measure,
    verify_restriction_consistency,
)
from acia.datasets import gen_toy_scm
from acia.errors import DuplicateEnvironmentId, EmptyConditioningSet, EmptyCell, NormalizationError, ShapeError, UnknownOutcome
from acia.verify import random_scm

TOY_P1 = {(0, 0): 0.2, (0, 1): 0.4, (1, 0): 0.6, (1, 1): 0.8}


def brute_conditional(scm, y, envs, event):
    """P(X in event | Y=y, E in envs) by summing the joint over atoms."""
    num = den = 0.0
    for yi, yv in enumerate(scm.label_support):
        for ei, ev in enumerate(scm.env_support):
            for xi in range(scm.n_obs):
                p = scm.p_label[yi] * scm.p_env[ei] * scm.p_obs_given[yi, ei, xi]
                if yv == y and ev in envs:
                    den += p
                    if xi in event:
                        num += p
    return num / den


def scm_strategy(max_labels=3, max_envs=3, max_obs=4):
    @st.composite
    def build(draw):
        seed = draw(st.integers(0, 2**31 - 1))
        shape = (
            draw(st.integers(1, max_labels)),
            draw(st.integers(1, max_envs)),
            draw(st.integers(1, max_obs)),
        )
        return random_scm(np.random.default_rng(seed), *shape)

    return build()


class TestBuild:
    def test_toy_tables(self):
        scm = toy_scm()
        for (y, e), p in TOY_P1.items():
            assert scm.p_obs_given[y, e, 1] == p

    def test_point_mass_scm(self):
        scm = build_finite_scm(
            {"label_support": [0], "env_support": [0], "obs_support": [0, 1], "p_label": [1.0], "p_env": [1.0], "p_obs_given": [[[0.0, 1.0]]]}
        )
        k = observational_kernel(scm, [0])
        assert k.row({"y": 0}).tolist() == [0.0, 1.0]

    def test_bad_normalization(self):
        spec = toy_scm().to_dict()
        spec["p_obs_given"][0][0] = [0.5, 0.4]
        with pytest.raises(NormalizationError):
            build_finite_scm(spec)

    def test_bad_shape(self):
        spec = toy_scm().to_dict()
        spec["p_label"] = [0.2, 0.3, 0.5]
        with pytest.raises(ShapeError):
            build_finite_scm(spec)

    def test_roundtrip_dict(self):
        scm = toy_scm()
        again = build_finite_scm(scm.to_dict())
        assert np.array_equal(again.p_obs_given, scm.p_obs_given)


class TestObservationalKernel:
    def test_single_env_value(self):
        k = observational_kernel(toy_scm(), [0])
        assert kernel_eval(k, {"y": 1}, [1]) == pytest.approx(0.6, abs=1e-12)

    def test_mixed_env_value(self):
        k = observational_kernel(toy_scm(), [0, 1])
        assert abs(kernel_eval(k, {"y": 0}, [1]) - 0.3) <= 1e-12

    def test_e1_value_and_complement(self):
        scm = toy_scm()
        assert abs(kernel_eval(observational_kernel(scm, [1]), {"y": 0}, [1]) - 0.4) <= 1e-12
        assert abs(kernel_eval(observational_kernel(scm, [0]), {"y": 1}, [0]) - 0.4) <= 1e-12

    def test_empty_event(self):
        assert kernel_eval(observational_kernel(toy_scm(), [0]), {"y": 1}, []) == 0.0

    def test_empty_conditioning_set(self):
        with pytest.raises(EmptyConditioningSet):
            observational_kernel(toy_scm(), [])

    def test_unknown_outcome(self):
        k = observational_kernel(toy_scm(), [0])
        with pytest.raises(UnknownOutcome):
            k.row({"y": 7})
        with pytest.raises(UnknownOutcome):
            kernel_eval(k, {"y": 0}, [5])

    def test_zero_mass_cell_is_undefined(self):
        spec = toy_scm().to_dict()
        spec["p_label"] = [1.0, 0.0]
        k = observational_kernel(build_finite_scm(spec), [0, 1])
        with pytest.raises(EmptyCell):
            k.row({"y": 1})

    def test_per_env_table_matches_toy(self):
        k = observational_kernel(toy_scm(), [0, 1], per_env=True)
        for (y, e), p in TOY_P1.items():
            assert abs(k.row({"y": y, "e": e})[1] - p) <= 1e-12

    def test_marginal_value(self):
        k = observational_kernel(toy_scm(), [0, 1])
        # 0.5 * 0.3 + 0.5 * 0.7
        assert abs(k.marginal_value([1]) - 0.5) <= 1e-12

    def test_to_dict_entries(self):
        d = observational_kernel(toy_scm(), [0]).to_dict()
        assert d["target"] == "X" and d["components"] == ["y"]
        assert {"y": 1, "event": [1], "p": 0.6} in d["entries"]

    @settings(max_examples=60, deadline=None)
    @given(scm_strategy())
    def test_matches_brute_force(self, scm):
        for r in range(1, scm.n_envs + 1):
            for S in itertools.combinations(scm.env_support, r):
                k = observational_kernel(scm, S)
                for y in scm.label_support:
                    for j in range(scm.n_obs):
                        assert abs(kernel_eval(k, {"y": y}, [j]) - brute_conditional(scm, y, S, {j})) <= 1e-12

    @settings(max_examples=60, deadline=None)
    @given(scm_strategy(max_obs=5))
    def test_kernel_is_measure(self, scm):
        S = tuple(scm.env_support)
        assert check_kernel_measure(observational_kernel(scm, S)) <= 1e-12
        assert check_kernel_measure(observational_kernel(scm, S, per_env=True)) <= 1e-12


class TestAntiCausalIndependence:
    def test_marginalized_kernel_has_no_violation(self):
        scm = toy_scm()
        rep = verify_anti_causal_independence(observational_kernel(scm, [0, 1]), scm)
        assert rep.max_discrepancy == 0.0 and rep.passed

    def test_per_env_discrepancy(self):
        scm = toy_scm()
        rep = verify_anti_causal_independence(observational_kernel(scm, [0, 1], per_env=True), scm)
        # Conditional events K(A|B) with B = full space give the raw 0.2 vs 0.4 gap.
        assert rep.per_env_pair[(0, 1)] >= 0.2 - 1e-12
        assert not rep.passed

    def test_env_free_scm(self):
        spec = toy_scm().to_dict()
        spec["p_obs_given"] = [[[0.8, 0.2], [0.8, 0.2]], [[0.4, 0.6], [0.4, 0.6]]]
        scm = build_finite_scm(spec)
        rep = verify_anti_causal_independence(observational_kernel(scm, [0, 1], per_env=True), scm)
        assert rep.max_discrepancy <= 1e-12

    @settings(max_examples=40, deadline=None)
    @given(scm_strategy())
    def test_marginalized_kernel_constant_in_env(self, scm):
        k = observational_kernel(scm, tuple(scm.env_support))
        assert verify_anti_causal_independence(k, scm).passed


class TestEventProperties:
    def test_env_free_is_invariant(self):
        spec = toy_scm().to_dict()
        spec["p_obs_given"] = [[[0.8, 0.2], [0.8, 0.2]], [[0.4, 0.6], [0.4, 0.6]]]
        scm = build_finite_scm(spec)
        for event in ([0], [1], [0, 1], []):
            assert verify_event_properties(scm, event, [0, 1], [1]).invariant_under_U

    def test_toy_event_is_omega_dependent(self):
        rep = verify_event_properties(toy_scm(), [1], [0, 1], [1])
        assert rep.omega_dependent
        assert not rep.invariant_under_U

    def test_full_event_always_invariant(self):
        rep = verify_event_properties(toy_scm(), [0, 1], [0, 1], [0])
        assert rep.invariant_under_U and not rep.omega_dependent

    def test_u_must_be_proper_subset(self):
        with pytest.raises(EmptyConditioningSet):
            verify_event_properties(toy_scm(), [1], [0], [0])


class TestProductSpace:
    def slices(self, scm=None):
        scm = scm or toy_scm()
        return [scm.slice_env(e) for e in scm.env_support]

    def test_rectangle_value(self):
        space = product_space(self.slices())
        v = space.rectangle_value((0, 1), {0: 1, 1: 0}, {0: [1], 1: [1]})
        assert abs(v - 0.24) <= 1e-12
        assert abs(space.rectangle_value_enumerated((0, 1), {0: 1, 1: 0}, {0: [1], 1: [1]}) - 0.24) <= 1e-12

    def test_full_factor_marginalizes(self):
        space = product_space(self.slices())
        v = space.rectangle_value((0, 1), {0: 1, 1: 0}, {0: [1], 1: [0, 1]})
        assert abs(v - 0.6) <= 1e-12

    def test_mixture_equals_merged_kernel(self):
        scm = toy_scm()
        space = product_space(self.slices(scm))
        merged = observational_kernel(merge_scms(self.slices(scm), [0.5, 0.5]), [0, 1])
        for y in (0, 1):
            assert abs(space.env_mixture_value(y, [1]) - merged.row({"y": y})[1]) <= 1e-12
        assert abs(space.env_mixture_value(0, [1]) - 0.3) <= 1e-12

    def test_duplicate_env(self):
        s = self.slices()
        with pytest.raises(DuplicateEnvironmentId):
            product_space([s[0], s[0]])

    def test_needs_single_env_slices(self):
        with pytest.raises(ShapeError):
            product_space([toy_scm(), toy_scm()])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 4), st.integers(2, 3))
    def test_rectangle_rule_and_restriction(self, seed, n_envs, n_obs):
        rng = np.random.default_rng(seed)
        scm = random_scm(rng, 2, n_envs, n_obs)
        space = product_space(self.slices(scm))
        assert verify_product_measure(space) <= 1e-12
        assert verify_restriction_consistency(space) <= 1e-12
        S = tuple(e for e in scm.env_support if rng.random() < 0.5)
        labels = {e: int(rng.integers(0, 2)) for e in scm.env_support}
        events = {e: [j for j in range(n_obs) if rng.random() < 0.5] for e in scm.env_support}
        a = space.rectangle_value(S, labels, events)
        b = space.rectangle_value_enumerated(S, labels, events)
        assert abs(a - b) <= 1e-12

    def test_product_kernels_are_measures(self):
        space = product_space(self.slices())
        for k in space.kernel_family.values():
            assert check_kernel_measure(k) <= 1e-12


class TestEmpiricalKernel:
    def test_large_sample_estimate(self):
        ds = gen_toy_scm(100_000, seed=3)
        k = empirical_kernel(ds, [0], obs_support=(0, 1))
        assert abs(k.row({"y": 0, "e": 0})[1] - 0.2) <= 0.01

    def test_identical_samples_point_mass(self):
        ds = gen_toy_scm(50, seed=0)
        ds.features[:] = 1.0
        ds.labels[:] = 0
        ds.envs[:] = 0
        k = empirical_kernel(ds, [0], obs_support=(0, 1))
        assert k.row({"y": 0, "e": 0}).tolist() == [0.0, 1.0]

    def test_small_n_deviation_exceeds_large(self):
        truth = observational_kernel(toy_scm(), [0, 1], per_env=True)
        wins = 0
        for seed in range(100):
            small = sup_deviation(empirical_kernel(gen_toy_scm(100, seed), [0, 1], (0, 1)), truth)
            large = sup_deviation(empirical_kernel(gen_toy_scm(100_000, seed + 1000), [0, 1], (0, 1)), truth)
            wins += small > large
        assert wins >= 95

    def test_missing_cell_is_undefined(self):
        ds = gen_toy_scm(200, seed=1)
        sub = ds.select(ds.envs == 0)
        k = empirical_kernel(sub, [0, 1], (0, 1))
        assert not k.defined[k.row_index({"y": 0, "e": 1})]
