import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acia.errors import BadDims, DimMismatch
from acia.model import (
    Arch,
    AciaModel,
    backprop,
    checkpoint_bytes,
    default_arch,
    forward,
    forward_cache,
    init_model,
    load_model,
    save_model,
    zeros_like,
)
from acia.objective import task_loss_grad

from helpers import component_check, draw_smooth_problem


def straight_line(model, x):
    """Per-sample re-evaluation with explicit loops."""
    outs = []
    for row in x:
        h = list(row)
        for group, relu_last in (("encoder", False), ("abstraction", False), ("head", False)):
            layers = model.layers[group]
            for i, (W, b) in enumerate(layers):
                nxt = []
                for j in range(W.shape[1]):
                    s = b[j]
                    for k in range(W.shape[0]):
                        s += h[k] * W[k, j]
                    nxt.append(s)
                if i < len(layers) - 1 or relu_last:
                    nxt = [max(v, 0.0) for v in nxt]
                h = nxt
        outs.append(h)
    return np.array(outs)


def identity_model(d, out):
    arch = Arch(d, (d,), d, out)
    eye = np.eye(d)
    layers = {
        "encoder": [(eye.copy(), np.zeros(d))],
        "abstraction": [(eye.copy(), np.zeros(d)), (eye.copy(), np.zeros(d))],
        "head": [(eye[:, :out].copy(), np.zeros(out))],
    }
    return AciaModel(arch, layers)


class TestInit:
    def test_deterministic_bytes(self):
        arch = Arch(128, (32,), 128, 10)
        a, b = init_model(arch, 7), init_model(arch, 7)
        assert a.flat().tobytes() == b.flat().tobytes()
        assert init_model(arch, 8).flat().tobytes() != a.flat().tobytes()

    def test_zero_dim_rejected(self):
        with pytest.raises(BadDims):
            init_model(Arch(4, (0,), 3, 2), 0)
        with pytest.raises(BadDims):
            init_model(Arch(4, (), 3, 2), 0)

    def test_weight_std_matches_fan_in(self):
        model = init_model(Arch(100, (100,), 100, 10), 3)
        W = model.layers["encoder"][0][0]
        target = 1.0 / np.sqrt(3 * 100)  # std of U(-1/sqrt(n), 1/sqrt(n))
        assert W.size >= 10_000
        assert abs(W.std() / target - 1.0) <= 0.2

    def test_dims_chain(self):
        arch = Arch(10, (7, 5), 4, 3)
        m = init_model(arch, 0)
        shapes = [W.shape for g in ("encoder", "abstraction", "head") for W, _ in m.layers[g]]
        assert shapes == [(10, 7), (7, 5), (5, 4), (4, 4), (4, 3)]
        assert all(np.isfinite(p).all() for p in m.params())

    def test_default_arch_bottleneck(self):
        for family, d in (("rotated-digit", 256), ("ball-agent", 1024)):
            arch = default_arch(family, d, 8)
            assert arch.abstract_dim < arch.input_dim
        assert default_arch("colored-digit", 128, 10).encoder[-1] == 32
        assert default_arch("rotated-digit", 256, 10).encoder[-1] == 256


class TestForward:
    def test_zero_model(self):
        m = zeros_like(init_model(Arch(5, (4,), 3, 2), 0))
        zl, zh, out = forward(m, np.random.default_rng(0).normal(size=(6, 5)))
        assert not zl.any() and not zh.any() and not out.any()

    def test_identity_model(self):
        x = np.random.default_rng(1).uniform(0, 1, size=(5, 3))
        _, _, out = forward(identity_model(3, 2), x)
        assert np.array_equal(out, x[:, :2])

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_matches_straight_line(self, seed):
        rng = np.random.default_rng(seed)
        m = init_model(Arch(4, (5, 3), 4, 2), seed)
        x = rng.normal(size=(3, 4))
        assert np.max(np.abs(forward(m, x)[2] - straight_line(m, x))) <= 1e-12

    def test_dim_mismatch(self):
        m = init_model(Arch(5, (4,), 3, 2), 0)
        with pytest.raises(DimMismatch):
            forward(m, np.zeros((2, 6)))

    def test_batch_order_independent(self):
        m = init_model(Arch(6, (5,), 4, 3), 2)
        x = np.random.default_rng(2).normal(size=(9, 6))
        perm = np.random.default_rng(3).permutation(9)
        assert np.max(np.abs(forward(m, x[perm])[2] - forward(m, x)[2][perm])) <= 1e-12


class TestBackward:
    def test_constant_objective_zero_gradient(self):
        m = init_model(Arch(4, (3,), 3, 2), 0)
        c = forward_cache(m, np.ones((2, 4)))
        assert not backprop(m, c).flat().any()

    def test_one_parameter_closed_form(self):
        # Identity encoder/abstraction on positive input leaves a scalar head weight w.
        m = identity_model(1, 1)
        w, x, y = 1.7, 0.6, 0.3
        m.layers["head"] = [(np.array([[w]]), np.zeros(1))]
        c = forward_cache(m, np.array([[x]]))
        _, g = task_loss_grad(c.output, np.array([[y]]))
        grads = backprop(m, c, d_output=g)
        assert abs(grads.layers["head"][0][0][0, 0] - 2 * x * (w * x - y)) <= 1e-12

    def test_unused_parameters_get_zero_gradient(self):
        m = init_model(Arch(4, (3,), 3, 2), 1)
        c = forward_cache(m, np.random.default_rng(0).normal(size=(5, 4)))
        g = backprop(m, c, d_high=np.ones_like(c.z_high))
        assert not g.layers["head"][0][0].any() and not g.layers["head"][0][1].any()

    @pytest.mark.parametrize("component", ["task", "r1", "r2_simulation"])
    def test_finite_differences(self, component):
        rng = np.random.default_rng(11)
        for _ in range(5):
            model, batches = draw_smooth_problem(rng)
            assert component_check(model, batches, component) <= 1e-4


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        m = init_model(Arch(6, (5,), 4, 3), 9)
        m.step = 12
        save_model(m, tmp_path / "m.ckpt", {"family": "colored-digit"})
        back, header = load_model(tmp_path / "m.ckpt")
        assert header["step"] == 12 and header["family"] == "colored-digit"
        assert np.array_equal(back.flat(), m.flat().astype(np.float32).astype(np.float64))
        assert checkpoint_bytes(back, {"family": "colored-digit"}) == checkpoint_bytes(m, {"family": "colored-digit"})
