"""Finite-difference oracles shared by the gradient tests."""
import numpy as np

from acia.model import Arch, backprop, forward_cache, init_model
from acia.objective import (
    EnvBatch,
    r1_grad,
    r2_exact_grad,
    r2_simulation_grad,
    softmax,
    task_loss_grad,
    total_objective,
)

FD_STEP = 1e-5
REL_FLOOR = 1e-6
KINK_MARGIN = 1e-3


def numeric_grad(f, v, h=FD_STEP):
    g = np.empty_like(v)
    for i in range(v.size):
        up, down = v.copy(), v.copy()
        up[i] += h
        down[i] -= h
        g[i] = (f(up) - f(down)) / (2 * h)
    return g


def max_rel_error(analytic, numeric, floor=REL_FLOOR):
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def random_problem(rng, regression=False, n_envs=2, per_env=4, n_classes=3):
    d_in = int(rng.integers(3, 6))
    out = 4 if regression else n_classes
    arch = Arch(d_in, (int(rng.integers(3, 6)),), int(rng.integers(3, 5)), out)
    model = init_model(arch, int(rng.integers(0, 2**31)))
    batches = []
    for e in range(n_envs):
        x = rng.normal(size=(per_env, d_in))
        y = rng.uniform(0.1, 0.9, size=(per_env, out)) if regression else rng.integers(0, n_classes, per_env)
        if not regression:
            y[0] = 0  # label 0 present in every env so R1 has a cross-env pair
        xi = x + rng.normal(scale=0.5, size=x.shape)
        batches.append(EnvBatch(e, x, y, xi))
    return model, batches


def _pre_activation_margin(model, x):
    c = forward_cache(model, x)
    pres = [p for g in ("encoder", "abstraction") for p in c.pre[g][:-1]]
    return min(float(np.min(np.abs(p))) for p in pres)


def smooth_point(model, batches, reference=None):
    """True when no ReLU, env-risk tie or absolute value sits within the
    finite-difference reach of a kink."""
    x = np.concatenate([b.x for b in batches])
    xi = np.concatenate([b.x_intervened for b in batches])
    if min(_pre_activation_margin(model, x), _pre_activation_margin(model, xi)) < KINK_MARGIN:
        return False
    br, _ = total_objective(model, batches, 0.0, 0.0, r2_mode="off", with_grad=False)
    risks = sorted(br.per_env_risk.values())
    if len(risks) > 1 and risks[-1] - risks[-2] < KINK_MARGIN:
        return False
    if reference is not None:
        out = forward_cache(model, x).output
        e = np.concatenate([np.full(len(b.x), b.env) for b in batches])
        p = softmax(out)[:, 1]
        if any(abs(p[e == env].mean() - reference[env]) < KINK_MARGIN for env in np.unique(e)):
            return False
    return True


def draw_smooth_problem(rng, reference=None, **kw):
    while True:
        model, batches = random_problem(rng, **kw)
        if smooth_point(model, batches, reference):
            return model, batches


def _stack(batches):
    x = np.concatenate([b.x for b in batches])
    xi = np.concatenate([b.x_intervened for b in batches])
    y = np.concatenate([b.y for b in batches])
    e = np.concatenate([np.full(len(b.x), b.env) for b in batches])
    return x, xi, y, e


def component_check(model, batches, component, reference=None):
    """Max relative error of one objective component's analytic gradient."""
    x, xi, y, e = _stack(batches)
    regression = y.ndim == 2

    def value_and_grad(m):
        c = forward_cache(m, x)
        if component == "task":
            v, g = task_loss_grad(c.output, y)
            return v, backprop(m, c, d_output=g)
        if component == "r1":
            v, g, _ = r1_grad(c.z_high, y, e)
            return v, backprop(m, c, d_high=g)
        if component == "r2_simulation":
            ci = forward_cache(m, xi)
            v, g, gi = r2_simulation_grad(c.output, ci.output, e, regression)
            return v, m.with_flat(backprop(m, c, d_output=g).flat() + backprop(m, ci, d_output=gi).flat())
        if component == "r2_exact":
            v, g = r2_exact_grad(c.output, e, reference)
            return v, backprop(m, c, d_output=g)
        raise ValueError(component)

    _, grads = value_and_grad(model)
    v0 = model.flat()
    num = numeric_grad(lambda v: value_and_grad(model.with_flat(v))[0], v0)
    return max_rel_error(grads.flat(), num)


def total_check(model, batches, lambda1, lambda2, r2_mode="simulation", reference=None):
    _, grads = total_objective(model, batches, lambda1, lambda2, r2_mode, reference)
    v0 = model.flat()
    f = lambda v: total_objective(model.with_flat(v), batches, lambda1, lambda2, r2_mode, reference, with_grad=False)[0].total
    return max_rel_error(grads.flat(), numeric_grad(f, v0))
