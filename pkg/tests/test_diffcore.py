import numpy as np
import numpy.testing as npt
import pytest
import torch

from semrobust import diffcore
from semrobust.errors import NonFiniteLoss, ShapeMismatch


def test_grad_of_sum_is_ones():
    x = np.random.default_rng(0).standard_normal(7)
    g = diffcore.grad_wrt_input(lambda t: t.sum(), x)
    npt.assert_allclose(g, np.ones(7))


def test_grad_of_half_square_norm_is_x():
    x = np.random.default_rng(1).standard_normal((3, 4))
    g = diffcore.grad_wrt_input(lambda t: 0.5 * (t ** 2).sum(), x)
    npt.assert_allclose(g, x)
    assert g.shape == x.shape


def test_grad_matches_central_differences_on_random_map():
    # random 3-layer map, double precision, step 1e-5
    torch.manual_seed(0)
    net = torch.nn.Sequential(
        torch.nn.Linear(6, 8), torch.nn.Tanh(),
        torch.nn.Linear(8, 8), torch.nn.Tanh(),
        torch.nn.Linear(8, 1)).double()

    def loss(t):
        return net(t.reshape(1, -1)).squeeze()

    x = np.random.default_rng(2).uniform(-1, 1, size=6)
    assert diffcore.finite_diff_check(loss, x, h=1e-5) <= 1e-4


def test_grad_preserves_container_type():
    t = torch.arange(3, dtype=torch.float64)
    g = diffcore.grad_wrt_input(lambda v: (v ** 2).sum(), t)
    assert isinstance(g, torch.Tensor)


def test_grad_nonfinite_loss_raises():
    with pytest.raises(NonFiniteLoss):
        diffcore.grad_wrt_input(lambda t: (t / 0.0).sum(), np.ones(2))


def test_finite_diff_linear_loss_near_exact():
    w = torch.from_numpy(np.random.default_rng(3).standard_normal(5))
    x = np.random.default_rng(4).standard_normal(5)
    err = diffcore.finite_diff_check(lambda t: (w * t).sum(), x, h=1e-3)
    assert err <= 1e-10


def test_finite_diff_quadratic_loss():
    x = np.random.default_rng(5).uniform(0.5, 1.5, size=6)
    err = diffcore.finite_diff_check(lambda t: (t ** 2).sum(), x, h=1e-5)
    assert err <= 1e-8


def test_finite_diff_reports_discontinuity():
    # one coordinate sits within h of a jump; the check must surface the
    # disagreement instead of masking it
    x = np.array([0.5 - 5e-6, 0.2])

    def staircase(t):
        return torch.floor(t + 0.5).sum()

    err = diffcore.finite_diff_check(staircase, x, h=1e-5)
    assert err > 1.0


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        diffcore.finite_diff_check(lambda t: t.sum(), np.ones(2), h=0.0)


def _param(v):
    return {"w": torch.tensor(v, dtype=torch.float64)}


def test_adam_zero_gradient_is_identity():
    params = _param([2.0, -1.0])
    state = diffcore.adam_init(params)
    out, state2 = diffcore.adam_step(params, _param([0.0, 0.0]), state, lr=0.1)
    npt.assert_array_equal(out["w"].numpy(), params["w"].numpy())
    npt.assert_array_equal(state2.m["w"].numpy(), [0.0, 0.0])
    npt.assert_array_equal(state2.v["w"].numpy(), [0.0, 0.0])


def test_adam_descends_quadratic():
    params = _param([1.0])
    state = diffcore.adam_init(params)
    out, _ = diffcore.adam_step(params, {"w": params["w"].clone()}, state, lr=0.1)
    assert float(out["w"][0]) < 1.0


def test_adam_converges_to_three():
    params = _param([0.0])
    state = diffcore.adam_init(params)
    for _ in range(200):
        grads = {"w": 2.0 * (params["w"] - 3.0)}
        params, state = diffcore.adam_step(params, grads, state, lr=0.1)
    assert abs(float(params["w"][0]) - 3.0) <= 0.05


def test_adam_shape_mismatch():
    params = _param([1.0, 2.0])
    state = diffcore.adam_init(params)
    with pytest.raises(ShapeMismatch):
        diffcore.adam_step(params, _param([1.0]), state)
    with pytest.raises(ShapeMismatch):
        diffcore.adam_step(params, {"v": params["w"].clone()}, state)


def test_adam_deterministic():
    def run():
        params = _param([0.3, -0.7])
        state = diffcore.adam_init(params)
        for i in range(10):
            grads = {"w": params["w"] * (i + 1)}
            params, state = diffcore.adam_step(params, grads, state, lr=0.01)
        return params["w"].numpy()

    npt.assert_array_equal(run(), run())


def test_forward_and_grad_deterministic():
    def run():
        torch.manual_seed(11)
        net = torch.nn.Sequential(torch.nn.Linear(5, 5), torch.nn.Tanh(),
                                  torch.nn.Linear(5, 1))
        x = torch.full((1, 5), 0.25, requires_grad=True)
        out = net(x).sum()
        (g,) = torch.autograd.grad(out, x)
        return out.detach().numpy().copy(), g.numpy().copy()

    (o1, g1), (o2, g2) = run(), run()
    npt.assert_array_equal(o1, o2)
    npt.assert_array_equal(g1, g2)
