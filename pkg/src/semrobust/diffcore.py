"""Differentiable-computation contract shared by the models and the attack
engine: input gradients, an independent finite-difference checker, and a
functional adaptive-moment optimizer step.

Gradients come from torch autograd. The finite-difference checker never
touches autograd: it re-evaluates the loss at perturbed points, which is
what makes it a usable oracle for the analytic path.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .errors import NonFiniteLoss, ShapeMismatch

# Parameters and gradients travel as plain name -> tensor dicts.
ParamSet = dict


def grad_wrt_input(loss_fn, x):
    """Gradient of a scalar loss with respect to its input.

    `x` may be a numpy array or a torch tensor; the gradient comes back in
    the same container with the same shape.
    """
    is_numpy = isinstance(x, np.ndarray)
    xt = torch.as_tensor(x).detach().clone().requires_grad_(True)
    value = loss_fn(xt)
    if not torch.isfinite(value):
        raise NonFiniteLoss(f"loss is {float(value.detach())}")
    (grad,) = torch.autograd.grad(value, xt)
    return grad.numpy() if is_numpy else grad.detach()


def finite_diff_check(loss_fn, x, h=1e-5):
    """Max relative error between the analytic gradient and central
    differences, over all coordinates of x.

    Per coordinate: |analytic - (f(x+h e) - f(x-h e)) / 2h| / (|analytic| + 1e-12).
    Run it in double precision; at h=1e-5 a smooth map should land well
    under 1e-4.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=np.float64)
    analytic = grad_wrt_input(loss_fn, x).ravel()
    flat = x.ravel()
    worst = 0.0
    with torch.no_grad():
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] = flat[i] + h
            up = float(loss_fn(torch.from_numpy(bumped.reshape(x.shape))))
            bumped[i] = flat[i] - h
            down = float(loss_fn(torch.from_numpy(bumped.reshape(x.shape))))
            numeric = (up - down) / (2.0 * h)
            err = abs(analytic[i] - numeric) / (abs(analytic[i]) + 1e-12)
            worst = max(worst, err)
    return worst


def loss_grads(loss, params):
    """Gradients of a scalar loss for every named parameter; parameters the
    loss does not touch (e.g. a decoder under a zero-weighted term) get
    zero gradients instead of an error."""
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    return {k: (g if g is not None else torch.zeros_like(p))
            for (k, p), g in zip(params.items(), grads)}


@dataclass
class AdamState:
    step: int
    m: ParamSet
    v: ParamSet


def adam_init(params):
    """Fresh optimizer state (zero moments) for a parameter set."""
    with torch.no_grad():
        return AdamState(
            step=0,
            m={k: torch.zeros_like(p) for k, p in params.items()},
            v={k: torch.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected adaptive-moment update.

    Pure function: returns (new_params, new_state) and leaves the inputs
    untouched. Raises ShapeMismatch when grads do not line up with params.
    """
    if set(grads) != set(params):
        raise ShapeMismatch(f"param names {sorted(params)} vs grad names {sorted(grads)}")
    for k in params:
        if params[k].shape != grads[k].shape:
            raise ShapeMismatch(f"{k}: param {tuple(params[k].shape)} vs "
                                f"grad {tuple(grads[k].shape)}")
    t = state.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    with torch.no_grad():
        for k, p in params.items():
            g = grads[k]
            m = beta1 * state.m[k] + (1.0 - beta1) * g
            v = beta2 * state.v[k] + (1.0 - beta2) * g * g
            new_params[k] = p - lr * (m / c1) / (torch.sqrt(v / c2) + eps)
            new_m[k] = m
            new_v[k] = v
    return new_params, AdamState(step=t, m=new_m, v=new_v)
