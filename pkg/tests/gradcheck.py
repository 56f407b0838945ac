"""Finite-difference checks of tape gradients."""

import numpy as np

from crdnet.tensor import Parameter, Tape, Tensor, backward, record

from oracles import central_difference, relative_error


def project(x, w):
    """Scalar <x, w> for a constant w; reduces any output to a loss."""
    return record(Tensor(np.asarray((x.data * w).sum())), (x,), lambda g: (g * w,))


def op_gradient_error(fn, arrays, rng, eps=1e-5):
    """Max relative error between tape and central-difference gradients of
    <fn(*inputs), w> with respect to every input array."""
    params = [Parameter(a, f"in{i}") for i, a in enumerate(arrays)]
    out_shape = fn(*[Tensor(p.data) for p in params]).shape
    w = rng.standard_normal(out_shape)

    with Tape() as tape:
        loss = project(fn(*params), w)
    backward(tape, loss)

    worst = 0.0
    for p in params:
        numeric = central_difference(lambda: float((fn(*[Tensor(q.data) for q in params]).data * w).sum()), p.data, eps)
        worst = max(worst, relative_error(p.grad, numeric))
    return worst


def model_gradient_error(loss_fn, params, eps=1e-5, floor=1e-7):
    """loss_fn() builds a scalar Tensor from the current parameter values."""
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    backward(tape, loss)
    analytic = {p.name: p.grad.copy() for p in params}
    worst = {}
    for p in params:
        numeric = central_difference(lambda: loss_fn().item(), p.data, eps)
        worst[p.name] = relative_error(analytic[p.name], numeric, floor)
    return worst
