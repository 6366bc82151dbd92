"""Scalar bi-level toy shared by the meta-engine and acceptance tests.

Params f, d, c (one per partition). Meta-train loss 0.5*(f + d + c - y)^2,
meta-test loss 0.5*(f + 2d + c - y)^2 (the batch carries the d coefficient
and target), regulariser 0.5*(f - d)^2 standing in for the IM term.
"""
import torch

from sddg.model import ParamPartition


def toy_params(f, d, c):
    mk = lambda v: torch.tensor(float(v), dtype=torch.float64, requires_grad=True)
    return ParamPartition({"f": mk(f)}, {"d": mk(d)}, {"c": mk(c)})


def toy_loss(params, batch):
    coef, y = batch
    f, d, c = params.theta_F["f"], params.theta_D["d"], params.theta_C["c"]
    return 0.5 * (f + coef * d + c - y) ** 2, f - d


def toy_reg(w):
    zero = w.new_zeros(())
    return zero, zero, 0.5 * w ** 2


def closed_form(f, d, c, ys, yp, alpha, beta, mu, second_order):
    """Hand-derived outer update for the toy."""
    rs = f + d + c - ys
    d_prime = d - alpha * rs
    rp = f + 2 * d_prime + c - yp
    if second_order:
        gf = rs + mu * (f - d) + rp * (1 - 2 * alpha)
        gd = rs - mu * (f - d) + 2 * rp * (1 - alpha)
        gc = rs + rp * (1 - 2 * alpha)
    else:
        gf = rs + mu * (f - d) + rp
        gd = rs - mu * (f - d) + 2 * rp
        gc = rs + rp
    return f - beta * gf, d - beta * gd, c - beta * gc
