"""SwiGLU feed-forward block: y = W_down (silu(W_gate x) * (W_up x))."""

import numpy as np

from .numerics import silu, silu_grad


def swiglu_forward(x, w_gate, w_up, w_down, tape=None):
    g = x @ w_gate.T
    u = x @ w_up.T
    a = silu(g) * u
    y = a @ w_down.T
    if tape is not None:
        tape["x"], tape["g"], tape["u"], tape["a"] = x, g, u, a
    return y


def swiglu_backward(tape, w_gate, w_up, w_down, dy):
    """Returns (dx, grads) with grads keyed gate/up/down."""
    x, g, u, a = tape["x"], tape["g"], tape["u"], tape["a"]
    da = dy @ w_down
    du = da * silu(g)
    dg = da * u * silu_grad(g)
    dx = du @ w_up + dg @ w_gate

    def flat(t):
        return t.reshape(-1, t.shape[-1])

    return dx, {"gate": flat(dg).T @ flat(x), "up": flat(du).T @ flat(x),
                "down": flat(dy).T @ flat(a)}
