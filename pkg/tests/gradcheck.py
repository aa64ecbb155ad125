"""Central finite-difference oracle for the autodiff tests."""
from __future__ import annotations

import numpy as np

from proctrain import tensor as tc
from proctrain.tensor import Tensor


def check_gradients(loss_fn, params, h: float = 1e-3) -> float:
    """Relative error ||a - n|| / (||a|| + ||n||) of analytic vs central-difference gradients.

    The numeric side only ever runs the forward pass (under ``no_grad``), so
    it shares nothing with the backward rules being checked.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [p.grad.astype(np.float64).copy() for p in params]

    numeric = []
    for p in params:
        g = np.zeros(p.shape)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with tc.no_grad():
                up = float(loss_fn().data)
            flat[i] = orig - h
            with tc.no_grad():
                down = float(loss_fn().data)
            flat[i] = orig
            g.reshape(-1)[i] = (up - down) / (2 * h)
        numeric.append(g)

    a = np.concatenate([x.ravel() for x in analytic])
    n = np.concatenate([x.ravel() for x in numeric])
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12))


def random_graph(seed: int):
    """A small random composition of the tensor ops, with its parameters.

    Each graph mixes matmul / layer norm / gelu / softmax / masked cross
    entropy and stays under 1e3 parameters.
    """
    rng = np.random.default_rng(seed)
    d_in, d_h, n_cls, n = rng.integers(2, 6), rng.integers(3, 8), rng.integers(2, 5), rng.integers(2, 5)
    x = rng.standard_normal((n, d_in))
    w1 = Tensor(rng.standard_normal((d_in, d_h)) * 0.7, requires_grad=True)
    b1 = Tensor(rng.standard_normal(d_h) * 0.1, requires_grad=True)
    g = Tensor(1.0 + 0.1 * rng.standard_normal(d_h), requires_grad=True)
    beta = Tensor(0.1 * rng.standard_normal(d_h), requires_grad=True)
    w2 = Tensor(rng.standard_normal((d_h, n_cls)) * 0.7, requires_grad=True)
    targets = rng.integers(0, n_cls, n)
    mask = rng.random(n) < 0.7
    mask[0] = True
    variant = int(rng.integers(0, 4))

    def loss_fn():
        h = tc.linear(Tensor(x), w1, b1)
        if variant in (0, 2):
            h = tc.layer_norm(h, g, beta)
        else:
            h = h * g + beta
        h = tc.gelu(h) if variant < 2 else tc.tanh(h)
        if variant == 3:
            att = tc.softmax_rows(tc.matmul(h, tc.transpose(h)), causal=True)
            h = h + tc.matmul(att, h)
        logits = tc.matmul(h, w2)
        return tc.cross_entropy_masked(logits, targets, mask)

    return loss_fn, [w1, b1, g, beta, w2]
