"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np

from treefield.gradcore import Tape


def analytic_grads(loss_fn, params):
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def numeric_grads(loss_fn, params, h=1e-4):
    out = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = float(loss_fn().data)
            flat[i] = old - h
            down = float(loss_fn().data)
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def relative_error(a, b):
    a = np.concatenate([x.ravel() for x in a])
    b = np.concatenate([x.ravel() for x in b])
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def gradient_error(loss_fn, params, h=1e-4):
    return relative_error(analytic_grads(loss_fn, params), numeric_grads(loss_fn, params, h))
