"""Pure numpy implementations of the fused MLP kernels.

Each ``params`` argument is a list of ``(W, b)`` effective weights with
``W`` shaped ``[out, in]``; hidden layers use ReLU, the last layer is linear.
The op order matches the autodiff record built by ``networks.forward``.
"""

import numpy as np


def mlp_forward(params, X):
    h = X
    last = len(params) - 1
    for i, (W, b) in enumerate(params):
        h = h @ W.T + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h


def _activations(params, X):
    acts = [X]
    h = X
    last = len(params) - 1
    for i, (W, b) in enumerate(params):
        h = h @ W.T + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def _backprop(params, acts, g, need_input):
    grads = [None] * len(params)
    for i in range(len(params) - 1, -1, -1):
        h_in = acts[i]
        grads[i] = (g.T @ h_in, g.sum(axis=0))
        if i == 0 and not need_input:
            return grads, None
        g = g @ params[i][0]
        if i > 0:
            g = g * (h_in > 0.0)
    return grads, g


def td_grad(params, X, actions, y):
    """Loss mean((y - Q[i, a_i])**2) and its gradient for every (W, b)."""
    acts = _activations(params, X)
    Q = acts[-1]
    n = X.shape[0]
    rows = np.arange(n)
    d = y - Q[rows, actions]
    loss = float(np.dot(d, d) / n)
    gQ = np.zeros_like(Q)
    gQ[rows, actions] = (-2.0 / n) * d
    grads, _ = _backprop(params, acts, gQ, False)
    return loss, grads


def input_grad(params, x, gq):
    """Gradient of dot(gq, Q(x)) with respect to a single observation ``x``."""
    acts = _activations(params, x[None, :])
    _, gx = _backprop(params, acts, np.asarray(gq, dtype=np.float64)[None, :], True)
    return gx[0]


def noisy_weights(mu, sigma, f_out, f_in):
    """mu + sigma * outer(f_out, f_in)."""
    return mu + sigma * np.outer(f_out, f_in)
