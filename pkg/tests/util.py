"""Shared helpers for the test suite: random layer construction, layer
cloning, an independent masked-forward oracle, and a finite-difference
harness for adapter blocks."""

import numpy as np

from lope.adapter import (
    DependencyVector,
    LopeLayer,
    Regime,
    _train_forward,
    clone_layer,
    get_block,
    set_block,
)
from lope.numerics import finite_diff_grad


def random_layer(rng, d_in=3, d_out=2, rank=2, num_experts=3, top_k=2, poison=(2,), zero_experts=False):
    w0 = rng.normal(size=(d_out, d_in)) / np.sqrt(d_in)
    a = rng.normal(size=(rank, d_in)) / np.sqrt(d_in)
    if zero_experts:
        experts = [np.zeros((d_out, rank)) for _ in range(num_experts)]
    else:
        experts = [rng.normal(size=(d_out, rank)) / np.sqrt(rank) for _ in range(num_experts)]
    w_gate = rng.normal(size=(rank, num_experts))
    return LopeLayer(w0=w0, a=a, experts=experts, w_gate=w_gate, poison=poison, top_k=top_k)


def random_theta(rng, layer, scale=0.8):
    th = rng.uniform(-scale, scale, size=layer.num_experts)
    for d in layer.poison:
        th[d] = 0.0
    return DependencyVector(th)


def masked_forward_oracle(layer, x, theta):
    """Independent construction of the masked forward: run the plain
    stage-2 gate, force the poisoning weights to zero, re-normalise,
    re-select the top normal experts, and recompute beta.  Uses naive
    numpy throughout (no shared code with forward_inference)."""
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    ax = X @ layer.a.T
    logits = ax @ np.asarray(layer.w_gate)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    omega = e / e.sum(axis=1, keepdims=True)
    omega = omega.copy()
    for d in layer.poison:
        omega[:, d] = 0.0
    omega = omega / omega.sum(axis=1, keepdims=True)
    normals = [i for i in range(layer.num_experts) if i not in layer.poison]
    k = min(layer.top_k, len(normals))
    th = theta.theta
    y = X @ layer.w0.T
    for row in range(X.shape[0]):
        ranked = sorted(normals, key=lambda i: (-omega[row, i], i))[:k]
        s_plain = sum(omega[row, i] for i in ranked)
        s_comp = sum((1.0 + th[i]) * omega[row, i] for i in ranked)
        beta = s_plain / s_comp if s_comp > 0 else 1.0
        for i in sorted(ranked):
            w = beta * (1.0 + th[i]) * omega[row, i]
            y[row] += w * (layer.experts[i] @ ax[row])
    return y


def fd_block_grad(layer, name, x, dy, regime, theta, trace, h=1e-5):
    """Central finite differences of sum(dy * y) for one parameter block,
    with the active set and beta pinned at their trace values (the
    stop-gradient surrogate the analytic backward differentiates)."""
    base = get_block(layer, name)
    dy2 = np.atleast_2d(np.asarray(dy, dtype=np.float64))
    pinned_beta = trace.beta if regime is Regime.STAGE2_COMPENSATED else None

    def f(flat):
        probe = clone_layer(layer)
        set_block(probe, name, flat.reshape(base.shape))
        t = _train_forward(probe, x, regime, theta,
                           pinned_active=trace.active, pinned_beta=pinned_beta)
        return float(np.sum(t.y * dy2))

    return finite_diff_grad(f, base.ravel().copy(), h=h).reshape(base.shape)


def fd_input_grad(layer, x, dy, regime, theta, trace, h=1e-5):
    dy2 = np.atleast_2d(np.asarray(dy, dtype=np.float64))
    pinned_beta = trace.beta if regime is Regime.STAGE2_COMPENSATED else None
    x1 = np.asarray(x, dtype=np.float64)

    def f(flat):
        t = _train_forward(layer, flat.reshape(x1.shape), regime, theta,
                           pinned_active=trace.active, pinned_beta=pinned_beta)
        return float(np.sum(t.y * dy2))

    return finite_diff_grad(f, x1.ravel().copy(), h=h).reshape(x1.shape)


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)), floor)
    return float(np.abs(a - b).max(initial=0.0)) / denom
