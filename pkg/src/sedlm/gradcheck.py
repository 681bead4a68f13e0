"""Central finite-difference checks against tape gradients."""
import numpy as np

from sedlm.tensor import Tape, backward


def numerical_grad(loss_fn, tensor, h=1e-5, index=None):
    """d loss_fn() / d tensor by central differences, perturbing ``tensor.data`` in place.

    With ``index`` (flat positions) only those entries are computed; the rest stay 0.
    """
    flat = tensor.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    for k in range(flat.size) if index is None else index:
        old = flat[k]
        flat[k] = old + h
        up = float(loss_fn().data)
        flat[k] = old - h
        down = float(loss_fn().data)
        flat[k] = old
        out[k] = (up - down) / (2 * h)
    return out.reshape(tensor.shape)


def tape_grads(loss_fn, tensors):
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    backward(tape, loss)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def max_violation(analytic, numeric, rtol=1e-4, atol=1e-6):
    """Largest ``|a - n| / max(rtol * max(|a|, |n|), atol)``; <= 1 means the check passes."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    allowed = np.maximum(rtol * np.maximum(np.abs(a), np.abs(n)), atol)
    return float(np.max(np.abs(a - n) / allowed)) if a.size else 0.0


def check(loss_fn, tensors, h=1e-5, rtol=1e-4, atol=1e-6, max_entries=None, rng=None):
    """Return the worst violation ratio over ``tensors`` (<= 1 passes).

    ``max_entries`` caps the finite-difference probes per tensor; larger tensors are
    checked on a random subset drawn from ``rng``.
    """
    analytic = tape_grads(loss_fn, tensors)
    worst = 0.0
    for t, a in zip(tensors, analytic):
        index = None
        if max_entries is not None and t.data.size > max_entries:
            index = np.sort((rng or np.random.default_rng(0)).choice(t.data.size, max_entries, replace=False))
        n = numerical_grad(loss_fn, t, h, index)
        if index is not None:
            a, n = a.reshape(-1)[index], n.reshape(-1)[index]
        worst = max(worst, max_violation(a, n, rtol, atol))
    return worst
