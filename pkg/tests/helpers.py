"""Shared test utilities, chiefly the central-difference gradient oracle."""

import numpy as np

from skiplift.tensor import Tape, Tensor, backward


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar-valued ``f()`` w.r.t. the array ``x``.

    ``f`` must recompute its value from the current contents of ``x``; the
    array is perturbed in place and restored.
    """
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2.0 * h)
    return g


def grad_rel_err(auto: np.ndarray, fd: np.ndarray) -> float:
    return float(np.max(np.abs(auto - fd) / (np.abs(fd) + 1e-8)))


def check_grads(build_loss, params, tol: float = 1e-4, h: float = 1e-5):
    """Compare reverse-mode grads of ``build_loss()`` against central differences.

    ``build_loss`` is a zero-argument callable returning a scalar Tensor; it is
    re-run (untaped) for each finite-difference probe, so it must read parameter
    values from the Tensors in ``params`` each time.
    """
    for p in params:
        p.grad = None
    with Tape():
        loss = build_loss()
        backward(loss)
    worst = 0.0
    for p in params:
        assert p.grad is not None, "parameter received no gradient"
        fd = numeric_grad(lambda: build_loss().item(), p.data, h=h)
        worst = max(worst, grad_rel_err(p.grad, fd))
    assert worst < tol, f"gradient mismatch: rel err {worst:.3e} >= {tol}"
    return worst
