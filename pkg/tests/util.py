"""Shared test oracles: central finite differences and relative error."""

import numpy as np

from acc.numerics import Tensor


def fd_grad(f, buf: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar f() w.r.t. buf, mutated in place."""
    assert buf.dtype == np.float64, "finite differences run at 64-bit"
    g = np.zeros_like(buf)
    flat, gf = buf.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(1e-8, np.abs(a) + np.abs(b))
    return float((np.abs(a - b) / denom).max()) if a.size else 0.0


def fd_check(build_loss, bufs, tol: float = 1e-4, h: float = 1e-6) -> float:
    """Analytic grads of build_loss(*tensors) vs finite differences.

    bufs are float64 arrays; Tensor shares their memory so the FD probe
    sees mutations. Returns the worst relative error across all inputs.
    """
    params = [Tensor(b, requires_grad=True) for b in bufs]
    loss = build_loss(*params)
    loss.backward()
    grads = [p.grad.copy() for p in params]

    def f() -> float:
        fresh = [Tensor(b) for b in bufs]
        return float(build_loss(*fresh).data)

    worst = 0.0
    for buf, g in zip(bufs, grads):
        worst = max(worst, rel_err(g, fd_grad(f, buf, h)))
    assert worst < tol, f"finite-difference mismatch: rel err {worst:.3g}"
    return worst
