"""Momentum-free adaptive gradient descent with backtracking.

Each step divides the gradient by a running RMS of past gradients (no first
moment), then backtracks until the Armijo condition holds, so accepted steps
never increase the objective.
"""
from dataclasses import dataclass, field

import numpy as np


@dataclass
class DescentResult:
    x: np.ndarray
    value: float
    history: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def adaptive_descent(fun, x0, iterations, lr=1e-3, decay=0.9, eps=1e-12, grow=1.25,
                     shrink=0.5, max_backtracks=40, tol=1e-8, armijo=1e-4,
                     callback=None, divergence=None):
    """Minimize ``fun`` from ``x0``.

    ``fun(x, grad=True)`` returns ``(value, gradient)``; with ``grad=False`` it
    may return ``(value, None)``.  ``callback(it, x, value, extra)`` is called
    after every accepted step.  Stops on ``iterations``, on a relative change
    below ``tol``, or when no step length decreases the objective.
    If ``divergence`` is set, raises ``FloatingPointError`` when the value
    exceeds ``divergence`` times the initial value.
    """
    x = np.array(x0, dtype=np.float64)
    f, g = fun(x, grad=True)
    f0 = f
    hist = [float(f)]
    v = g * g
    step = lr
    res = DescentResult(x, float(f), hist)
    if iterations <= 0:
        return res
    for it in range(iterations):
        v = decay * v + (1.0 - decay) * g * g
        d = -g / (np.sqrt(v) + eps)
        slope = float(g @ d)
        if slope >= 0.0 or not np.isfinite(slope):
            res.converged = True
            break
        accepted = False
        for _ in range(max_backtracks):
            xn = x + step * d
            fn, _ = fun(xn, grad=False)
            if np.isfinite(fn) and fn <= f + armijo * step * slope:
                accepted = True
                break
            step *= shrink
        if not accepted:
            res.converged = True
            break
        if divergence is not None and fn > divergence * max(f0, 1e-300):
            raise FloatingPointError(f"objective diverged: {fn:.6g} vs initial {f0:.6g}")
        rel = abs(f - fn) / max(abs(f), 1e-300)
        x = xn
        f, g = fun(x, grad=True)
        hist.append(float(f))
        step *= grow
        res.iterations = it + 1
        if callback is not None:
            callback(it, x, f)
        if rel < tol:
            res.converged = True
            break
    res.x, res.value = x, float(f)
    return res


def lbfgs_descent(fun, x0, iterations, history_size=20, tol=1e-10, callback=None,
                  divergence=None):
    """Quasi-Newton minimization with a strong-Wolfe line search (torch's L-BFGS).

    One L-BFGS iteration per outer step; an iterate is kept only if it lowers
    the objective, otherwise the search stops at the previous point.  Same
    ``fun`` protocol, callback and divergence guard as :func:`adaptive_descent`.
    """
    import torch

    x = np.array(x0, dtype=np.float64)
    cache = {}

    def evaluate(z):
        key = z.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = fun(z, grad=True)
        return cache[key]

    f, _ = evaluate(x)
    f0 = f
    res = DescentResult(x, float(f), [float(f)])
    if iterations <= 0:
        return res
    param = torch.tensor(x, requires_grad=True)

    def fresh():
        return torch.optim.LBFGS([param], lr=1.0, max_iter=1, max_eval=25,
                                 history_size=history_size,
                                 line_search_fn="strong_wolfe", tolerance_grad=0.0,
                                 tolerance_change=0.0)

    def closure():
        opt.zero_grad()
        val, g = evaluate(param.detach().numpy().copy())
        param.grad = torch.as_tensor(g)
        return torch.tensor(val, dtype=torch.float64)

    opt = fresh()
    failures = 0
    for it in range(iterations):
        opt.step(closure)
        xn = param.detach().numpy().copy()
        fn, _ = evaluate(xn)
        if not np.isfinite(fn) or fn >= f:
            # the objective is only piecewise smooth: drop the curvature memory once
            failures += 1
            if failures >= 2:
                res.converged = True
                break
            with torch.no_grad():
                param.copy_(torch.as_tensor(x))
            opt = fresh()
            continue
        failures = 0
        if divergence is not None and fn > divergence * max(f0, 1e-300):
            raise FloatingPointError(f"objective diverged: {fn:.6g} vs initial {f0:.6g}")
        rel = (f - fn) / max(abs(f), 1e-300)
        x, f = xn, fn
        res.history.append(float(f))
        res.iterations = it + 1
        if callback is not None:
            callback(it, x, f)
        if rel < tol:
            res.converged = True
            break
    # the last evaluation must describe the returned point for callers reading side state
    evaluate(x)
    res.x, res.value = x, float(f)
    return res
