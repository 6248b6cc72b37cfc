"""Limited-memory BFGS with a backtracking Armijo line search.

Deterministic for a given starting point: no randomness, fixed step schedule.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from ashap.errors import OptimizationError


@dataclass(frozen=True)
class MinimizeResult:
    x: np.ndarray
    fun: float
    grad_norm: float
    n_iter: int
    n_eval: int
    converged: bool


def _two_loop(g, pairs):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    s, y, _ = pairs[-1]
    q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def minimize_lbfgs(fun_grad, x0, gtol=1e-6, max_iter=200, memory=10, c1=1e-4,
                   max_backtrack=60) -> MinimizeResult:
    """Minimize a smooth function given ``fun_grad(x) -> (f, g)``.

    Stops when ``||g|| <= gtol`` or after ``max_iter`` iterations. Every
    accepted step satisfies the Armijo condition, so the objective never
    increases. Trial points with a non-finite objective or gradient halve
    the step.

    Raises:
        OptimizationError: if the objective is non-finite at ``x0`` or no
            finite trial point is found along a search direction.
    """
    x = np.array(x0, dtype=float)
    f, g = fun_grad(x)
    n_eval = 1
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise OptimizationError("objective or gradient is not finite at the starting point")
    pairs = deque(maxlen=memory)
    it = 0
    gnorm = float(np.linalg.norm(g))
    while gnorm > gtol and it < max_iter:
        if pairs:
            direction = _two_loop(g, list(pairs))
        else:
            direction = -g / max(1.0, gnorm)
        slope = float(g @ direction)
        if not slope < 0:
            pairs.clear()
            direction = -g / max(1.0, gnorm)
            slope = float(g @ direction)

        step = 1.0
        accepted = False
        saw_finite = False
        for _ in range(max_backtrack):
            x_new = x + step * direction
            f_new, g_new = fun_grad(x_new)
            n_eval += 1
            if np.isfinite(f_new) and np.all(np.isfinite(g_new)):
                saw_finite = True
                if f_new <= f + c1 * step * slope:
                    accepted = True
                    break
            step *= 0.5
        if not accepted:
            if not saw_finite:
                raise OptimizationError("objective stayed non-finite along the search direction")
            # no further decrease is representable; treat as converged in floating point
            break

        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            pairs.append((s, y, 1.0 / sy))
        x, f, g = x_new, float(f_new), g_new
        gnorm = float(np.linalg.norm(g))
        it += 1

    return MinimizeResult(x, float(f), gnorm, it, n_eval, gnorm <= gtol)
