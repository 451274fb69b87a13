"""Limited-memory BFGS with a strong-Wolfe line search.

Used to maximize mixed-model likelihoods over unconstrained log-variance
parameters (the caller supplies the negated objective). The first line
search starts at a configurable step (default 0.15); later iterations start
at the natural quasi-Newton step of 1.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


@dataclass
class OptimResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    n_iter: int
    n_evals: int
    converged: bool
    message: str

    @property
    def grad_norm(self) -> float:
        return float(np.max(np.abs(self.grad))) if self.grad.size else 0.0


def _approx_wolfe(phi, dphi, phi0, dphi0, c1, c2) -> bool:
    """Approximate Wolfe acceptance for steps whose true decrease is below
    float rounding (Hager-Zhang): derivative-only conditions plus a
    rounding-slack bound on the function value."""
    slack = 1e-12 * (1.0 + abs(phi0))
    return (phi <= phi0 + slack) and (c2 * dphi0 <= dphi <= (2.0 * c1 - 1.0) * dphi0)


def _zoom(fg, x, p, phi0, dphi0, a_lo, a_hi, phi_lo, c1, c2, max_iter=30):
    """Wolfe zoom phase; bisection keeps it robust on non-smooth stretches."""
    evals = 0
    best = None
    for _ in range(max_iter):
        a = 0.5 * (a_lo + a_hi)
        f, g = fg(x + a * p)
        evals += 1
        phi, dphi = f, float(g @ p)
        if np.isfinite(phi) and _approx_wolfe(phi, dphi, phi0, dphi0, c1, c2):
            return a, f, g, evals, True
        if not np.isfinite(phi) or phi > phi0 + c1 * a * dphi0 or phi >= phi_lo:
            a_hi = a
        else:
            if abs(dphi) <= -c2 * dphi0:
                return a, f, g, evals, True
            if dphi * (a_hi - a_lo) >= 0:
                a_hi = a_lo
            a_lo, phi_lo = a, phi
            best = (a, f, g)
        if abs(a_hi - a_lo) < 1e-14:
            break
    if best is not None:
        a, f, g = best
        return a, f, g, evals, True
    return None, None, None, evals, False


def _wolfe_search(fg, x, f0, g0, p, alpha0, c1=1e-4, c2=0.9, max_iter=25):
    phi0, dphi0 = f0, float(g0 @ p)
    a_prev, phi_prev = 0.0, phi0
    a = alpha0
    evals = 0
    for i in range(max_iter):
        f, g = fg(x + a * p)
        evals += 1
        phi, dphi = f, float(g @ p)
        if np.isfinite(phi) and _approx_wolfe(phi, dphi, phi0, dphi0, c1, c2):
            return a, f, g, evals, True
        if not np.isfinite(phi) or phi > phi0 + c1 * a * dphi0 or (i > 0 and phi >= phi_prev):
            za, zf, zg, ze, ok = _zoom(fg, x, p, phi0, dphi0, a_prev, a, phi_prev, c1, c2)
            return za, zf, zg, evals + ze, ok
        if abs(dphi) <= -c2 * dphi0:
            return a, f, g, evals, True
        if dphi >= 0:
            za, zf, zg, ze, ok = _zoom(fg, x, p, phi0, dphi0, a, a_prev, phi, c1, c2)
            return za, zf, zg, evals + ze, ok
        a_prev, phi_prev = a, phi
        a *= 2.0
    return None, None, None, evals, False


def minimize_lbfgs(fun_and_grad, x0, memory: int = 10, gtol: float = 1e-6,
                   max_iter: int = 500, initial_step: float = 0.15) -> OptimResult:
    """Minimize a smooth function given a ``x -> (f, grad)`` callable.

    Convergence is declared when the gradient infinity-norm drops below
    ``gtol``; otherwise the result carries ``converged=False`` along with the
    best point found.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    f, g = fun_and_grad(x)
    n_evals = 1
    pairs: deque = deque(maxlen=memory)
    message = "max iterations reached"
    it = 0
    for it in range(1, max_iter + 1):
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        if gnorm < gtol:
            return OptimResult(x, f, g, it - 1, n_evals, True, "gradient tolerance reached")
        # two-loop recursion for the search direction
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(pairs):
            a = rho * float(s @ q)
            alphas.append(a)
            q -= a * y
        if pairs:
            s, y, _ = pairs[-1]
            q *= float(s @ y) / float(y @ y)
        for (s, y, rho), a in zip(pairs, reversed(alphas)):
            b = rho * float(y @ q)
            q += (a - b) * s
        p = -q
        if float(p @ g) >= 0.0:
            # direction lost descent property; restart from steepest descent
            pairs.clear()
            p = -g
        step0 = initial_step if not pairs and it == 1 else 1.0
        alpha, f_new, g_new, evals, ok = _wolfe_search(fun_and_grad, x, f, g, p, step0)
        n_evals += evals
        if not ok:
            if len(pairs) > 0:
                # retry once along steepest descent before giving up
                pairs.clear()
                p = -g
                alpha, f_new, g_new, evals, ok = _wolfe_search(fun_and_grad, x, f, g, p, initial_step)
                n_evals += evals
            if not ok:
                message = "line search failed"
                break
        s = alpha * p
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            pairs.append((s, y, 1.0 / sy))
        x = x + s
        f, g = f_new, g_new
    gnorm = float(np.max(np.abs(g))) if g.size else 0.0
    converged = gnorm < gtol
    if converged:
        message = "gradient tolerance reached"
    return OptimResult(x, f, g, it, n_evals, converged, message)
