"""Limited-memory BFGS with a strong-Wolfe line search."""

import logging
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import line_search
from scipy.optimize._linesearch import LineSearchWarning

log = logging.getLogger(__name__)


@dataclass
class MinimizeResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int = 0
    n_evals: int = 0
    warning: bool = False
    message: str = ""
    history: list = field(default_factory=list)  # (iteration, f, |g|_inf, step)


class _Evaluator:
    """Caches the last evaluation and remembers the best point seen."""

    def __init__(self, f_and_grad):
        self.fg = f_and_grad
        self.n = 0
        self.last_x = None
        self.last = None
        self.best = None

    def __call__(self, x):
        if self.last_x is not None and np.array_equal(x, self.last_x):
            return self.last
        f, g = self.fg(x)
        f = float(f)
        g = np.asarray(g, dtype=np.float64)
        self.n += 1
        self.last_x = np.array(x, copy=True)
        self.last = (f, g)
        if np.isfinite(f) and (self.best is None or f < self.best[1]):
            self.best = (self.last_x, f, g)
        return f, g

    def f(self, x):
        return self(x)[0]

    def g(self, x):
        return self(x)[1]


def _two_loop(g, pairs):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def _backtrack(ev, x, d, f, g, c1, alpha, max_evals):
    slope = g @ d
    for _ in range(max_evals):
        fn = ev.f(x + alpha * d)
        if np.isfinite(fn) and fn <= f + c1 * alpha * slope:
            return alpha
        alpha *= 0.25
    return None


def quasi_newton_minimize(
    f_and_grad,
    x0,
    iters=100,
    memory=10,
    gtol=1e-10,
    ftol=0.0,
    c1=1e-4,
    c2=0.9,
    max_ls=20,
    callback=None,
):
    """Minimize ``f`` given ``f_and_grad(x) -> (f, grad)``.

    Every accepted step satisfies the sufficient-decrease condition, so the
    accepted objective values never increase.  If the Wolfe search fails the
    memory is dropped and a backtracking search along ``-grad`` is tried; if
    that fails too the run stops with ``warning=True``.  The best point seen
    over all evaluations is returned.
    """
    ev = _Evaluator(f_and_grad)
    x = np.array(x0, dtype=np.float64, copy=True)
    f, g = ev(x)
    if not np.isfinite(f):
        raise FloatingPointError("objective is not finite at the starting point")
    pairs = deque(maxlen=max(1, memory))
    result = MinimizeResult(x, f, g)
    old_f = None
    message = "iteration limit reached"
    k = 0
    for k in range(1, iters + 1):
        if np.max(np.abs(g)) <= gtol:
            message = "gradient tolerance reached"
            k -= 1
            break
        d = _two_loop(g, list(pairs))
        if not g @ d < 0:
            pairs.clear()
            d = -g
        first = not pairs
        alpha = None
        if not first:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", LineSearchWarning)
                alpha = line_search(ev.f, ev.g, x, d, g, f, old_f, c1=c1, c2=c2, maxiter=max_ls)[0]
        if alpha is None:
            if not first:
                log.info("line search failed at iteration %d; restarting with empty memory", k)
                pairs.clear()
                d = -g
            alpha0 = 1.0 / max(1.0, np.sqrt(g @ g))
            alpha = _backtrack(ev, x, d, f, g, c1, alpha0 * 4.0, max_ls)
            if alpha is None:
                result.warning = True
                message = "line search failed"
                k -= 1
                break
        x_new = x + alpha * d
        f_new, g_new = ev(x_new)
        if not np.isfinite(f_new):
            result.warning = True
            message = "non-finite objective"
            k -= 1
            break
        s = x_new - x
        y = g_new - g
        sy = s @ y
        if sy > 1e-12 * np.sqrt((s @ s) * (y @ y)):
            pairs.append((s, y, 1.0 / sy))
        old_f, f_prev = f, f
        x, f, g = x_new, f_new, g_new
        step = float(np.sqrt(s @ s))
        result.history.append((k, f, float(np.max(np.abs(g))), step))
        log.debug("iter %d f=%.10g |g|=%.3g step=%.3g", k, f, np.max(np.abs(g)), step)
        if callback is not None:
            callback(k, x, f, g)
        if step == 0.0:
            message = "no progress"
            break
        if ftol > 0 and f_prev - f <= ftol * max(1.0, abs(f)):
            message = "function tolerance reached"
            break
    best_x, best_f, best_g = ev.best
    result.x, result.fun, result.grad = best_x, best_f, best_g
    result.n_iter = k
    result.n_evals = ev.n
    result.message = message
    return result
