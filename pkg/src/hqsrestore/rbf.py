"""Influence functions built from equidistant Gaussian radial basis functions.

``psi(v) = sum_j w_j * exp(-(v - c_j)^2 / (2 sigma^2))``

The hot loops run in numba.  Consecutive kernel values of an equidistant grid
satisfy ``k_{j+1} / k_j = exp(s^2 (u - j - 1/2))`` with ``s = spacing / sigma``
and ``u`` the response in grid units, and the ratio itself shrinks by
``exp(-s^2)`` per step.  So each response costs two exponentials plus a
multiply per center.  Centers further than ``13 sigma`` from the response
contribute less than ``exp(-84.5)`` (about 2e-37) of their weight and are
skipped.
"""

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import InputError

_CUTOFF_SIGMAS = 13.0


@dataclass(frozen=True)
class RbfGrid:
    """Shared layout of the Gaussian centers: ``count`` centers on ``[-extent, extent]``."""

    count: int = 63
    extent: float = 310.0
    bandwidth: float = 0.0  # 0 -> equal to the center spacing

    def __post_init__(self):
        if self.count < 2:
            raise InputError("an RBF grid needs at least 2 centers")
        if not self.extent > 0:
            raise InputError("RBF extent must be positive")
        if self.bandwidth == 0.0:
            object.__setattr__(self, "bandwidth", self.spacing)
        if not self.bandwidth > 0:
            raise InputError("RBF bandwidth must be positive")

    @property
    def spacing(self):
        return 2.0 * self.extent / (self.count - 1)

    @property
    def centers(self):
        return np.linspace(-self.extent, self.extent, self.count)

    @property
    def window(self):
        return _window(self.spacing, self.bandwidth, self.count)


@dataclass
class RbfFunction:
    """One scalar influence function: centers, weights and a Gaussian width."""

    centers: np.ndarray
    weights: np.ndarray
    bandwidth: float

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.centers.ndim != 1 or self.centers.size < 2:
            raise InputError("need at least 2 centers")
        if self.weights.shape != self.centers.shape:
            raise InputError("weights and centers differ in length")
        steps = np.diff(self.centers)
        if np.any(steps <= 0) or not np.allclose(steps, steps[0], rtol=1e-12, atol=0):
            raise InputError("centers must be strictly increasing and equidistant")
        if not self.bandwidth > 0:
            raise InputError("bandwidth must be positive")

    @classmethod
    def on_grid(cls, grid, weights):
        return cls(grid.centers, weights, grid.bandwidth)

    @property
    def spacing(self):
        return (self.centers[-1] - self.centers[0]) / (self.centers.size - 1)


def _window(spacing, bandwidth, count):
    return int(min(count - 1, math.ceil(_CUTOFF_SIGMAS * bandwidth / spacing)))


@njit(cache=True, nogil=True)
def _apply(resp, weights, c0, delta, sigma, window, out_val, out_der):
    n, npix = resp.shape
    m = weights.shape[1]
    s2 = (delta / sigma) ** 2
    q = math.exp(-s2)
    dscale = -delta / (sigma * sigma)
    for i in range(n):
        for p in range(npix):
            u = (resp[i, p] - c0) / delta
            j0 = int(math.floor(u + 0.5))
            if j0 < 0:
                j0 = 0
            elif j0 > m - 1:
                j0 = m - 1
            d = u - j0
            k0 = math.exp(-0.5 * s2 * d * d)
            val = weights[i, j0] * k0
            der = val * d
            k = k0
            r = math.exp(s2 * (d - 0.5))
            hi = min(m, j0 + window + 1)
            for j in range(j0 + 1, hi):
                k *= r
                r *= q
                t = weights[i, j] * k
                val += t
                der += t * (u - j)
            k = k0
            r = math.exp(s2 * (-d - 0.5))
            lo = max(-1, j0 - window - 1)
            for j in range(j0 - 1, lo, -1):
                k *= r
                r *= q
                t = weights[i, j] * k
                val += t
                der += t * (u - j)
            out_val[i, p] = val
            out_der[i, p] = der * dscale


@njit(cache=True, nogil=True)
def _weight_grad(resp, upstream, m, c0, delta, sigma, window, out):
    n, npix = resp.shape
    s2 = (delta / sigma) ** 2
    q = math.exp(-s2)
    for i in range(n):
        for p in range(npix):
            g = upstream[i, p]
            if g == 0.0:
                continue
            u = (resp[i, p] - c0) / delta
            j0 = int(math.floor(u + 0.5))
            if j0 < 0:
                j0 = 0
            elif j0 > m - 1:
                j0 = m - 1
            d = u - j0
            k0 = math.exp(-0.5 * s2 * d * d)
            out[i, j0] += g * k0
            k = k0
            r = math.exp(s2 * (d - 0.5))
            hi = min(m, j0 + window + 1)
            for j in range(j0 + 1, hi):
                k *= r
                r *= q
                out[i, j] += g * k
            k = k0
            r = math.exp(s2 * (-d - 0.5))
            lo = max(-1, j0 - window - 1)
            for j in range(j0 - 1, lo, -1):
                k *= r
                r *= q
                out[i, j] += g * k


def apply_bank(responses, weights, grid):
    """Evaluate N influence functions on their own responses.

    ``responses`` has shape ``(N, ...)`` and ``weights`` ``(N, M)``.
    Returns ``(psi, dpsi_dv)`` with the shape of ``responses``.
    """
    responses = np.asarray(responses, dtype=np.float64)
    shape = responses.shape
    flat = np.ascontiguousarray(responses.reshape(shape[0], -1))
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    val = np.empty_like(flat)
    der = np.empty_like(flat)
    _apply(flat, weights, -grid.extent, grid.spacing, grid.bandwidth, grid.window, val, der)
    return val.reshape(shape), der.reshape(shape)


def weight_grad_bank(responses, upstream, grid):
    """``out[i, j] = sum_p upstream[i, p] * k_j(responses[i, p])``, shape ``(N, M)``."""
    responses = np.asarray(responses, dtype=np.float64)
    n = responses.shape[0]
    flat = np.ascontiguousarray(responses.reshape(n, -1))
    up = np.ascontiguousarray(np.asarray(upstream, dtype=np.float64).reshape(n, -1))
    out = np.zeros((n, grid.count))
    _weight_grad(flat, up, grid.count, -grid.extent, grid.spacing, grid.bandwidth, grid.window, out)
    return out


def _fn_params(fn):
    return fn.centers[0], fn.spacing, fn.bandwidth, _window(fn.spacing, fn.bandwidth, fn.centers.size)


def rbf_eval(fn, v):
    """Value of ``fn`` at ``v`` (scalar or array)."""
    v_arr = np.asarray(v, dtype=np.float64)
    flat = np.ascontiguousarray(v_arr.reshape(1, -1))
    val = np.empty_like(flat)
    der = np.empty_like(flat)
    c0, delta, sigma, window = _fn_params(fn)
    _apply(flat, np.ascontiguousarray(fn.weights.reshape(1, -1)), c0, delta, sigma, window, val, der)
    out = val.reshape(v_arr.shape)
    return float(out) if out.ndim == 0 else out


def rbf_grad(fn, v):
    """Return ``(d/dv, d/dweights)`` of ``fn`` at ``v``.

    ``d/dweights`` has shape ``v.shape + (M,)``; entry ``j`` is the j-th Gaussian.
    """
    v_arr = np.asarray(v, dtype=np.float64)
    flat = np.ascontiguousarray(v_arr.reshape(1, -1))
    val = np.empty_like(flat)
    der = np.empty_like(flat)
    c0, delta, sigma, window = _fn_params(fn)
    _apply(flat, np.ascontiguousarray(fn.weights.reshape(1, -1)), c0, delta, sigma, window, val, der)
    kernels = np.exp(-((v_arr[..., None] - fn.centers) ** 2) / (2.0 * fn.bandwidth ** 2))
    d_dv = der.reshape(v_arr.shape)
    if d_dv.ndim == 0:
        d_dv = float(d_dv)
    return d_dv, kernels


def fit_weights(grid, target, ridge=1e-8, samples=2049):
    """Least-squares weights so the RBF sum follows ``target(v)`` on ``[-extent, extent]``."""
    v = np.linspace(-grid.extent, grid.extent, samples)
    design = np.exp(-((v[:, None] - grid.centers[None, :]) ** 2) / (2.0 * grid.bandwidth ** 2))
    gram = design.T @ design + ridge * samples * np.eye(grid.count)
    return np.linalg.solve(gram, design.T @ target(v))
