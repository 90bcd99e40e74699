"""The shared prior proximal operator: a K-stage nonlinear diffusion.

Each stage maps ``z -> z - sum_i F_i^T psi_i(F_i z)`` where ``F_i`` is circular
convolution with a zero-mean filter and ``psi_i`` a Gaussian-RBF influence
function.  There is no reaction term and no dependence on the splitting
penalty, so the same operator is valid at every outer iteration.

Filters are stored as coefficients over the non-DC atoms of the orthonormal
2-D DCT, which keeps every filter zero-mean for any coefficient vector.
"""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import InputError, InvariantError
from .imaging import convolve, convolve_transpose, filter_gradient
from .rbf import RbfFunction, RbfGrid, apply_bank, fit_weights, weight_grad_bank


@lru_cache(maxsize=None)
def dct_basis(size):
    """Non-DC orthonormal DCT-II atoms of a ``size x size`` patch, lowest frequency first.

    Returns a read-only array of shape ``(size*size - 1, size, size)``.
    """
    if size < 3 or size % 2 != 1:
        raise InputError(f"filter size must be odd and at least 3, got {size}")
    n = np.arange(size)
    cos = np.cos(np.pi * (2 * n[None, :] + 1) * n[:, None] / (2 * size))
    cos *= np.sqrt(2.0 / size)
    cos[0] /= np.sqrt(2.0)
    order = sorted(
        ((u, v) for u in range(size) for v in range(size) if (u, v) != (0, 0)),
        key=lambda uv: (uv[0] + uv[1], max(uv), uv[0]),
    )
    atoms = np.stack([np.outer(cos[u], cos[v]) for u, v in order])
    atoms.setflags(write=False)
    return atoms


def _frozen(arr):
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DiffusionStage:
    """Filters (as DCT coefficients) and RBF weights of one diffusion stage."""

    coeffs: np.ndarray  # (N, size*size - 1)
    weights: np.ndarray  # (N, M)
    size: int
    grid: RbfGrid

    def __post_init__(self):
        object.__setattr__(self, "coeffs", _frozen(self.coeffs))
        object.__setattr__(self, "weights", _frozen(self.weights))
        nb = self.size * self.size - 1
        if self.coeffs.ndim != 2 or self.coeffs.shape[1] != nb:
            raise InputError(f"coeffs must have shape (N, {nb}), got {self.coeffs.shape}")
        if self.weights.shape != (self.coeffs.shape[0], self.grid.count):
            raise InputError(
                f"weights must have shape ({self.coeffs.shape[0]}, {self.grid.count}), got {self.weights.shape}"
            )
        if not (np.all(np.isfinite(self.coeffs)) and np.all(np.isfinite(self.weights))):
            raise InputError("stage parameters must be finite")

    @property
    def n_filters(self):
        return self.coeffs.shape[0]

    @property
    def filters(self):
        basis = dct_basis(self.size)
        return (self.coeffs @ basis.reshape(basis.shape[0], -1)).reshape(-1, self.size, self.size)

    @property
    def influences(self):
        return [RbfFunction.on_grid(self.grid, w) for w in self.weights]

    @property
    def n_params(self):
        return self.coeffs.size + self.weights.size


@dataclass(frozen=True)
class PriorProx:
    stages: tuple

    def __post_init__(self):
        stages = tuple(self.stages)
        object.__setattr__(self, "stages", stages)
        if not stages:
            raise InputError("a prior needs at least one stage")
        first = stages[0]
        for s in stages[1:]:
            if s.size != first.size or s.grid != first.grid or s.n_filters != first.n_filters:
                raise InputError("all stages must share filter count, size and RBF grid")

    @property
    def n_stages(self):
        return len(self.stages)

    @property
    def n_filters(self):
        return self.stages[0].n_filters

    @property
    def size(self):
        return self.stages[0].size

    @property
    def grid(self):
        return self.stages[0].grid

    @property
    def n_params(self):
        return sum(s.n_params for s in self.stages)

    def to_vector(self):
        return np.concatenate([np.concatenate([s.coeffs.ravel(), s.weights.ravel()]) for s in self.stages])

    def with_vector(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_params:
            raise InputError(f"expected {self.n_params} parameters, got {vec.size}")
        stages, pos = [], 0
        for s in self.stages:
            nc, nw = s.coeffs.size, s.weights.size
            stages.append(DiffusionStage(
                vec[pos:pos + nc].reshape(s.coeffs.shape),
                vec[pos + nc:pos + nc + nw].reshape(s.weights.shape),
                s.size, s.grid,
            ))
            pos += nc + nw
        return PriorProx(tuple(stages))

    def append_stage(self, stage):
        return PriorProx(self.stages + (stage,))

    def equals(self, other):
        return (
            isinstance(other, PriorProx)
            and self.n_stages == other.n_stages
            and self.grid == other.grid
            and self.size == other.size
            and np.array_equal(self.to_vector(), other.to_vector())
        )


def shrinkage_profile(scale, threshold):
    """Influence of a Huber penalty, ``scale * clip(v, -threshold, threshold)``."""
    return lambda v: scale * np.clip(v, -threshold, threshold)


def initial_stage(n_filters=24, size=5, grid=None, scale=None, threshold=10.0):
    """Lowest-frequency unit DCT atoms with a clipped-linear influence profile.

    ``scale`` defaults to ``1 / size**2``; the filter bank's normal operator
    is bounded by ``size**2`` so the linear part of the step stays contractive.
    """
    grid = grid or RbfGrid()
    nb = size * size - 1
    if n_filters > nb:
        raise InputError(f"at most {nb} zero-mean filters exist for size {size}")
    if scale is None:
        scale = 1.0 / size ** 2
    coeffs = np.zeros((n_filters, nb))
    coeffs[np.arange(n_filters), np.arange(n_filters)] = 1.0
    w = fit_weights(grid, shrinkage_profile(scale, threshold))
    weights = np.tile(w, (n_filters, 1))
    return DiffusionStage(coeffs, weights, size, grid)


def initial_prior(n_stages=3, n_filters=24, size=5, grid=None, **kwargs):
    stage = initial_stage(n_filters, size, grid, **kwargs)
    return PriorProx((stage,) * n_stages)


def zero_prior(n_stages=1, n_filters=1, size=3, grid=None):
    """A prior whose influence functions vanish, so its proximal map is the identity."""
    stage = initial_stage(n_filters, size, grid or RbfGrid(), scale=0.0)
    stage = DiffusionStage(stage.coeffs, np.zeros_like(stage.weights), size, stage.grid)
    return PriorProx((stage,) * n_stages)


def random_prior(rng, n_stages=2, n_filters=2, size=3, grid=None, weight_scale=1.0):
    """Random parameters for tests and gradient checks."""
    grid = grid or RbfGrid()
    nb = size * size - 1
    stages = []
    for _ in range(n_stages):
        coeffs = rng.normal(size=(n_filters, nb)) / np.sqrt(nb)
        weights = weight_scale * rng.normal(size=(n_filters, grid.count))
        stages.append(DiffusionStage(coeffs, weights, size, grid))
    return PriorProx(tuple(stages))


@dataclass
class _StageRecord:
    z_in: np.ndarray
    responses: np.ndarray
    psi: np.ndarray
    dpsi: np.ndarray


@dataclass
class StageTape:
    """Intermediates of one forward pass, consumed by :func:`prior_prox_backward`."""

    model: PriorProx
    records: list = field(default_factory=list)
    shape: tuple = ()


def _stage_forward(z, stage):
    filters = stage.filters
    responses = np.stack([convolve(z, f) for f in filters])
    psi, dpsi = apply_bank(responses, stage.weights, stage.grid)
    acc = np.zeros_like(z)
    for i, f in enumerate(filters):
        acc += convolve_transpose(psi[i], f)
    return z - acc, _StageRecord(z, responses, psi, dpsi)


def diffusion_step(z_prev, stage):
    """One explicit diffusion step ``z - sum_i F_i^T psi_i(F_i z)``."""
    z_prev = np.asarray(z_prev, dtype=np.float64)
    out, _ = _stage_forward(z_prev, stage)
    return out


def prior_prox_forward(x, model):
    """Run all stages from ``z_0 = x``; returns ``(z, tape)``."""
    z = np.asarray(x, dtype=np.float64)
    tape = StageTape(model, [], z.shape)
    for stage in model.stages:
        z, rec = _stage_forward(z, stage)
        tape.records.append(rec)
    return z, tape


@dataclass
class PriorGradient:
    """Per-stage parameter gradients, matching :class:`PriorProx` layout."""

    coeffs: list
    weights: list

    def to_vector(self):
        return np.concatenate([np.concatenate([c.ravel(), w.ravel()]) for c, w in zip(self.coeffs, self.weights)])


def _stage_backward(rec, stage, g, need_params):
    filters = stage.filters
    fg = np.stack([convolve(g, f) for f in filters])
    q = rec.dpsi * fg
    acc = np.zeros_like(g)
    for i, f in enumerate(filters):
        acc += convolve_transpose(q[i], f)
    dz = g - acc
    if not need_params:
        return dz, None, None
    dweights = -weight_grad_bank(rec.responses, fg, stage.grid)
    basis = dct_basis(stage.size)
    dtaps = np.stack([
        -(filter_gradient(g, rec.psi[i], stage.size) + filter_gradient(rec.z_in, q[i], stage.size))
        for i in range(stage.n_filters)
    ])
    dcoeffs = dtaps.reshape(stage.n_filters, -1) @ basis.reshape(basis.shape[0], -1).T
    return dz, dcoeffs, dweights


def prior_prox_backward(tape, dL_dz, model=None, trainable=None):
    """Reverse-mode pass through a recorded forward evaluation.

    Returns ``(dL_dx, PriorGradient)``.  Stages whose index is not in
    ``trainable`` (all stages when ``None``) get zero parameter gradients
    without doing the work.
    """
    dL_dz = np.asarray(dL_dz, dtype=np.float64)
    if model is not None and model is not tape.model and not model.equals(tape.model):
        raise InvariantError("tape was recorded with a different model")
    if dL_dz.shape != tape.shape:
        raise InvariantError(f"gradient shape {dL_dz.shape} does not match tape shape {tape.shape}")
    if len(tape.records) != tape.model.n_stages:
        raise InvariantError("tape is incomplete")
    g = dL_dz
    stages = tape.model.stages
    dcoeffs = [None] * len(stages)
    dweights = [None] * len(stages)
    for k in range(len(stages) - 1, -1, -1):
        need = trainable is None or k in trainable
        g, dc, dw = _stage_backward(tape.records[k], stages[k], g, need)
        if dc is None:
            dc = np.zeros(stages[k].coeffs.shape)
            dw = np.zeros(stages[k].weights.shape)
        dcoeffs[k] = dc
        dweights[k] = dw
    return g, PriorGradient(dcoeffs, dweights)
