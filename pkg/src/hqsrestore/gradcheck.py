"""Central-difference validation of every analytic gradient in the package.

Each block compares an analytic gradient against central differences on a
small random instance and reports the worst per-coordinate relative error

    |analytic - numeric| / max(|analytic|, |numeric|, 1e-6 * block_scale)

where ``block_scale`` is the largest gradient magnitude in the block (the
floor keeps coordinates that are zero up to roundoff from dominating).
"""

from dataclasses import dataclass, field

import numpy as np

from .data_prox import (
    BinaryMask, ConvolutionPsf, DataProxInputs, DenseMatrix, Identity, TaskSpec,
    data_prox_backward, solve,
)
from .imaging import circulant_matrix
from .params import ModelParams
from .prior import _stage_forward, prior_prox_backward, prior_prox_forward, random_prior
from .rbf import RbfFunction, RbfGrid, rbf_eval, rbf_grad
from .synthesis import TrainingSample, degrade, random_mask, random_psf
from .training import Objective

ALL_BLOCKS = (
    "rbf", "diffusion-step", "prior-prox",
    "data-prox/identity", "data-prox/deconv", "data-prox/mask", "data-prox/dense",
    "loss",
)
TOLERANCE = 1e-4


@dataclass
class BlockResult:
    name: str
    max_rel_error: float
    worst: str
    n_coords: int
    tolerance: float = TOLERANCE

    @property
    def passed(self):
        return bool(self.max_rel_error < self.tolerance)


@dataclass
class GradcheckReport:
    blocks: list = field(default_factory=list)
    seed: int = 0

    @property
    def passed(self):
        return all(b.passed for b in self.blocks)

    def lines(self):
        out = []
        for b in self.blocks:
            status = "PASS" if b.passed else "FAIL"
            out.append(f"{status} {b.name:<20} max rel err {b.max_rel_error:.3e} "
                       f"over {b.n_coords} coords (worst: {b.worst})")
        return out


def _compare(name, analytic, numeric, labels):
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-300)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6 * scale)
    rel = np.abs(analytic - numeric) / denom
    i = int(np.argmax(rel))
    return BlockResult(name, float(rel[i]), labels[i], analytic.size)


def central_differences(fun, x, h):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(x.size)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        out[i] = (fun(x + e.reshape(x.shape)) - fun(x - e.reshape(x.shape))) / (2 * h)
    return out


def _directional(fun, x, directions, h):
    return np.array([(fun(x + h * d) - fun(x - h * d)) / (2 * h) for d in directions])


def _corrupt(analytic, block, corrupt):
    if corrupt != block:
        return analytic
    analytic = np.array(analytic, dtype=np.float64, copy=True).ravel()
    i = int(np.argmax(np.abs(analytic)))
    analytic[i] += 1e-2 * max(abs(analytic[i]), 1.0)
    return analytic


def check_rbf(rng, grid, corrupt=None):
    fn = RbfFunction.on_grid(grid, rng.normal(size=grid.count))
    vs = rng.uniform(-grid.extent, grid.extent, 20)
    h = 1e-5 * grid.extent
    d_dv = np.array([rbf_grad(fn, v)[0] for v in vs])
    num_v = np.array([(rbf_eval(fn, v + h) - rbf_eval(fn, v - h)) / (2 * h) for v in vs])
    v0 = vs[0]
    d_dw = rbf_grad(fn, v0)[1]

    def in_w(w):
        return rbf_eval(RbfFunction.on_grid(grid, w), v0)

    num_w = central_differences(in_w, fn.weights, 1e-4)
    analytic = _corrupt(np.concatenate([d_dv, d_dw]), "rbf", corrupt)
    labels = [f"d/dv at v[{i}]" for i in range(vs.size)] + [f"d/dweight[{j}]" for j in range(grid.count)]
    return _compare("rbf", analytic, np.concatenate([num_v, num_w]), labels)


def _prior_block(name, rng, prior, shape, corrupt):
    x = rng.uniform(0, 255, shape)
    G = rng.normal(size=shape)
    _, tape = prior_prox_forward(x, prior)
    dx, pg = prior_prox_backward(tape, G)
    vec = prior.to_vector()

    def in_params(v):
        return float(np.sum(G * prior_prox_forward(x, prior.with_vector(v))[0]))

    def in_x(xx):
        return float(np.sum(G * prior_prox_forward(xx, prior)[0]))

    dirs = [rng.normal(size=shape) for _ in range(3)]
    num = np.concatenate([central_differences(in_params, vec, 1e-4), _directional(in_x, x, dirs, 1e-4)])
    ana = np.concatenate([pg.to_vector(), [np.sum(dx * d) for d in dirs]])
    ana = _corrupt(ana, name, corrupt)
    labels = _prior_labels(prior) + [f"input direction {i}" for i in range(len(dirs))]
    return _compare(name, ana, num, labels)


def _prior_labels(prior):
    labels = []
    for k, s in enumerate(prior.stages):
        labels += [f"stage {k} filter {i} coeff {j}" for i in range(s.n_filters) for j in range(s.coeffs.shape[1])]
        labels += [f"stage {k} filter {i} rbf weight {j}" for i in range(s.n_filters) for j in range(s.weights.shape[1])]
    return labels


def check_diffusion_step(rng, grid, arch, corrupt=None):
    _, N, f, _ = arch
    prior = random_prior(rng, 1, N, f, grid, weight_scale=20.0)
    return _prior_block("diffusion-step", rng, prior, (10, 10), corrupt)


def check_prior_prox(rng, grid, arch, corrupt=None):
    K, N, f, _ = arch
    prior = random_prior(rng, K, N, f, grid, weight_scale=20.0)
    return _prior_block("prior-prox", rng, prior, (10, 10), corrupt)


def check_data_prox(rng, kind, corrupt=None):
    shape = (8, 8)
    if kind == "identity":
        sensing = Identity()
    elif kind == "deconv":
        sensing = ConvolutionPsf(random_psf(5, rng))
    elif kind == "mask":
        sensing = BinaryMask(random_mask(shape, 0.5, rng))
    else:
        sensing = DenseMatrix(rng.normal(size=(48, 64)) / 8.0)
    task = TaskSpec(sensing, 5.0, kind)
    b = rng.uniform(0, 255, 48 if kind == "dense" else shape)
    z = rng.uniform(0, 255, shape)
    lam, rho = 0.7, 2.0
    G = rng.normal(size=shape)
    dz, dlam = data_prox_backward(DataProxInputs(b, z, lam, rho), G, task)

    def in_z(zz):
        return float(np.sum(G * solve(DataProxInputs(b, zz, lam, rho), task)))

    def in_lam(v):
        return float(np.sum(G * solve(DataProxInputs(b, z, float(v[0]), rho), task)))

    dirs = [rng.normal(size=shape) for _ in range(3)]
    num = np.concatenate([_directional(in_z, z, dirs, 1e-3), central_differences(in_lam, np.array([lam]), 1e-6)])
    name = f"data-prox/{kind}"
    ana = _corrupt(np.concatenate([[np.sum(dz * d) for d in dirs], [dlam]]), name, corrupt)
    labels = [f"z direction {i}" for i in range(len(dirs))] + ["lambda"]
    return _compare(name, ana, num, labels)


def check_loss(rng, grid, arch, corrupt=None, T=2):
    K, N, f, _ = arch
    shape = (12, 12)
    gts = [rng.uniform(0, 255, shape) for _ in range(2)]
    tasks = [TaskSpec.denoise(15.0, "denoise/15"), TaskSpec.deconv(random_psf(5, rng), 3.0, "deconv/3")]
    samples = [TrainingSample(degrade(g, t, rng), g, t) for g, t in zip(gts, tasks)]
    model = ModelParams.create(random_prior(rng, K, N, f, grid, weight_scale=20.0),
                               {"denoise/15": 0.3, "deconv/3": 3.0})
    obj = Objective(samples, T)
    _, grad, _ = obj.evaluate(model)
    vec = model.to_vector()
    num = central_differences(lambda v: obj.evaluate(model.with_vector(v), need_grad=False)[0], vec, 1e-4)
    labels = _prior_labels(model.prior) + [f"log lambda {k}" for k in model.class_ids]
    return _compare("loss", _corrupt(grad, "loss", corrupt), num, labels)


def run(seed=0, blocks=ALL_BLOCKS, arch=(2, 2, 3, 5), corrupt=None):
    """Run the selected blocks; ``arch = (K, N, f, M)`` sizes the random models."""
    rng = np.random.default_rng(seed)
    grid = RbfGrid(arch[3], 310.0)
    report = GradcheckReport([], seed)
    for name in blocks:
        if name == "rbf":
            res = check_rbf(rng, grid, corrupt)
        elif name == "diffusion-step":
            res = check_diffusion_step(rng, grid, arch, corrupt)
        elif name == "prior-prox":
            res = check_prior_prox(rng, grid, arch, corrupt)
        elif name.startswith("data-prox/"):
            res = check_data_prox(rng, name.split("/", 1)[1], corrupt)
        elif name == "loss":
            res = check_loss(rng, grid, arch, corrupt)
        else:
            raise ValueError(f"unknown gradcheck block {name!r}")
        report.blocks.append(res)
    return report
