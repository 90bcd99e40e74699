"""End-to-end training of the prior and the per-class fidelity weights.

The loss is the negative mean PSNR of the unrolled HQS output over a batch of
samples drawn from several problem classes.  Gradients are exact: the
backward pass walks the unrolled iterations in reverse, alternating the
closed-form data-step derivatives and the diffusion-stage adjoints, and
collects ``d loss / d log(lambda_p)`` per class.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .data_prox import DataProxInputs, data_prox_backward, solve
from .errors import ConfigurationError, InputError, NumericalError
from .hqs import HqsConfig, initial_estimate
from .params import ModelParams
from .prior import PriorProx, initial_stage, prior_prox_backward, prior_prox_forward
from .rbf import RbfGrid

log = logging.getLogger(__name__)

PSNR_CAP = 60.0
_DB = 10.0 / math.log(10.0)


def capped_psnr(x, gt, peak, cap=PSNR_CAP):
    """PSNR clamped at ``cap`` and its gradient with respect to ``x`` (zero at the clamp)."""
    diff = x - gt
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return cap, np.zeros_like(x)
    value = _DB * math.log(peak * peak / mse)
    if value >= cap:
        return cap, np.zeros_like(x)
    return value, (-_DB * 2.0 / (mse * diff.size)) * diff


@dataclass
class _Group:
    """Samples sharing one image shape, stacked so the prior runs batched."""

    index: list
    b: np.ndarray
    gt: np.ndarray
    x0: np.ndarray
    tasks: list


def _group(samples):
    by_shape = {}
    for i, s in enumerate(samples):
        by_shape.setdefault(s.b.shape, []).append(i)
    groups = []
    for shape in sorted(by_shape):
        idx = by_shape[shape]
        groups.append(_Group(
            idx,
            np.stack([samples[i].b for i in idx]),
            np.stack([samples[i].ground_truth for i in idx]),
            np.stack([initial_estimate(samples[i].b, samples[i].task)[0] for i in idx]),
            [samples[i].task for i in idx],
        ))
    return groups


class Objective:
    """Loss and exact gradient of the unrolled network over a fixed sample list.

    ``frozen_prefix`` stages (only meaningful with ``T == 1``) are evaluated
    once and cached, since their input ``x0`` never changes.
    """

    def __init__(self, samples, T, cfg=None, cap=PSNR_CAP, peak=None):
        if not samples:
            raise InputError("need at least one training sample")
        self.samples = list(samples)
        self.T = int(T)
        self.cfg = cfg or HqsConfig(T=self.T)
        self.cap = cap
        self.peak = peak
        self.groups = _group(self.samples)
        self._prefix = None

    def _lambdas(self, model):
        return [[model.lam(t.class_id) for t in g.tasks] for g in self.groups]

    def set_frozen_prefix(self, prior, n_frozen):
        if n_frozen and self.T != 1:
            raise ConfigurationError("frozen-prefix caching requires T == 1")
        if n_frozen == 0:
            self._prefix = None
            return
        sub = PriorProx(prior.stages[:n_frozen])
        self._prefix = (n_frozen, sub, [prior_prox_forward(g.x0, sub)[0] for g in self.groups])

    def evaluate(self, model, need_grad=True, trainable=None):
        """Return ``(loss, grad_vector or None, per_sample_psnr)``."""
        peak = self.peak or model.peak
        lambdas = self._lambdas(model)
        n = len(self.samples)
        prior = model.prior
        start = 0
        if self._prefix is not None:
            start, sub, _ = self._prefix
            if not PriorProx(prior.stages[:start]).equals(sub):
                raise ConfigurationError("frozen stages changed since the prefix was cached")
            prior = PriorProx(prior.stages[start:])
        loss = 0.0
        psnrs = np.empty(n)
        grad_stages = [(np.zeros(s.coeffs.shape), np.zeros(s.weights.shape)) for s in model.prior.stages]
        grad_loglam = {k: 0.0 for k in model.class_ids}
        active = None if trainable is None else {k - start for k in trainable if k >= start}
        for gi, g in enumerate(self.groups):
            x = g.x0
            tapes, xs, zs = [], [], []
            for t in range(1, self.T + 1):
                rho = self.cfg.rho(t)
                if t == 1 and self._prefix is not None:
                    z, tape = prior_prox_forward(self._prefix[2][gi], prior)
                else:
                    z, tape = prior_prox_forward(x, prior)
                x = np.stack([
                    solve(DataProxInputs(g.b[j], z[j], lambdas[gi][j], rho), g.tasks[j])
                    for j in range(len(g.index))
                ])
                if not np.all(np.isfinite(x)):
                    raise NumericalError(f"non-finite estimate at iteration {t}")
                tapes.append(tape)
                xs.append(x)
                zs.append(z)
            gx = np.empty_like(x)
            for j, i in enumerate(g.index):
                value, dvalue = capped_psnr(x[j], g.gt[j], peak, self.cap)
                psnrs[i] = value
                loss -= value / n
                gx[j] = -dvalue / n
            if not need_grad:
                continue
            for t in range(self.T, 0, -1):
                rho = self.cfg.rho(t)
                gz = np.empty_like(gx)
                for j in range(len(g.index)):
                    lam = lambdas[gi][j]
                    inp = DataProxInputs(g.b[j], zs[t - 1][j], lam, rho)
                    gz[j], dlam = data_prox_backward(inp, gx[j], g.tasks[j], x=xs[t - 1][j])
                    grad_loglam[g.tasks[j].class_id] += dlam * lam
                need_input_grad = t > 1
                gx_prev, pg = prior_prox_backward(tapes[t - 1], gz, trainable=active)
                for k in range(prior.n_stages):
                    if active is None or k in active:
                        grad_stages[k + start][0][...] += pg.coeffs[k]
                        grad_stages[k + start][1][...] += pg.weights[k]
                if need_input_grad:
                    gx = gx_prev
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite loss {loss}")
        if not need_grad:
            return loss, None, psnrs
        vec = np.concatenate(
            [np.concatenate([c.ravel(), w.ravel()]) for c, w in grad_stages]
            + [np.array([grad_loglam[k] for k in model.class_ids])]
        )
        return loss, vec, psnrs


def _check_classes(model, samples):
    missing = sorted({s.task.class_id for s in samples} - set(model.log_lambdas))
    if missing:
        raise ConfigurationError(f"model has no fidelity weight for classes {missing}")


def loss(model, samples, T, cap=PSNR_CAP):
    """Negative mean (capped) PSNR of ``T``-iteration restorations."""
    _check_classes(model, samples)
    return Objective(samples, T, cap=cap).evaluate(model, need_grad=False)[0]


def loss_grad(model, samples, T, cap=PSNR_CAP):
    """Gradient of :func:`loss` in :meth:`ModelParams.to_vector` layout."""
    _check_classes(model, samples)
    return Objective(samples, T, cap=cap).evaluate(model)[1]


@dataclass
class TrainConfig:
    T_final: int = 3
    n_stages: int = 3
    n_filters: int = 24
    filter_size: int = 5
    rbf_count: int = 63
    rbf_extent: float = 310.0
    rbf_bandwidth: float = 0.0
    init_scale: Optional[float] = None
    init_threshold: float = 10.0
    init_lambda: dict = field(default_factory=dict)
    greedy_iters: int = 200
    refine_iters: int = 100
    memory: int = 10
    batch_size: Optional[int] = None  # experimental minibatch mode; None = full batch
    seed: int = 0
    psnr_cap: float = PSNR_CAP

    def __post_init__(self):
        if self.T_final < 1 or self.n_stages < 1:
            raise ConfigurationError("T_final and n_stages must be >= 1")
        if self.greedy_iters < 0 or self.refine_iters < 0:
            raise ConfigurationError("iteration counts must be non-negative")

    @property
    def grid(self):
        return RbfGrid(self.rbf_count, self.rbf_extent, self.rbf_bandwidth)


def default_lambda(task):
    """Starting fidelity weight: inverse noise variance, scaled so sigma=15 gives 0.25."""
    sigma = max(task.noise_sigma, 1.0)
    return 56.25 / sigma ** 2


def initial_model(samples, cfg):
    lambdas = {}
    for s in samples:
        cid = s.task.class_id
        if cid not in lambdas:
            lambdas[cid] = cfg.init_lambda.get(cid, default_lambda(s.task))
    stage = initial_stage(cfg.n_filters, cfg.filter_size, cfg.grid, cfg.init_scale, cfg.init_threshold)
    return ModelParams.create(PriorProx((stage,)), lambdas)


def _param_slices(model):
    """Index arrays of each stage's parameters and of the log-lambdas in the full vector."""
    slices, pos = [], 0
    for s in model.prior.stages:
        slices.append(np.arange(pos, pos + s.n_params))
        pos += s.n_params
    return slices, np.arange(pos, pos + len(model.log_lambdas))


@dataclass
class PhaseLog:
    tag: str
    T: int
    iterations: int
    evaluations: int
    loss_start: float
    loss_end: float
    message: str
    history: list

    def as_dict(self):
        return asdict(self)


def _minimize_phase(model, samples, T, iters, cfg, trainable_stages, tag, logger):
    from .lbfgs import quasi_newton_minimize

    obj = Objective(samples, T, cap=cfg.psnr_cap)
    slices, lam_idx = _param_slices(model)
    if trainable_stages is None:
        idx = np.arange(model.n_params)
        active = None
    else:
        idx = np.concatenate([slices[k] for k in trainable_stages] + [lam_idx])
        active = set(trainable_stages)
        frozen = min(trainable_stages)
        if T == 1 and frozen > 0 and cfg.batch_size is None:
            obj.set_frozen_prefix(model.prior, frozen)
    base = model.to_vector()

    def f_and_grad(sub):
        full = base.copy()
        full[idx] = sub
        value, grad, _ = obj.evaluate(model.with_vector(full), trainable=active)
        return value, grad[idx]

    start_loss = obj.evaluate(model, need_grad=False)[0]
    if iters == 0:
        return model, PhaseLog(tag, T, 0, 1, start_loss, start_loss, "skipped", [])

    def on_iter(k, x, f, g):
        if logger is not None:
            logger({"phase": tag, "T": T, "iter": k, "loss": f, "grad_norm": float(np.linalg.norm(g))})

    if cfg.batch_size is None:
        res = quasi_newton_minimize(f_and_grad, base[idx], iters=iters, memory=cfg.memory, callback=on_iter)
        sub, message, n_iter, n_evals, history = res.x, res.message, res.n_iter, res.n_evals, res.history
        if res.warning:
            log.warning("phase %s: %s", tag, res.message)
    else:
        rng = np.random.default_rng(cfg.seed)
        sub = base[idx]
        n_iter = n_evals = 0
        history = []
        order = rng.permutation(len(samples))
        batches = [order[i:i + cfg.batch_size] for i in range(0, len(samples), cfg.batch_size)]
        per_batch = max(1, iters // len(batches))
        for bi in batches:
            bobj = Objective([samples[i] for i in bi], T, cap=cfg.psnr_cap)

            def f_batch(v, bobj=bobj):
                full = base.copy()
                full[idx] = v
                value, grad, _ = bobj.evaluate(model.with_vector(full), trainable=active)
                return value, grad[idx]

            res = quasi_newton_minimize(f_batch, sub, iters=per_batch, memory=cfg.memory, callback=on_iter)
            sub = res.x
            n_iter += res.n_iter
            n_evals += res.n_evals
            history.extend(res.history)
        message = "minibatch epochs done"
    full = base.copy()
    full[idx] = sub
    out = model.with_vector(full)
    end_loss = obj.evaluate(out, need_grad=False)[0]
    return out, PhaseLog(tag, T, n_iter, n_evals, start_loss, end_loss, message, history)


def train_progressive(data, cfg=TrainConfig(), logger: Optional[Callable] = None, on_checkpoint=None):
    """Greedy stage-wise training at one HQS iteration, then refinement for ``T = 2 .. T_final``.

    Stage ``k`` is appended to the already-trained stages ``1..k-1`` (which
    stay frozen) and optimized together with all fidelity weights.  Each
    refinement phase then optimizes every parameter, starting from the
    previous phase's result.  ``on_checkpoint(tag, model)`` is called after
    every phase; ``logger(record)`` after every optimizer iteration.
    """
    data = list(data)
    if not data:
        raise InputError("training data is empty")
    model = initial_model(data, cfg)
    phases = []
    for k in range(cfg.n_stages):
        if k > 0:
            stage = initial_stage(cfg.n_filters, cfg.filter_size, cfg.grid, cfg.init_scale, cfg.init_threshold)
            model = model.with_prior(model.prior.append_stage(stage))
        model, plog = _minimize_phase(model, data, 1, cfg.greedy_iters, cfg, [k], f"greedy-{k + 1}", logger)
        phases.append(plog)
        log.info("greedy stage %d: loss %.4f -> %.4f", k + 1, plog.loss_start, plog.loss_end)
        if on_checkpoint is not None:
            on_checkpoint(plog.tag, model)
    for T in range(2, cfg.T_final + 1):
        model, plog = _minimize_phase(model, data, T, cfg.refine_iters, cfg, None, f"refine-T{T}", logger)
        phases.append(plog)
        log.info("refine T=%d: loss %.4f -> %.4f", T, plog.loss_start, plog.loss_end)
        if on_checkpoint is not None:
            on_checkpoint(plog.tag, model)
    cfg_echo = asdict(cfg)
    return model.with_metadata(
        T=cfg.T_final,
        K=cfg.n_stages,
        train_config=cfg_echo,
        phases=[{k: v for k, v in p.as_dict().items() if k != "history"} for p in phases],
        n_samples=len(data),
    )
