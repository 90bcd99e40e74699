"""Recurrent half-quadratic splitting with a learned prior and task-specific data steps.

Every outer iteration ``t`` applies the same prior proximal operator to the
previous estimate, then solves the task's quadratic data step in closed form
with the penalty ``rho_t = rho0 * growth**(t-1)``.  Optional plug-in priors add
one more consensus variable each (``v_t = denoiser(x_{t-1}, tau / rho_s)``).
"""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.ndimage

from .data_prox import BinaryMask, DataProxInputs, DenseMatrix, solve, solve_consensus
from .errors import ConfigurationError, InputError, InvariantError
from .imaging import as_image, psnr
from .prior import _stage_forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HqsConfig:
    T: int = 3
    rho0: float = 1.0
    rho_growth: float = 2.0
    lambda_override: Optional[float] = None
    keep_images: bool = False

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise ConfigurationError(f"T must be a positive integer, got {self.T}")
        if not self.rho0 > 0:
            raise ConfigurationError("rho0 must be positive")
        if not self.rho_growth >= 1:
            raise ConfigurationError("rho_growth must be >= 1")
        if self.lambda_override is not None and not (
            math.isfinite(self.lambda_override) and self.lambda_override > 0
        ):
            raise ConfigurationError("lambda_override must be positive and finite")

    def rho(self, t):
        return self.rho0 * self.rho_growth ** (t - 1)


@dataclass
class HqsRecord:
    t: int
    rho: float
    gap: float
    psnr: Optional[float] = None
    x: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None
    plugin_rhos: tuple = ()

    def as_dict(self):
        d = {"t": self.t, "rho": self.rho, "gap": self.gap}
        if self.psnr is not None:
            d["psnr"] = self.psnr
        if self.plugin_rhos:
            d["plugin_rhos"] = list(self.plugin_rhos)
        return d


@dataclass
class HqsTrace:
    records: list = field(default_factory=list)
    lam: float = float("nan")
    init_method: str = "observation"

    def __len__(self):
        return len(self.records)

    def to_jsonl(self):
        return "".join(json.dumps(r.as_dict()) + "\n" for r in self.records)


@dataclass(frozen=True)
class PluginPrior:
    """An external denoiser used as an extra proximal block.

    ``denoiser(img, strength)`` must return an image of the same shape; it is
    called with ``strength = tau / rho_s`` where ``rho_s`` follows its own
    geometric schedule.
    """

    denoiser: Callable
    tau: float
    rho0: float = 1.0
    rho_growth: float = 2.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigurationError("plugin tau must be positive")
        if not self.rho0 > 0 or not self.rho_growth >= 1:
            raise ConfigurationError("plugin rho schedule must satisfy rho0 > 0, growth >= 1")

    def rho(self, t):
        return self.rho0 * self.rho_growth ** (t - 1)


def gaussian_denoiser(width_per_strength=0.1):
    """Plug-in smoother: Gaussian blur (periodic boundary) with width ``width_per_strength * strength`` pixels."""

    def denoise(img, strength):
        return scipy.ndimage.gaussian_filter(img, width_per_strength * strength, mode="wrap")

    return denoise


def nearest_fill(b, mask):
    """Replace each unobserved pixel by its nearest observed neighbour (Euclidean, ties by scan order)."""
    b = np.asarray(b, dtype=np.float64)
    mask = np.asarray(mask) != 0
    if mask.all() or not mask.any():
        return b.copy()
    _, (iy, ix) = scipy.ndimage.distance_transform_edt(~mask, return_indices=True)
    return b[iy, ix]


def initial_estimate(b, task):
    """Starting point ``x0``; returns ``(x0, method_name)``."""
    s = task.sensing
    if isinstance(s, BinaryMask):
        return nearest_fill(b, s.mask), "nearest-observed"
    if isinstance(s, DenseMatrix):
        if s.matrix.shape[0] != s.matrix.shape[1]:
            raise ConfigurationError("a non-square dense sensing matrix needs an explicit x0")
        return b.copy(), "observation"
    return b.copy(), "observation"


def prox(x, prior):
    """Apply the prior proximal operator without recording a tape."""
    z = x
    for stage in prior.stages:
        z, _ = _stage_forward(z, stage)
    return z


def _resolve_lambda(task, model, cfg):
    if cfg.lambda_override is not None:
        return float(cfg.lambda_override)
    return model.lam(task.class_id)


def _gap(x, z):
    nx = np.linalg.norm(x)
    return float(np.linalg.norm(z - x) / nx) if nx > 0 else float(np.linalg.norm(z - x))


def _run(b, task, model, cfg, plugins, reference, x0):
    b = as_image(b, "observation")
    lam = _resolve_lambda(task, model, cfg)
    trained_T = model.metadata.get("T")
    if trained_T is not None and trained_T != cfg.T:
        log.info("running T=%d with a model trained at T=%s", cfg.T, trained_T)
    if x0 is None:
        x, method = initial_estimate(b, task)
    else:
        x, method = as_image(x0, "x0"), "given"
    trace = HqsTrace([], lam, method)
    for t in range(1, cfg.T + 1):
        rho = cfg.rho(t)
        z = prox(x, model.prior)
        if plugins:
            targets = [(rho, z)]
            for p in plugins:
                rs = p.rho(t)
                v = np.asarray(p.denoiser(x, p.tau / rs), dtype=np.float64)
                if v.shape != x.shape:
                    raise InvariantError(f"plugin returned shape {v.shape}, expected {x.shape}")
                targets.append((rs, v))
            x = solve_consensus(b, task, lam, targets)
            prs = tuple(p.rho(t) for p in plugins)
        else:
            x = solve(DataProxInputs(b, z, lam, rho), task)
            prs = ()
        if not np.all(np.isfinite(x)):
            raise InvariantError(f"non-finite estimate at iteration {t}")
        rec = HqsRecord(t, rho, _gap(x, z), plugin_rhos=prs)
        if reference is not None:
            rec.psnr = psnr(x, reference, model.peak)
        if cfg.keep_images:
            rec.x, rec.z = x, z
        trace.records.append(rec)
    return x, trace


def restore(b, task, model, cfg=HqsConfig(), reference=None, x0=None):
    """Run ``cfg.T`` HQS iterations; returns ``(x, trace)``.

    ``reference`` (optional) adds per-iteration PSNR to the trace.  The
    fidelity weight comes from ``cfg.lambda_override`` if set, otherwise from
    the model's entry for ``task.class_id``.
    """
    return _run(b, task, model, cfg, (), reference, x0)


def restore_with_plugins(b, task, model, cfg=HqsConfig(), plugins=(), reference=None, x0=None):
    """HQS with extra plug-in prior blocks; identical to :func:`restore` for an empty list."""
    return _run(b, task, model, cfg, tuple(plugins), reference, x0)


def consensus_gap(trace):
    """``||z_t - x_t|| / ||x_t||`` for every iteration."""
    if not trace.records:
        raise InputError("empty trace")
    return [r.gap for r in trace.records]
