"""Closed-form data proximal operators.

Each solver returns the exact minimizer of

    lam * ||b - A x||^2 + rho * ||z - x||^2

for one family of sensing operators ``A``, together with the analytic
derivatives needed to backpropagate through it.  All derivatives use the same
identity: with ``K = lam A^T A + rho I`` and ``w = K^{-1} dL/dx``,

    dL/dz = rho * w,    dL/dlam = <w, A^T (b - A x)>.
"""

import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import InputError
from .imaging import as_filter, convolve, convolve_transpose, psf_to_otf


@dataclass(frozen=True)
class Identity:
    kind = "denoise"


@dataclass(frozen=True, eq=False)
class ConvolutionPsf:
    psf: np.ndarray
    _otfs: dict = field(default_factory=dict, init=False, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False)

    kind = "deconv"

    def __post_init__(self):
        psf = as_filter(self.psf, "psf").copy()
        psf.setflags(write=False)
        object.__setattr__(self, "psf", psf)

    def otf(self, shape):
        shape = tuple(shape[-2:])
        with self._lock:
            otf = self._otfs.get(shape)
            if otf is None:
                otf = psf_to_otf(self.psf, shape)
                otf.setflags(write=False)
                self._otfs[shape] = otf
        return otf

    def apply(self, x):
        return convolve(x, self.psf)

    def adjoint(self, y):
        return convolve_transpose(y, self.psf)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    mask: np.ndarray

    kind = "mask"

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=np.float64).copy()
        if mask.ndim != 2 or not np.all((mask == 0) | (mask == 1)):
            raise InputError("mask must be a 2-D array of zeros and ones")
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    @property
    def fraction_missing(self):
        return float(1.0 - self.mask.mean())


@dataclass(frozen=True, eq=False)
class DenseMatrix:
    """Explicit sensing matrix acting on row-major flattened images (small problems only)."""

    matrix: np.ndarray

    kind = "dense"

    def __post_init__(self):
        mat = np.asarray(self.matrix, dtype=np.float64).copy()
        if mat.ndim != 2:
            raise InputError("sensing matrix must be 2-D")
        if mat.shape[1] > 4096:
            raise InputError("dense sensing is limited to 4096 unknowns")
        mat.setflags(write=False)
        object.__setattr__(self, "matrix", mat)


@dataclass(frozen=True)
class TaskSpec:
    """Sensing operator, nominal noise level and the fidelity-weight class it belongs to."""

    sensing: object
    noise_sigma: float = 0.0
    class_id: str = ""

    def __post_init__(self):
        if not isinstance(self.sensing, (Identity, ConvolutionPsf, BinaryMask, DenseMatrix)):
            raise InputError(f"unsupported sensing operator {type(self.sensing).__name__}")
        if not self.noise_sigma >= 0:
            raise InputError("noise_sigma must be non-negative")

    @property
    def kind(self):
        return self.sensing.kind

    @classmethod
    def denoise(cls, sigma, class_id=None):
        return cls(Identity(), sigma, class_id or f"denoise/{sigma:g}")

    @classmethod
    def deconv(cls, psf, sigma, class_id=None):
        return cls(ConvolutionPsf(psf), sigma, class_id or f"deconv/{sigma:g}")

    @classmethod
    def inpaint(cls, mask, sigma, class_id=None):
        return cls(BinaryMask(mask), sigma, class_id or f"inpaint/{sigma:g}")

    def forward(self, x):
        """Apply the sensing operator ``A`` to an image."""
        s = self.sensing
        if isinstance(s, Identity):
            return np.array(x, dtype=np.float64)
        if isinstance(s, ConvolutionPsf):
            return s.apply(x)
        if isinstance(s, BinaryMask):
            return s.mask * x
        return (s.matrix @ np.asarray(x, dtype=np.float64).ravel())


@dataclass(frozen=True)
class DataProxInputs:
    b: np.ndarray
    z: np.ndarray
    lam: float
    rho: float

    def __post_init__(self):
        for name in ("lam", "rho"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise InputError(f"{name} must be positive and finite, got {v}")


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def solve_identity(inp):
    """Denoising update ``(lam b + rho z) / (lam + rho)``."""
    b, z = _same_shape(inp.b, inp.z)
    return (inp.lam * b + inp.rho * z) / (inp.lam + inp.rho)


def solve_mask(inp, mask):
    """Inpainting update ``(lam a*b + rho z) / (lam a + rho)`` with binary mask ``a``."""
    b, z = _same_shape(inp.b, inp.z)
    a = mask.mask if isinstance(mask, BinaryMask) else np.asarray(mask, dtype=np.float64)
    if a.shape != z.shape[-2:]:
        raise InputError(f"mask shape {a.shape} does not match image {z.shape}")
    return (inp.lam * a * b + inp.rho * z) / (inp.lam * a + inp.rho)


def _otf(psf, shape):
    if isinstance(psf, ConvolutionPsf):
        return psf.otf(shape)
    return psf_to_otf(psf, shape)


def solve_deconv(inp, psf):
    """Fourier-domain solve for circular blur:
    ``x = IFFT((lam conj(H) B + rho Z) / (lam |H|^2 + rho))``."""
    b, z = _same_shape(inp.b, inp.z)
    otf = _otf(psf, z.shape)
    num = inp.lam * np.conj(otf) * np.fft.fft2(b) + inp.rho * np.fft.fft2(z)
    den = inp.lam * (otf.real ** 2 + otf.imag ** 2) + inp.rho
    return np.fft.ifft2(num / den).real


def solve_dense(inp, matrix):
    """Direct Cholesky solve of ``(lam A^T A + rho I) x = lam A^T b + rho z``."""
    A = matrix.matrix if isinstance(matrix, DenseMatrix) else np.asarray(matrix, dtype=np.float64)
    z = np.asarray(inp.z, dtype=np.float64)
    b = np.asarray(inp.b, dtype=np.float64).ravel()
    n = z.size
    if A.shape != (b.size, n):
        raise InputError(f"matrix shape {A.shape} incompatible with b ({b.size}) and z ({n})")
    if n > 4096:
        raise InputError("dense solve is limited to 4096 unknowns")
    K = inp.lam * (A.T @ A) + inp.rho * np.eye(n)
    rhs = inp.lam * (A.T @ b) + inp.rho * z.ravel()
    x = scipy.linalg.cho_solve(scipy.linalg.cho_factor(K), rhs)
    return x.reshape(z.shape)


def solve(inp, task):
    """Dispatch to the closed-form solver for ``task.sensing``."""
    s = task.sensing
    if isinstance(s, Identity):
        return solve_identity(inp)
    if isinstance(s, ConvolutionPsf):
        return solve_deconv(inp, s)
    if isinstance(s, BinaryMask):
        return solve_mask(inp, s)
    return solve_dense(inp, s)


def solve_consensus(b, task, lam, targets):
    """Minimize ``lam ||b - A x||^2 + sum_c w_c ||u_c - x||^2`` for ``targets = [(w_c, u_c), ...]``.

    The consensus terms collapse to a single one with weight ``sum w_c`` around
    their weighted mean, so this reuses :func:`solve`.
    """
    if len(targets) == 1:
        rho, z = targets[0]
        return solve(DataProxInputs(b, z, lam, rho), task)
    rho = float(sum(w for w, _ in targets))
    z = sum(w * np.asarray(u, dtype=np.float64) for w, u in targets) / rho
    return solve(DataProxInputs(b, z, lam, rho), task)


def data_prox_backward(inp, dL_dx, task, x=None):
    """Return ``(dL_dz, dL_dlam)`` for the solve ``x = solve(inp, task)``."""
    g = np.asarray(dL_dx, dtype=np.float64)
    b = np.asarray(inp.b, dtype=np.float64)
    if x is None:
        x = solve(inp, task)
    lam, rho = inp.lam, inp.rho
    s = task.sensing
    if isinstance(s, Identity):
        w = g / (lam + rho)
        return rho * w, float(np.sum(w * (b - x)))
    if isinstance(s, BinaryMask):
        a = s.mask
        w = g / (lam * a + rho)
        return rho * w, float(np.sum(w * a * (b - x)))
    if isinstance(s, ConvolutionPsf):
        otf = s.otf(g.shape)
        den = lam * (otf.real ** 2 + otf.imag ** 2) + rho
        w = np.fft.ifft2(np.fft.fft2(g) / den).real
        resid = np.fft.ifft2(np.conj(otf) * (np.fft.fft2(b) - otf * np.fft.fft2(x))).real
        return rho * w, float(np.sum(w * resid))
    if isinstance(s, DenseMatrix):
        A = s.matrix
        n = g.size
        K = lam * (A.T @ A) + rho * np.eye(n)
        w = scipy.linalg.cho_solve(scipy.linalg.cho_factor(K), g.ravel())
        resid = A.T @ (b.ravel() - A @ np.asarray(x).ravel())
        return (rho * w).reshape(g.shape), float(w @ resid)
    raise NotImplementedError(f"no backward pass for {type(s).__name__}")
