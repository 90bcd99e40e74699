"""Synthetic degradations and training-set construction.

Every generator takes an explicit ``numpy.random.Generator`` so runs are
reproducible from a recorded seed.  Degraded observations are quantized to
8 bits.
"""

from dataclasses import dataclass

import numpy as np
import scipy.ndimage

from .data_prox import TaskSpec
from .errors import InputError
from .image_io import dequantize, quantize
from .imaging import DEFAULT_PEAK


@dataclass(frozen=True)
class TrainingSample:
    b: np.ndarray
    ground_truth: np.ndarray
    task: TaskSpec
    seed: int = 0

    def __post_init__(self):
        gt = np.asarray(self.ground_truth, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if b.shape != gt.shape:
            raise InputError(f"observation {b.shape} and ground truth {gt.shape} differ in shape")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "ground_truth", gt)


def to_8bit(img, peak=DEFAULT_PEAK):
    return dequantize(quantize(img, peak, 8), 255, peak)


def random_psf(size, rng, length=None):
    """A normalized motion-blur kernel: a smoothed random walk inside ``size x size``."""
    if size % 2 != 1 or size < 1:
        raise InputError("psf size must be odd")
    if size == 1:
        return np.ones((1, 1))
    length = length or 4 * size
    c = size // 2
    pos = np.zeros(2)
    vel = rng.normal(size=2)
    vel /= np.linalg.norm(vel)
    pts = []
    for _ in range(length):
        vel += 0.7 * rng.normal(size=2)
        vel /= np.linalg.norm(vel)
        pos = np.clip(pos + 0.5 * vel, -c + 1, c - 1)
        pts.append(pos.copy())
    pts = np.array(pts)
    pts -= np.round(pts.mean(axis=0))
    pts = np.clip(pts, -c + 1, c - 1)
    kernel = np.zeros((size, size))
    for y, x in pts + c:
        y0, x0 = int(np.floor(y)), int(np.floor(x))
        fy, fx = y - y0, x - x0
        kernel[y0, x0] += (1 - fy) * (1 - fx)
        kernel[y0 + 1, x0] += fy * (1 - fx)
        kernel[y0, x0 + 1] += (1 - fy) * fx
        kernel[y0 + 1, x0 + 1] += fy * fx
    kernel = scipy.ndimage.gaussian_filter(kernel, 0.5, mode="constant")
    return kernel / kernel.sum()


def random_mask(shape, fraction_missing, rng):
    """Binary mask (1 = observed) with exactly ``round(fraction * n)`` missing pixels."""
    if not 0 <= fraction_missing <= 1:
        raise InputError("fraction_missing must be in [0, 1]")
    n = int(np.prod(shape))
    missing = int(round(fraction_missing * n))
    mask = np.ones(n)
    mask[rng.permutation(n)[:missing]] = 0.0
    return mask.reshape(shape)


def degrade(clean, task, rng, peak=DEFAULT_PEAK, quantize_8bit=True):
    """Apply ``task``'s sensing operator, add Gaussian noise of ``task.noise_sigma`` and quantize."""
    clean = np.asarray(clean, dtype=np.float64)
    y = task.forward(clean)
    y = y + task.noise_sigma * rng.normal(size=y.shape)
    if quantize_8bit and task.kind != "dense":
        y = to_8bit(y, peak)
    if task.kind == "mask":
        y = y * task.sensing.mask
    return y


def extract_patches(images, size, count, rng):
    """``count`` random ``size x size`` crops, images chosen round-robin."""
    patches = []
    for i in range(count):
        img = images[i % len(images)]
        h, w = img.shape
        if h < size or w < size:
            raise InputError(f"image {h}x{w} is smaller than patch size {size}")
        y = int(rng.integers(0, h - size + 1))
        x = int(rng.integers(0, w - size + 1))
        patches.append(np.array(img[y:y + size, x:x + size], dtype=np.float64))
    return patches


@dataclass(frozen=True)
class ClassSpec:
    """One problem class of a training set: task type, noise level and how many patches."""

    kind: str
    sigma: float
    count: int
    psf_size: int = 25

    @property
    def class_id(self):
        return f"{self.kind}/{self.sigma:g}"


def make_training_set(clean_images, classes, patch_size, seed, peak=DEFAULT_PEAK):
    """Crop patches and degrade them per class; deconvolution patches get their own random PSF."""
    rng = np.random.default_rng(seed)
    samples = []
    for spec in classes:
        patches = extract_patches(clean_images, patch_size, spec.count, rng)
        for patch in patches:
            sample_seed = int(rng.integers(0, 2 ** 31 - 1))
            srng = np.random.default_rng(sample_seed)
            if spec.kind == "denoise":
                task = TaskSpec.denoise(spec.sigma, spec.class_id)
            elif spec.kind == "deconv":
                task = TaskSpec.deconv(random_psf(spec.psf_size, srng), spec.sigma, spec.class_id)
            else:
                raise InputError(f"unsupported training task {spec.kind!r}")
            samples.append(TrainingSample(degrade(patch, task, srng, peak), patch, task, sample_seed))
    return samples

