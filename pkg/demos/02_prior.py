# coding: utf-8

# # The learned prior step
#
# One prior step runs a few diffusion stages: filter the image, pass each
# response through a scalar influence function, filter back and subtract.
# The influence functions are sums of Gaussian bumps on a fixed grid.

import numpy as np

from hqsrestore import RbfFunction, RbfGrid, initial_prior, prior_prox_forward, psnr, rbf_eval
from hqsrestore.prior import dct_basis, shrinkage_profile
from hqsrestore.rbf import fit_weights

# ## Influence functions from Gaussian bumps
#
# 63 centers on [-310, 310]; the width equals the center spacing.
# Fitting the weights to a clipped line gives a soft-threshold shape.

grid = RbfGrid()
w = fit_weights(grid, shrinkage_profile(1.0, 20.0))
psi = RbfFunction.on_grid(grid, w)
v = np.array([-100.0, -20.0, -5.0, 0.0, 5.0, 20.0, 100.0])
for vi, yi in zip(v, rbf_eval(psi, v)):
    print(f"psi({vi:7.1f}) = {yi:8.3f}")

# ## Filters live in a zero-mean DCT basis
#
# A 5x5 filter has 24 basis atoms; the constant atom is left out so
# flat regions pass through unchanged.

basis = dct_basis(5)
print("basis", basis.shape, "max |atom sum|", np.abs(basis.sum(axis=(1, 2))).max())

# ## Untrained prior step on a noisy ramp
#
# Even the initial stages (smooth profile, lowest-frequency atoms) remove
# some noise; training is what turns this into a good denoiser.

rng = np.random.default_rng(1)
yy, xx = np.mgrid[0:64, 0:64]
clean = 80 + xx + 0.5 * yy
noisy = clean + rng.normal(0, 15, clean.shape)
prior = initial_prior(n_stages=3, n_filters=8, size=3)
z, _ = prior_prox_forward(noisy, prior)
print(f"noisy {psnr(noisy, clean):.2f} dB -> one prior step {psnr(z, clean):.2f} dB")
