# coding: utf-8

# # Operators and closed-form data steps
#
# Everything in the restoration loop is built from a few linear pieces:
# circular convolution, its adjoint, and the quadratic data step that
# balances the observation against a current estimate.

import numpy as np

from hqsrestore import DataProxInputs, TaskSpec, convolve, convolve_transpose, solve, solve_dense
from hqsrestore.synthesis import random_mask, random_psf

rng = np.random.default_rng(0)

# ## Convolution and its adjoint
#
# The adjoint is what gradients flow through, so we check <Ka, b> = <a, K^T b>.

a, b = rng.normal(size=(32, 40)), rng.normal(size=(32, 40))
k = rng.normal(size=(5, 5))
lhs = np.sum(convolve(a, k) * b)
rhs = np.sum(a * convolve_transpose(b, k))
print(f"<Ka,b> = {lhs:.12f}   <a,K^T b> = {rhs:.12f}")

# ## The data step for three sensing operators
#
# x = argmin lam/2 ||Ax - b||^2 + rho/2 ||x - z||^2 has a closed form
# for identity, mask and blur. Each is compared to a dense solve.

shape = (12, 14)
clean = rng.uniform(0, 255, shape)
z = clean + rng.normal(0, 5, shape)
psf = random_psf(5, rng)
tasks = {
    "denoise": TaskSpec.denoise(15),
    "inpaint": TaskSpec.inpaint(random_mask(shape, 0.5, rng), 15),
    "deconv": TaskSpec.deconv(psf, 5),
}
n = clean.size
for name, task in tasks.items():
    obs = task.forward(clean) + rng.normal(0, task.noise_sigma, shape)
    inp = DataProxInputs(obs, z, lam=0.4, rho=2.0)
    fast = solve(inp, task)
    A = np.stack([task.forward(np.eye(n)[j].reshape(shape)).ravel() for j in range(n)], axis=1)
    dense = solve_dense(inp, A)
    print(f"{name:8s} max |fast - dense| = {np.max(np.abs(fast - dense)):.2e}")
