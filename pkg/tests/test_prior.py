import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hqsrestore.errors import InputError, InvariantError
from hqsrestore.imaging import circulant_matrix, convolve, convolve_transpose
from hqsrestore.prior import (
    DiffusionStage, PriorProx, dct_basis, diffusion_step, initial_prior, initial_stage,
    prior_prox_backward, prior_prox_forward, random_prior, zero_prior,
)
from hqsrestore.rbf import RbfFunction, RbfGrid, fit_weights, rbf_eval

SMALL = RbfGrid(5, 310.0)


def literal_step(z, stage):
    """The diffusion formula written out with the public primitives only."""
    acc = np.zeros_like(z)
    for filt, fn in zip(stage.filters, stage.influences):
        acc += convolve_transpose(rbf_eval(fn, convolve(z, filt)), filt)
    return z - acc


@pytest.mark.parametrize("size", [3, 5, 7])
def test_dct_basis_is_orthonormal_and_zero_mean(size):
    basis = dct_basis(size).reshape(size * size - 1, -1)
    np.testing.assert_allclose(basis @ basis.T, np.eye(size * size - 1), atol=1e-13)
    np.testing.assert_allclose(basis.sum(axis=1), 0.0, atol=1e-13)


def test_dct_basis_lowest_frequencies_first():
    atoms = dct_basis(5)
    # first two atoms are the horizontal and vertical first harmonics
    assert np.allclose(atoms[0], atoms[1].T)
    assert np.allclose(atoms[0].sum(axis=1), 0.0) or np.allclose(atoms[0].sum(axis=0), 0.0)


def test_filters_are_zero_mean_for_any_coefficients():
    prior = random_prior(np.random.default_rng(0), 2, 6, 5, SMALL)
    for s in prior.stages:
        np.testing.assert_allclose(s.filters.sum(axis=(1, 2)), 0.0, atol=1e-13)


def test_zero_weights_make_the_step_an_identity():
    z = np.random.default_rng(1).uniform(0, 255, (9, 9))
    prior = zero_prior(3, 4, 3)
    assert np.array_equal(diffusion_step(z, prior.stages[0]), z)
    out, _ = prior_prox_forward(z, prior)
    assert np.array_equal(out, z)


def test_ramp_influence_approximates_linear_diffusion():
    grid = RbfGrid()
    w = fit_weights(grid, lambda v: v)
    coeffs = np.zeros((1, 8))
    coeffs[0, 2] = 0.5
    stage = DiffusionStage(coeffs, w[None, :], 3, grid)
    z = np.random.default_rng(2).uniform(0, 255, (8, 8))
    filt = stage.filters[0]
    F = circulant_matrix(filt, (8, 8))
    expected = z.ravel() - F.T @ (F @ z.ravel())
    resp = convolve(z, filt)
    ramp_err = np.max(np.abs(rbf_eval(stage.influences[0], resp) - resp))
    bound = np.abs(filt).sum() * ramp_err + 1e-9
    assert np.max(np.abs(diffusion_step(z, stage).ravel() - expected)) <= bound
    assert ramp_err < 1.0


def test_step_matches_literal_formula_bit_exact():
    rng = np.random.default_rng(3)
    prior = random_prior(rng, 1, 4, 5, RbfGrid(), weight_scale=10.0)
    z = rng.uniform(0, 255, (16, 16))
    assert np.array_equal(diffusion_step(z, prior.stages[0]), literal_step(z, prior.stages[0]))


def test_forward_chains_stages():
    rng = np.random.default_rng(4)
    prior = random_prior(rng, 3, 3, 3, RbfGrid(), weight_scale=10.0)
    x = rng.uniform(0, 255, (12, 12))
    z = x
    for s in prior.stages:
        z = diffusion_step(z, s)
    out, tape = prior_prox_forward(x, prior)
    assert np.array_equal(out, z)
    assert len(tape.records) == 3
    one = PriorProx(prior.stages[:1])
    assert np.array_equal(prior_prox_forward(x, one)[0], diffusion_step(x, prior.stages[0]))


def test_forward_is_deterministic():
    rng = np.random.default_rng(5)
    prior = initial_prior(2, 8, 3)
    x = rng.uniform(0, 255, (20, 20))
    assert np.array_equal(prior_prox_forward(x, prior)[0], prior_prox_forward(x.copy(), prior)[0])


@settings(max_examples=25, deadline=None)
@given(st.floats(-500, 500), st.integers(0, 2**16))
def test_constant_images_are_fixed_points(c, seed):
    prior = random_prior(np.random.default_rng(seed), 2, 3, 3, SMALL, weight_scale=50.0)
    z = np.full((7, 7), c)
    out, _ = prior_prox_forward(z, prior)
    # responses are exactly zero up to roundoff, so the step collapses to psi(0) * sum(F) ~ 0
    np.testing.assert_allclose(out, c, atol=1e-9 * (1 + abs(c)) * 50)


def test_backward_zero_upstream_gives_zero():
    rng = np.random.default_rng(6)
    prior = random_prior(rng, 2, 2, 3, SMALL)
    _, tape = prior_prox_forward(rng.uniform(0, 255, (8, 8)), prior)
    dx, grad = prior_prox_backward(tape, np.zeros((8, 8)))
    assert not dx.any() and not grad.to_vector().any()


def test_backward_through_identity_model():
    prior = zero_prior(2, 3, 3)
    rng = np.random.default_rng(7)
    _, tape = prior_prox_forward(rng.uniform(0, 255, (8, 8)), prior)
    g = rng.normal(size=(8, 8))
    dx, _ = prior_prox_backward(tape, g)
    assert np.array_equal(dx, g)


def test_backward_full_parameter_sweep():
    rng = np.random.default_rng(8)
    prior = random_prior(rng, 2, 2, 3, SMALL, weight_scale=20.0)
    x = rng.uniform(0, 255, (10, 10))
    G = rng.normal(size=(10, 10))
    _, tape = prior_prox_forward(x, prior)
    _, grad = prior_prox_backward(tape, G)
    vec = prior.to_vector()
    ana = grad.to_vector()
    h = 1e-4
    for i in range(vec.size):
        e = np.zeros_like(vec)
        e[i] = h
        num = (np.sum(G * prior_prox_forward(x, prior.with_vector(vec + e))[0])
               - np.sum(G * prior_prox_forward(x, prior.with_vector(vec - e))[0])) / (2 * h)
        scale = max(abs(ana[i]), abs(num), 1e-6 * np.abs(ana).max())
        assert abs(ana[i] - num) / scale < 1e-5, i


@pytest.mark.parametrize("seed", range(3))
def test_backward_input_adjoint_consistency(seed):
    rng = np.random.default_rng(seed)
    prior = random_prior(rng, 2, 3, 3, SMALL, weight_scale=20.0)
    x = rng.uniform(0, 255, (10, 10))
    G, dx = rng.normal(size=(10, 10)), rng.normal(size=(10, 10))
    _, tape = prior_prox_forward(x, prior)
    gx, _ = prior_prox_backward(tape, G)
    h = 1e-4
    num = (np.sum(G * prior_prox_forward(x + h * dx, prior)[0]) - np.sum(G * prior_prox_forward(x - h * dx, prior)[0])) / (2 * h)
    ana = np.sum(gx * dx)
    assert abs(ana - num) <= 1e-5 * max(abs(ana), abs(num))


def test_backward_rejects_mismatched_tape():
    rng = np.random.default_rng(9)
    prior = random_prior(rng, 2, 2, 3, SMALL)
    _, tape = prior_prox_forward(rng.normal(size=(8, 8)), prior)
    with pytest.raises(InvariantError):
        prior_prox_backward(tape, np.zeros((9, 9)))
    with pytest.raises(InvariantError):
        prior_prox_backward(tape, np.zeros((8, 8)), model=random_prior(rng, 2, 2, 3, SMALL))


def test_frozen_stages_get_zero_gradient():
    rng = np.random.default_rng(10)
    prior = random_prior(rng, 2, 2, 3, SMALL)
    _, tape = prior_prox_forward(rng.uniform(0, 255, (8, 8)), prior)
    g = rng.normal(size=(8, 8))
    dx_all, full = prior_prox_backward(tape, g)
    dx_part, part = prior_prox_backward(tape, g, trainable={1})
    assert np.array_equal(dx_all, dx_part)
    assert not part.coeffs[0].any() and not part.weights[0].any()
    assert np.array_equal(part.coeffs[1], full.coeffs[1])


def test_vector_roundtrip_and_immutability():
    prior = random_prior(np.random.default_rng(11), 3, 2, 3, SMALL)
    assert prior.with_vector(prior.to_vector()).equals(prior)
    with pytest.raises(ValueError):
        prior.stages[0].weights[0, 0] = 1.0


def test_initial_stage_uses_lowest_atoms():
    stage = initial_stage(4, 3, SMALL)
    np.testing.assert_allclose(stage.filters, dct_basis(3)[:4])
    np.testing.assert_allclose(np.linalg.norm(stage.filters.reshape(4, -1), axis=1), 1.0)


def test_construction_errors():
    with pytest.raises(InputError):
        PriorProx(())
    with pytest.raises(InputError):
        dct_basis(1)
    with pytest.raises(InputError):
        initial_stage(9, 3)
    with pytest.raises(InputError):
        DiffusionStage(np.zeros((2, 8)), np.zeros((3, 5)), 3, SMALL)
