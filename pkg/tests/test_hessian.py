"""Adjoint gradient and Hessian checks on both models.

The toy model has closed-form gradient and Hessian, so agreement
there is exact; the elliptic model is checked by finite differences
and by the symmetry of the Hessian pairing.
"""

import numpy as np
import pytest

from uqctrl import fem, hessian
from uqctrl.models import EllipticControlModel, QuadraticToyModel
from uqctrl.prior import build_prior


def make_toy(seed=0, dim=8, rank=3):
    rng = np.random.default_rng(seed)
    factor, _ = np.linalg.qr(rng.normal(size=(dim, rank)))
    return QuadraticToyModel(
        dim,
        q0=0.3,
        g=rng.normal(size=dim),
        h_factor=factor,
        h_values=rng.uniform(0.5, 2.0, rank),
        u_ref=rng.normal(size=dim),
        control_map=rng.normal(size=(dim, 4)),
    )


def make_elliptic(nx=8, ny=4, seed=1):
    rng = np.random.default_rng(seed)
    model = EllipticControlModel(fem.build_mesh(nx, ny))
    m = 2.8 + 0.3 * rng.normal(size=model.dim_m)
    z = rng.uniform(4.0, 28.0, model.n_controls)
    return model, m, z


class TestToyExactness:
    def test_gradient_is_closed_form(self):
        """For u = m + E z the chain rule gives gbar = dQ/du exactly."""
        toy = make_toy()
        rng = np.random.default_rng(1)
        m = rng.normal(size=toy.dim)
        z = rng.normal(size=toy.n_controls)
        lp = hessian.linearize(toy, m, z)
        u = m + toy.control_map @ z
        np.testing.assert_allclose(lp.gbar, toy.dq_du(u), rtol=1e-12)
        assert toy.ledger.snapshot() == (1, 1)

    def test_hessian_action_is_h(self):
        toy = make_toy()
        rng = np.random.default_rng(2)
        lp = hessian.linearize(toy, rng.normal(size=toy.dim), rng.normal(size=toy.n_controls))
        mhat = rng.normal(size=toy.dim)
        np.testing.assert_allclose(lp.hess_apply(mhat), toy.apply_h(mhat), rtol=1e-12, atol=1e-14)

    def test_dense_hessian_matches_factors(self):
        toy = make_toy()
        lp = hessian.linearize(toy, np.zeros(toy.dim), np.zeros(toy.n_controls))
        np.testing.assert_allclose(hessian.dense_hessian(lp), toy.h_dense(), rtol=1e-12, atol=1e-14)


class TestEllipticDerivatives:
    def test_gradient_fd_sweep(self):
        """Best relative error over the step sweep reaches 1e-6."""
        model, m, z = make_elliptic()
        rng = np.random.default_rng(3)
        d = rng.normal(size=model.dim_m)
        rows = hessian.gradient_fd_table(model, m, z, d)
        best = min(err for _, err in rows)
        assert best <= 1e-6, rows

    def test_hessian_fd_sweep(self):
        model, m, z = make_elliptic()
        rng = np.random.default_rng(4)
        d = rng.normal(size=model.dim_m)
        rows = hessian.hessian_fd_table(model, m, z, d)
        best = min(err for _, err in rows)
        assert best <= 1e-5, rows

    def test_pairing_symmetry(self):
        model, m, z = make_elliptic()
        rng = np.random.default_rng(5)
        lp = hessian.linearize(model, m, z)
        err = hessian.pairing_symmetry_error(
            lp, rng.normal(size=model.dim_m), rng.normal(size=model.dim_m)
        )
        assert err <= 1e-10

    def test_hess_apply_is_linear(self):
        model, m, z = make_elliptic(6, 3)
        rng = np.random.default_rng(6)
        lp = hessian.linearize(model, m, z)
        d1 = rng.normal(size=model.dim_m)
        d2 = rng.normal(size=model.dim_m)
        lhs = lp.hess_apply(2.0 * d1 - 0.5 * d2)
        rhs = 2.0 * lp.hess_apply(d1) - 0.5 * lp.hess_apply(d2)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-12)

    def test_solve_budget(self):
        """Linearize = 1 state + 1 linear; each action = 2 linear."""
        model, m, z = make_elliptic(5, 3)
        lp = hessian.linearize(model, m, z)
        assert model.ledger.snapshot() == (1, 1)
        lp.hess_apply(np.ones(model.dim_m))
        assert model.ledger.snapshot() == (1, 3)
        lp.hess_quadratic(np.ones(model.dim_m))
        assert model.ledger.snapshot() == (1, 5)

    def test_dense_hessian_symmetric(self):
        model, m, z = make_elliptic(4, 2)
        lp = hessian.linearize(model, m, z)
        h = hessian.dense_hessian(lp)
        np.testing.assert_allclose(h, h.T, rtol=1e-9, atol=1e-12)


class TestPreconditionedHessian:
    def test_dense_product_matches_operator_composition(self):
        model, m, z = make_elliptic(5, 3)
        prior = build_prior(model.mesh, 0.3, 6.0)
        lp = hessian.linearize(model, m, z)
        ch = hessian.dense_precond_hessian(lp, prior)
        rng = np.random.default_rng(7)
        x = rng.normal(size=model.dim_m)
        np.testing.assert_allclose(ch @ x, prior.apply_c(lp.hess_apply(x)), rtol=1e-9, atol=1e-12)
