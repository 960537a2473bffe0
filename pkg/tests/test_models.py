"""Elliptic model and toy model checks.

Derivative forms are validated against finite differences of the
assembled operator in the coefficient direction; those must agree to
near round-off because the forms differentiate the same quadrature
rule the assembly uses. The state solve is checked against a dense
row-replacement treatment of the Dirichlet boundary, an independent
route to the same solution.
"""

import numpy as np
import pytest

from uqctrl import fem
from uqctrl.models import (
    EllipticControlModel,
    QuadraticToyModel,
    WellConfig,
    interpolation_matrix,
    well_grid,
)


def make_model(nx=8, ny=4):
    return EllipticControlModel(fem.build_mesh(nx, ny))


def dense_state_oracle(model, m, z):
    """Dirichlet handling by row replacement instead of elimination."""
    mesh = model.mesh
    a = fem.assemble_stiffness(mesh, model.geom, m).toarray()
    rhs = model.f_matrix @ z
    for d in mesh.dirichlet:
        a[d, :] = 0.0
        a[d, d] = 1.0
        rhs[d] = model.lift[d]
    return np.linalg.solve(a, rhs)


class TestWells:
    def test_default_layout(self):
        wells = WellConfig.default()
        assert wells.injection.shape == (20, 2)
        assert wells.production.shape == (12, 2)
        np.testing.assert_allclose(sorted(set(wells.injection[:, 0])), [1 / 3, 2 / 3, 1.0, 4 / 3, 5 / 3])
        np.testing.assert_allclose(sorted(set(wells.production[:, 0])), [0.7, 0.9, 1.1, 1.3])
        np.testing.assert_allclose(sorted(set(wells.production[:, 1])), [0.3, 0.5, 0.7])

    def test_targets_profile(self):
        wells = WellConfig.default()
        t = wells.targets()
        # symmetric in x about 1, peaked at the domain center, positive
        # at every observation point
        np.testing.assert_allclose(t.max(), 3.0 - 8 * 0.1**2, atol=1e-12)
        np.testing.assert_allclose(t @ t, 75.8976, atol=1e-4)
        assert t.min() > 2.0

    def test_grid_order_x_fastest(self):
        g = well_grid(2, 2, 2.0, 1.0)
        np.testing.assert_allclose(g[0], [2 / 3, 1 / 3])
        np.testing.assert_allclose(g[1], [4 / 3, 1 / 3])

    def test_mollifier_integrals_near_one(self):
        """Each source column integrates to 1 within 1e-3 on 64x32."""
        model = EllipticControlModel(fem.build_mesh(64, 32))
        np.testing.assert_allclose(model.source_integrals(), 1.0, atol=1e-3)


class TestInterpolation:
    def test_partition_of_unity_and_linears(self):
        mesh = fem.build_mesh(7, 5)
        rng = np.random.default_rng(3)
        pts = np.column_stack([rng.uniform(0, 2, 40), rng.uniform(0, 1, 40)])
        b = interpolation_matrix(mesh, pts)
        np.testing.assert_allclose(np.asarray(b.sum(axis=1)).ravel(), 1.0, rtol=1e-13)
        u = 0.5 + 1.5 * mesh.coords[:, 0] - 2.0 * mesh.coords[:, 1]
        np.testing.assert_allclose(b @ u, 0.5 + 1.5 * pts[:, 0] - 2.0 * pts[:, 1], rtol=1e-12)

    def test_nodes_interpolate_exactly(self):
        mesh = fem.build_mesh(4, 4)
        b = interpolation_matrix(mesh, mesh.coords[7])
        e = np.zeros(mesh.n_nodes)
        e[7] = 1.0
        np.testing.assert_allclose((b @ e)[0], 1.0, rtol=1e-14)

    def test_rejects_outside_points(self):
        mesh = fem.build_mesh(4, 4)
        with pytest.raises(ValueError):
            interpolation_matrix(mesh, np.array([[2.5, 0.5]]))


class TestStateSolve:
    def test_matches_dense_row_replacement(self):
        rng = np.random.default_rng(11)
        model = make_model(8, 5)
        m = 0.3 * rng.normal(size=model.dim_m)
        z = rng.uniform(0, 32, model.n_controls)
        u = model.state_operator(m).solve_state(z)
        np.testing.assert_allclose(u, dense_state_oracle(model, m, z), rtol=1e-9, atol=1e-12)

    def test_zero_source_gives_lift_exactly(self):
        """The lift 2 - x is discrete-harmonic for constant coefficients."""
        model = make_model(9, 4)
        u = model.state_operator(np.zeros(model.dim_m)).solve_state(np.zeros(model.n_controls))
        np.testing.assert_allclose(u, model.lift, atol=1e-12)

    def test_constant_shift_rescales_homogenized_state(self):
        """u(c) - lift = exp(-c) (u(0) - lift) for constant fields c."""
        model = make_model(10, 6)
        z = np.full(model.n_controls, 16.0)
        u0 = model.state_operator(np.zeros(model.dim_m)).solve_state(z)
        c = 1.7
        uc = model.state_operator(np.full(model.dim_m, c)).solve_state(z)
        np.testing.assert_allclose(
            uc - model.lift, np.exp(-c) * (u0 - model.lift), rtol=1e-10, atol=1e-12
        )

    def test_ledger_counts(self):
        model = make_model(4, 3)
        op = model.state_operator(np.zeros(model.dim_m))
        assert model.ledger.snapshot() == (0, 0)
        op.solve_state(np.ones(model.n_controls))
        op.solve_linear(np.ones(model.dim_m))
        op.solve_linear(np.ones(model.dim_m))
        assert model.ledger.snapshot() == (1, 2)
        model.ledger.reset()
        assert model.ledger.snapshot() == (0, 0)

    def test_linear_solve_vanishes_on_dirichlet(self):
        rng = np.random.default_rng(2)
        model = make_model(5, 4)
        op = model.state_operator(rng.normal(size=model.dim_m) * 0.2)
        w = op.solve_linear(rng.normal(size=model.dim_m))
        np.testing.assert_allclose(w[model.mesh.dirichlet], 0.0, atol=1e-15)


class TestQuantityOfInterest:
    def test_eval_against_direct(self):
        rng = np.random.default_rng(5)
        model = make_model(6, 4)
        u = rng.normal(size=model.dim_m)
        h = u - model.lift
        r = model.b_matrix @ h - model.targets
        np.testing.assert_allclose(model.eval_q(u), r @ r, rtol=1e-13)

    def test_dq_du_finite_difference(self):
        rng = np.random.default_rng(6)
        model = make_model(6, 4)
        u = rng.normal(size=model.dim_m)
        du = rng.normal(size=model.dim_m)
        eps = 1e-6
        fd = (model.eval_q(u + eps * du) - model.eval_q(u - eps * du)) / (2 * eps)
        np.testing.assert_allclose(model.dq_du(u) @ du, fd, rtol=1e-8)

    def test_d2q_exact_for_quadratic(self):
        rng = np.random.default_rng(7)
        model = make_model(6, 4)
        u = rng.normal(size=model.dim_m)
        du = rng.normal(size=model.dim_m)
        lhs = model.dq_du(u + du) - model.dq_du(u)
        np.testing.assert_allclose(lhs, model.d2q_du(du), rtol=1e-12, atol=1e-14)


class TestFormsExactDerivatives:
    """Forms differentiate the assembled operator exactly."""

    def setup_method(self):
        rng = np.random.default_rng(8)
        self.model = make_model(6, 3)
        n = self.model.dim_m
        self.m = 0.4 * rng.normal(size=n)
        self.u = rng.normal(size=n)
        self.v = rng.normal(size=n)
        self.w = rng.normal(size=n)
        self.w2 = rng.normal(size=n)
        self.du = rng.normal(size=n)
        self.dv = rng.normal(size=n)
        self.forms = self.model.forms(self.m, self.u, self.v)

    def _a(self, m):
        return fem.assemble_stiffness(self.model.mesh, self.model.geom, m)

    def test_vm_is_coefficient_derivative(self):
        eps = 1e-5
        fd = (
            self.dv @ (self._a(self.m + eps * self.w) @ self.u)
            - self.dv @ (self._a(self.m - eps * self.w) @ self.u)
        ) / (2 * eps)
        np.testing.assert_allclose(self.forms.vm(self.w) @ self.dv, fd, rtol=1e-8)

    def test_grad_m_pairs_with_any_direction(self):
        eps = 1e-5
        fd = (
            self.v @ (self._a(self.m + eps * self.w) @ self.u)
            - self.v @ (self._a(self.m - eps * self.w) @ self.u)
        ) / (2 * eps)
        np.testing.assert_allclose(self.forms.grad_m() @ self.w, fd, rtol=1e-8)

    def test_vmm_is_second_coefficient_derivative(self):
        eps = 1e-3
        f = lambda t: self.dv @ (self._a(self.m + t * self.w) @ self.u)
        fd2 = (f(eps) - 2 * f(0.0) + f(-eps)) / eps**2
        np.testing.assert_allclose(
            self.forms.vmm(self.w, self.w) @ self.dv, fd2, rtol=1e-6
        )

    def test_pairing_symmetry(self):
        """<mv(dv), w> = <vm(w), dv> and <mu(du), w> = <um(w), du>."""
        a = self.forms.mv(self.dv) @ self.w
        b = self.forms.vm(self.w) @ self.dv
        assert abs(a - b) <= 1e-12 * max(abs(a), abs(b))
        c = self.forms.mu(self.du) @ self.w
        d = self.forms.um(self.w) @ self.du
        assert abs(c - d) <= 1e-12 * max(abs(c), abs(d))

    def test_mm_symmetric_in_probe_and_direction(self):
        a = self.forms.mm(self.w) @ self.w2
        b = self.forms.mm(self.w2) @ self.w
        assert abs(a - b) <= 1e-12 * max(abs(a), abs(b))

    def test_um_transposes_vm_through_operator_symmetry(self):
        """um(w) against du equals d/dm[du^T A v] since A is symmetric."""
        eps = 1e-5
        fd = (
            self.du @ (self._a(self.m + eps * self.w) @ self.v)
            - self.du @ (self._a(self.m - eps * self.w) @ self.v)
        ) / (2 * eps)
        np.testing.assert_allclose(self.forms.um(self.w) @ self.du, fd, rtol=1e-8)

    def test_third_order_aliases_match(self):
        np.testing.assert_array_equal(
            self.forms.vum(self.w, self.du), self.forms.umu(self.w, self.du)
        )
        np.testing.assert_array_equal(
            self.forms.umv(self.w, self.dv), self.forms.vum(self.w, self.dv)
        )

    def test_uum_differentiates_um_in_m(self):
        eps = 1e-4
        um_plus = self.model.forms(self.m + eps * self.w2, self.u, self.v).um(self.w)
        um_minus = self.model.forms(self.m - eps * self.w2, self.u, self.v).um(self.w)
        fd = (um_plus - um_minus) / (2 * eps)
        np.testing.assert_allclose(self.forms.uum(self.w, self.w2), fd, rtol=1e-6, atol=1e-10)

    def test_zv_is_negative_source_transpose(self):
        np.testing.assert_allclose(
            self.forms.zv(self.dv), -(self.model.f_matrix.T @ self.dv), rtol=1e-14
        )


class TestToyModel:
    def make_toy(self, seed=0, dim=9, rank=3, n_controls=4):
        rng = np.random.default_rng(seed)
        factor, _ = np.linalg.qr(rng.normal(size=(dim, rank)))
        vals = rng.uniform(0.5, 2.0, rank)
        return QuadraticToyModel(
            dim,
            q0=1.5,
            g=rng.normal(size=dim),
            h_factor=factor,
            h_values=vals,
            u_ref=rng.normal(size=dim),
            control_map=rng.normal(size=(dim, n_controls)),
        )

    def test_q_is_exactly_quadratic(self):
        toy = self.make_toy()
        rng = np.random.default_rng(1)
        u = rng.normal(size=toy.dim)
        w = u - toy.u_ref
        h = toy.h_dense()
        np.testing.assert_allclose(
            toy.eval_q(u), toy.q0 + toy.g @ w + 0.5 * w @ h @ w, rtol=1e-13
        )
        np.testing.assert_allclose(toy.dq_du(u), toy.g + h @ w, rtol=1e-12)

    def test_state_map_is_affine(self):
        toy = self.make_toy()
        rng = np.random.default_rng(2)
        m = rng.normal(size=toy.dim)
        z = rng.normal(size=toy.n_controls)
        u = toy.state_operator(m).solve_state(z)
        np.testing.assert_allclose(u, m + toy.control_map @ z, rtol=1e-14)
        assert toy.ledger.snapshot() == (1, 0)

    def test_identity_state_map_without_control(self):
        rng = np.random.default_rng(3)
        toy = QuadraticToyModel(
            5, 0.0, rng.normal(size=5), np.eye(5)[:, :2], np.ones(2), n_controls=3
        )
        m = rng.normal(size=5)
        u = toy.state_operator(m).solve_state(np.ones(3))
        np.testing.assert_array_equal(u, m)
        f = toy.forms(m, u, u)
        np.testing.assert_array_equal(f.zv(np.ones(5)), np.zeros(3))

    def test_forms_signs(self):
        toy = self.make_toy()
        rng = np.random.default_rng(4)
        w = rng.normal(size=toy.dim)
        v = rng.normal(size=toy.dim)
        f = toy.forms(np.zeros(toy.dim), np.zeros(toy.dim), v)
        np.testing.assert_array_equal(f.vm(w), -w)
        np.testing.assert_array_equal(f.mv(w), -w)
        np.testing.assert_array_equal(f.grad_m(), -v)
        np.testing.assert_array_equal(f.um(w), np.zeros(toy.dim))
        np.testing.assert_allclose(f.zv(v), -(toy.control_map.T @ v), rtol=1e-14)
