"""Mesh, assembly, factorization and random-stream checks.

The stiffness oracle below rebuilds element matrices through basis
coefficients obtained from a Vandermonde solve, a different route than
the rotated-edge formula used by the package, so agreement is a real
cross-check and the expected values are frozen by the oracle.
"""

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from uqctrl import fem


def dense_stiffness_oracle(mesh, theta, m):
    """Independent assembly: basis gradients via Vandermonde inverse."""
    n = mesh.n_nodes
    k = np.zeros((n, n))
    for t in range(mesh.n_tris):
        vid = mesh.tris[t]
        pts = mesh.coords[vid]
        vander = np.column_stack([np.ones(3), pts])
        coeff = np.linalg.inv(vander)
        grads = coeff[1:, :].T
        d1 = pts[1] - pts[0]
        d2 = pts[2] - pts[0]
        area = 0.5 * abs(d1[0] * d2[1] - d1[1] * d2[0])
        scale = np.exp(m[vid].mean())
        for i in range(3):
            for j in range(3):
                k[vid[i], vid[j]] += scale * area * grads[i] @ theta @ grads[j]
    return k


class TestMesh:
    def test_counts_and_coordinates(self):
        """Node j*(nx+1)+i sits at (i*hx, j*hy); triangle count is 2*nx*ny."""
        mesh = fem.build_mesh(4, 3, 2.0, 1.0)
        assert mesh.n_nodes == 5 * 4
        assert mesh.n_tris == 24
        for j in range(4):
            for i in range(5):
                nid = j * 5 + i
                np.testing.assert_allclose(
                    mesh.coords[nid], [i * mesh.hx, j * mesh.hy]
                )

    def test_boundary_tags_partition(self):
        """Every boundary node has exactly one tag and corners are Dirichlet."""
        mesh = fem.build_mesh(6, 4)
        d = set(mesh.dirichlet.tolist())
        n = set(mesh.neumann.tolist())
        assert d.isdisjoint(n)
        # corners: (0,0), (nx,0), (0,ny), (nx,ny)
        corners = {0, 6, 4 * 7, 4 * 7 + 6}
        assert corners <= d
        x = mesh.coords[:, 0]
        y = mesh.coords[:, 1]
        on_boundary = (
            (x == 0) | (x == mesh.lx) | (y == 0) | (y == mesh.ly)
        )
        assert d | n == set(np.flatnonzero(on_boundary).tolist())
        assert set(mesh.free.tolist()) == set(range(mesh.n_nodes)) - d

    def test_first_cell_triangles(self):
        """Cell (0,0) splits along the a-c diagonal into (a,b,c), (a,c,d)."""
        mesh = fem.build_mesh(3, 2)
        np.testing.assert_array_equal(mesh.tris[0], [0, 1, 5])
        np.testing.assert_array_equal(mesh.tris[1], [0, 5, 4])

    @given(nx=st.integers(1, 7), ny=st.integers(1, 7))
    @settings(max_examples=25, deadline=None)
    def test_orientation_and_area(self, nx, ny):
        """All triangles counter-clockwise; areas add up to the rectangle."""
        mesh = fem.build_mesh(nx, ny, 2.0, 1.0)
        geom = fem.triangle_geometry(mesh)
        assert np.all(geom.areas > 0)
        np.testing.assert_allclose(geom.areas.sum(), 2.0, rtol=1e-13)


class TestAssembly:
    def test_stiffness_matches_oracle(self):
        """Vectorized assembly equals the Vandermonde-based oracle."""
        rng = np.random.default_rng(42)
        mesh = fem.build_mesh(4, 3)
        theta = np.array([[1.3, 0.2], [0.2, 0.9]])
        m = rng.normal(size=mesh.n_nodes)
        geom = fem.triangle_geometry(mesh, theta)
        a = fem.assemble_stiffness(mesh, geom, m).toarray()
        expected = dense_stiffness_oracle(mesh, theta, m)
        np.testing.assert_allclose(a, expected, rtol=1e-12, atol=1e-14)

    def test_stiffness_energy_exact_for_linears(self):
        """u^T K u = exp(c) |grad u|^2 |domain| for linear u, constant m."""
        mesh = fem.build_mesh(8, 5, 2.0, 1.0)
        geom = fem.triangle_geometry(mesh)
        c = 0.7
        a = fem.assemble_stiffness(mesh, geom, np.full(mesh.n_nodes, c))
        u = 1.0 + 2.0 * mesh.coords[:, 0] - 3.0 * mesh.coords[:, 1]
        energy = u @ (a @ u)
        np.testing.assert_allclose(
            energy, np.exp(c) * (4.0 + 9.0) * 2.0, rtol=1e-12
        )

    def test_stiffness_annihilates_constants(self):
        mesh = fem.build_mesh(5, 4)
        geom = fem.triangle_geometry(mesh)
        a = fem.assemble_stiffness(mesh, geom)
        np.testing.assert_allclose(np.abs(a @ np.ones(mesh.n_nodes)).max(), 0.0, atol=1e-13)

    def test_mass_exact_for_linears(self):
        """Consistent mass integrates products of linears exactly."""
        mesh = fem.build_mesh(6, 3, 2.0, 1.0)
        m = fem.assemble_mass(mesh)
        x, y = mesh.coords[:, 0], mesh.coords[:, 1]
        u = 1.0 + 0.5 * x
        v = 2.0 - y
        # int (1 + x/2)(2 - y) over [0,2]x[0,1] = int(1+x/2) * int(2-y)
        exact = (2.0 + 1.0) * (2.0 - 0.5)
        np.testing.assert_allclose(u @ (m @ v), exact, rtol=1e-13)

    def test_lumped_mass_is_row_sum(self):
        mesh = fem.build_mesh(5, 5)
        m = fem.assemble_mass(mesh)
        ml = fem.lumped_mass(mesh)
        np.testing.assert_allclose(ml, np.asarray(m.sum(axis=1)).ravel(), rtol=1e-13)
        np.testing.assert_allclose(ml.sum(), mesh.lx * mesh.ly, rtol=1e-13)

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_stiffness_symmetric_positive(self, seed):
        """K(m) stays symmetric and PSD for any nodal log-coefficient."""
        rng = np.random.default_rng(seed)
        mesh = fem.build_mesh(3, 3)
        geom = fem.triangle_geometry(mesh)
        m = rng.normal(scale=2.0, size=mesh.n_nodes)
        a = fem.assemble_stiffness(mesh, geom, m).toarray()
        np.testing.assert_allclose(a, a.T, atol=1e-12)
        w = np.linalg.eigvalsh(a)
        assert w.min() > -1e-10 * max(1.0, w.max())


class TestFactorize:
    def test_solve_matches_dense(self):
        rng = np.random.default_rng(7)
        mesh = fem.build_mesh(5, 4)
        geom = fem.triangle_geometry(mesh)
        a = fem.assemble_stiffness(mesh, geom, rng.normal(size=mesh.n_nodes))
        free = mesh.free
        aff = a[np.ix_(free, free)].tocsc()
        rhs = rng.normal(size=free.size)
        x = fem.factorize(sp.csr_matrix(aff)).solve(rhs)
        np.testing.assert_allclose(x, np.linalg.solve(aff.toarray(), rhs), rtol=1e-10)

    def test_cg_agrees_with_splu(self):
        rng = np.random.default_rng(11)
        mesh = fem.build_mesh(6, 4)
        geom = fem.triangle_geometry(mesh)
        a = fem.assemble_stiffness(mesh, geom, rng.normal(size=mesh.n_nodes))
        m = fem.assemble_mass(mesh)
        k = (a + m).tocsr()
        rhs = rng.normal(size=mesh.n_nodes)
        x_lu = fem.factorize(k, "splu").solve(rhs)
        x_cg = fem.factorize(k, "cg").solve(rhs)
        np.testing.assert_allclose(x_cg, x_lu, rtol=1e-8, atol=1e-12)

    def test_singular_raises(self):
        a = sp.csr_matrix(np.array([[1.0, 0.0], [0.0, 0.0]]))
        with pytest.raises(fem.SingularOperatorError):
            fem.factorize(a)

    def test_indefinite_raises_distinct_error(self):
        a = sp.csr_matrix(np.diag([1.0, -1.0]))
        with pytest.raises(fem.IndefiniteOperatorError):
            fem.factorize(a)

    def test_indefinite_allowed_when_not_checked(self):
        a = sp.csr_matrix(np.diag([1.0, -1.0]))
        h = fem.factorize(a, check_positive=False)
        np.testing.assert_allclose(h.solve(np.array([2.0, 3.0])), [2.0, -3.0])


class TestDenseSymEig:
    def test_generalized_pairs(self):
        rng = np.random.default_rng(3)
        n = 12
        a = rng.normal(size=(n, n))
        a = a + a.T
        c = rng.normal(size=(n, n))
        b = c @ c.T + n * np.eye(n)
        w, v = fem.dense_sym_eig(a, b)
        np.testing.assert_allclose(a @ v, b @ v @ np.diag(w), atol=1e-9)
        np.testing.assert_allclose(v.T @ b @ v, np.eye(n), atol=1e-10)
        assert np.all(np.diff(np.abs(w)) <= 1e-12)
        # trace identity against an independent computation
        np.testing.assert_allclose(w.sum(), np.trace(np.linalg.solve(b, a)), rtol=1e-10)

    def test_size_guard(self):
        with pytest.raises(ValueError):
            fem.dense_sym_eig(np.eye(2001))


class TestRng:
    def test_deterministic_and_stream_separated(self):
        a = fem.Rng(123, 0).standard_normal(16)
        b = fem.Rng(123, 0).standard_normal(16)
        c = fem.Rng(123, 1).standard_normal(16)
        d = fem.Rng(124, 0).standard_normal(16)
        np.testing.assert_array_equal(a, b)
        assert not np.allclose(a, c)
        assert not np.allclose(a, d)

    def test_substream_matches_fresh_stream(self):
        base = fem.Rng(5, 0)
        np.testing.assert_array_equal(
            base.substream(3).standard_normal(8), fem.Rng(5, 3).standard_normal(8)
        )

    def test_box_muller_layout(self):
        """Interleaved pairs r*cos, r*sin from consecutive uniforms."""
        z = fem.Rng(9, 2).standard_normal(6)
        gen = fem.Rng(9, 2)
        u1 = gen.uniform(3)
        u2 = gen.uniform(3)
        rad = np.sqrt(-2.0 * np.log1p(-u1))
        np.testing.assert_allclose(z[0::2], rad * np.cos(2 * np.pi * u2))
        np.testing.assert_allclose(z[1::2], rad * np.sin(2 * np.pi * u2))

    def test_normal_moments(self):
        """10^6 draws: |mean| <= 4e-3 and |var - 1| <= 1e-2."""
        z = fem.Rng(2024, 0).standard_normal(1_000_000)
        assert abs(z.mean()) <= 4e-3
        assert abs(z.var() - 1.0) <= 1e-2

    def test_normal_matrix_shape_and_determinism(self):
        m1 = fem.Rng(1, 4).normal_matrix(5, 3)
        m2 = fem.Rng(1, 4).normal_matrix(5, 3)
        assert m1.shape == (5, 3)
        np.testing.assert_array_equal(m1, m2)
