"""Forward models: an elliptic injection-control problem and a quadratic toy.

Both models expose the same small protocol, consumed unchanged by the
Hessian, estimator and optimizer modules:

* ``state_operator(m)`` factorizes the state equation at a parameter
  field once and hands back an operator that solves the state problem
  for any control and solves adjoint-type systems for dual right-hand
  sides, charging the model's solve ledger per solve (factorizations
  are free, repeated solves are not).
* ``forms(m, u, v)`` bundles the partial derivatives of the residual
  form r(u, v, m, z) at the point (u, v, m). Method names spell out
  which slots are differentiated, in order; for example ``vm(w)`` is
  the v- and m-derivative contracted with the field ``w``, a dual-u
  vector, and ``mv(dv)`` is its adjoint, a dual-m vector.
* ``eval_q`` / ``dq_du`` / ``d2q_du`` evaluate the scalar quantity of
  interest and its first and second state derivatives.

The elliptic model is -div(exp(m) grad u) = sum_i z_i f_i on a
rectangle, u = 2 - x on the left and right edges, zero flux top and
bottom, with mollified injection sources f_i, point observations at
production wells, and Q(u) = |B(u - lift) - target|^2 acting on the
homogenized state.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import fem


@dataclass
class SolveLedger:
    """Thread-safe counters for state and linear (adjoint-type) solves."""

    state_solves: int = 0
    linear_solves: int = 0
    _lock: threading.Lock = field(
        default_factory=threading.Lock, repr=False, compare=False
    )

    def add_state(self, k: int = 1) -> None:
        with self._lock:
            self.state_solves += k

    def add_linear(self, k: int = 1) -> None:
        with self._lock:
            self.linear_solves += k

    def reset(self) -> None:
        with self._lock:
            self.state_solves = 0
            self.linear_solves = 0

    def snapshot(self) -> tuple[int, int]:
        with self._lock:
            return (self.state_solves, self.linear_solves)


def well_grid(
    count_x: int,
    count_y: int,
    lx: float = 2.0,
    ly: float = 1.0,
    x0: float = 0.0,
    y0: float = 0.0,
) -> np.ndarray:
    """Interior uniform grid of well positions, x varying fastest.

    The points are x0 + i*lx/(count_x+1), y0 + j*ly/(count_y+1) for
    i, j starting at 1, so a 5x4 grid on the default rectangle lands
    on x in {1/3, ..., 5/3} and y in {0.2, ..., 0.8}.  Nonzero offsets
    place the grid over a sub-rectangle.
    """
    xs = x0 + np.arange(1, count_x + 1) * lx / (count_x + 1)
    ys = y0 + np.arange(1, count_y + 1) * ly / (count_y + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    return np.column_stack([gx.ravel(), gy.ravel()])


@dataclass
class WellConfig:
    """Injection and production well layout.

    ``injection`` rows are source centers (one control each),
    ``production`` rows are observation points, ``sigma`` is the
    mollifier width. Pressure targets at the production wells follow
    the fixed profile 3 - 8(x-1)^2 - 4(y-0.5)^2.

    The default production grid sits inside the injection pattern,
    over the central band where the target profile is positive and
    smooth.  Nonnegative injection can only raise pressure, so
    observation points outside that band would carry targets no
    admissible control can approach.
    """

    injection: np.ndarray
    production: np.ndarray
    sigma: float = 0.05

    @staticmethod
    def default(lx: float = 2.0, ly: float = 1.0) -> "WellConfig":
        return WellConfig(
            injection=well_grid(5, 4, lx, ly),
            production=well_grid(4, 3, lx / 2, 0.8 * ly, x0=lx / 4, y0=0.1 * ly),
        )

    def targets(self) -> np.ndarray:
        x = self.production[:, 0]
        y = self.production[:, 1]
        return 3.0 - 8.0 * (x - 1.0) ** 2 - 4.0 * (y - 0.5) ** 2

    @property
    def n_controls(self) -> int:
        return self.injection.shape[0]


def interpolation_matrix(mesh: fem.Mesh, points: np.ndarray) -> sp.csr_matrix:
    """P1 evaluation operator at arbitrary interior points.

    Row k holds the barycentric weights of point k inside its triangle,
    so (B u)[k] equals the finite element function at that point.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    rows, cols, vals = [], [], []
    for k, (x, y) in enumerate(points):
        if not (0 <= x <= mesh.lx and 0 <= y <= mesh.ly):
            raise ValueError(f"point {(x, y)} outside the domain")
        ix = min(int(x / mesh.hx), mesh.nx - 1)
        jy = min(int(y / mesh.hy), mesh.ny - 1)
        xi = x / mesh.hx - ix
        eta = y / mesh.hy - jy
        a = jy * (mesh.nx + 1) + ix
        b = a + 1
        c = b + (mesh.nx + 1)
        d = a + (mesh.nx + 1)
        if xi >= eta:  # lower triangle (a, b, c)
            nodes = (a, b, c)
            weights = (1.0 - xi, xi - eta, eta)
        else:  # upper triangle (a, c, d)
            nodes = (a, c, d)
            weights = (1.0 - eta, xi, eta - xi)
        rows.extend([k] * 3)
        cols.extend(nodes)
        vals.extend(weights)
    return sp.csr_matrix(
        (vals, (rows, cols)), shape=(points.shape[0], mesh.n_nodes)
    )


def mollifier_nodal(mesh: fem.Mesh, center: np.ndarray, sigma: float) -> np.ndarray:
    """Nodal interpolant of the normalized Gaussian bump at ``center``."""
    d2 = np.sum((mesh.coords - center) ** 2, axis=1)
    return np.exp(-d2 / (2.0 * sigma**2)) / (2.0 * np.pi * sigma**2)


class EllipticForms:
    """Residual derivative forms for the elliptic model at (u, v, m).

    Coefficient fields are read at triangle midpoints, matching the
    assembly quadrature, which makes every form here the exact
    derivative of the discrete residual rather than a continuum
    approximation; finite differences of the assembled system agree to
    round-off.
    """

    def __init__(self, model: "EllipticControlModel", m, u, v):
        self.model = model
        mesh = model.mesh
        self._tris = mesh.tris
        self._n = mesh.n_nodes
        gb = model.geom.gblocks
        self._gb = gb
        self._e = np.exp(fem.midpoint_values(mesh, np.asarray(m, dtype=float)))
        self._gu = np.einsum("tij,tj->ti", gb, u[self._tris])
        self._gv = np.einsum("tij,tj->ti", gb, v[self._tris])
        self._uv = np.einsum("ti,ti->t", self._gu, v[self._tris])

    def _mid(self, w) -> np.ndarray:
        return np.asarray(w)[self._tris].mean(axis=1)

    def _scatter_u(self, per_tri: np.ndarray) -> np.ndarray:
        out = np.zeros(self._n)
        np.add.at(out, self._tris.ravel(), per_tri.ravel())
        return out

    def _scatter_m(self, per_tri_scalar: np.ndarray) -> np.ndarray:
        out = np.zeros(self._n)
        np.add.at(
            out, self._tris.ravel(), np.repeat(per_tri_scalar / 3.0, 3)
        )
        return out

    # -- second derivatives ------------------------------------------------
    def vm(self, w) -> np.ndarray:
        """d2r/dv dm [w]: dual-u vector, int e^m w grad(u).grad(.)"""
        return self._scatter_u((self._e * self._mid(w))[:, None] * self._gu)

    def um(self, w) -> np.ndarray:
        """d2r/du dm [w]: dual-u vector, int e^m w grad(v).grad(.)"""
        return self._scatter_u((self._e * self._mid(w))[:, None] * self._gv)

    def mv(self, dv) -> np.ndarray:
        """d2r/dm dv [dv]: dual-m vector, adjoint of vm."""
        s = self._e * np.einsum("ti,ti->t", self._gu, np.asarray(dv)[self._tris])
        return self._scatter_m(s)

    def mu(self, du) -> np.ndarray:
        """d2r/dm du [du]: dual-m vector, adjoint of um."""
        s = self._e * np.einsum("ti,ti->t", self._gv, np.asarray(du)[self._tris])
        return self._scatter_m(s)

    def mm(self, w) -> np.ndarray:
        """d2r/dm dm [w]: dual-m vector, int e^m w grad(u).grad(v)."""
        return self._scatter_m(self._e * self._mid(w) * self._uv)

    def zv(self, dv) -> np.ndarray:
        """d2r/dz dv [dv]: control-space vector, -F^T dv."""
        return -(self.model.f_matrix.T @ np.asarray(dv))

    # -- third derivatives --------------------------------------------------
    def vum(self, w, du) -> np.ndarray:
        """d3r/dv du dm [w, du]: dual-u vector, int e^m w grad(du).grad(.)"""
        gdu = np.einsum("tij,tj->ti", self._gb, np.asarray(du)[self._tris])
        return self._scatter_u((self._e * self._mid(w))[:, None] * gdu)

    def umv(self, w, dv) -> np.ndarray:
        """d3r/du dm dv [w, dv]: same integral as vum with dv in place."""
        return self.vum(w, dv)

    def umu(self, w, du) -> np.ndarray:
        """d3r/du dm du [w, du]: identical integral to vum; retained for
        completeness, the optimizer never needs it for a PDE linear in u."""
        return self.vum(w, du)

    def vmm(self, w1, w2) -> np.ndarray:
        """d3r/dv dm dm [w1, w2]: dual-u vector, int e^m w1 w2 grad(u).grad(.)"""
        s = self._e * self._mid(w1) * self._mid(w2)
        return self._scatter_u(s[:, None] * self._gu)

    def uum(self, w1, w2) -> np.ndarray:
        """d3r/du dm dm [w1, w2]: dual-u vector, int e^m w1 w2 grad(v).grad(.)"""
        s = self._e * self._mid(w1) * self._mid(w2)
        return self._scatter_u(s[:, None] * self._gv)

    # -- first derivative in m ----------------------------------------------
    def grad_m(self) -> np.ndarray:
        """dr/dm: dual-m vector, int e^m grad(u).grad(v) against bumps."""
        return self._scatter_m(self._e * self._uv)


class EllipticStateOperator:
    """Factorized state operator A(m) with lifted Dirichlet data."""

    def __init__(self, model: "EllipticControlModel", m):
        self.model = model
        self.m = np.array(m, dtype=float)
        a = fem.assemble_stiffness(model.mesh, model.geom, self.m)
        free = model.mesh.free
        self._a_lift_free = (a @ model.lift)[free]
        self._solver = fem.factorize(
            a[np.ix_(free, free)].tocsr(), model.solver_method
        )

    def solve_state(self, z: np.ndarray) -> np.ndarray:
        """Full nodal state for control z; one state solve."""
        free = self.model.mesh.free
        rhs = (self.model.f_matrix @ np.asarray(z, dtype=float))[free]
        uf = self._solver.solve(rhs - self._a_lift_free)
        self.model.ledger.add_state()
        u = self.model.lift.copy()
        u[free] += uf
        return u

    def solve_linear(self, rhs_dual_u: np.ndarray) -> np.ndarray:
        """Solve A(m) w = rhs on free nodes, zero on Dirichlet nodes.

        Right-hand sides are full-length dual-u vectors; entries at
        Dirichlet rows are ignored, multipliers vanish there.
        """
        free = self.model.mesh.free
        out = np.zeros(self.model.mesh.n_nodes)
        out[free] = self._solver.solve(np.asarray(rhs_dual_u)[free])
        self.model.ledger.add_linear()
        return out


class EllipticControlModel:
    """Injection-rate control of an elliptic pressure equation.

    Parameters
    ----------
    mesh : fem.Mesh
    wells : WellConfig, optional
        Defaults to the 5x4 injection / 4x3 production layout.
    solver : str
        Backend for all factorizations, "splu" or "cg".
    """

    def __init__(self, mesh: fem.Mesh, wells: WellConfig | None = None, solver="splu"):
        self.mesh = mesh
        self.wells = wells if wells is not None else WellConfig.default(mesh.lx, mesh.ly)
        self.solver_method = solver
        self.geom = fem.triangle_geometry(mesh)
        self.mass = fem.assemble_mass(mesh)
        nodal = np.column_stack(
            [
                mollifier_nodal(mesh, c, self.wells.sigma)
                for c in self.wells.injection
            ]
        )
        self.f_matrix = np.asarray(self.mass @ nodal)
        self.b_matrix = interpolation_matrix(mesh, self.wells.production)
        self.targets = self.wells.targets()
        self.lift = 2.0 - mesh.coords[:, 0]
        self.ledger = SolveLedger()

    @property
    def dim_m(self) -> int:
        return self.mesh.n_nodes

    @property
    def n_controls(self) -> int:
        return self.wells.n_controls

    def source_integrals(self) -> np.ndarray:
        """Integral of each interpolated mollifier, 1 up to truncation."""
        return self.f_matrix.T @ np.ones(self.mesh.n_nodes)

    def state_operator(self, m) -> EllipticStateOperator:
        return EllipticStateOperator(self, m)

    def forms(self, m, u, v) -> EllipticForms:
        return EllipticForms(self, m, u, v)

    def homogenized(self, u) -> np.ndarray:
        """The state minus the Dirichlet lift, zero on Dirichlet nodes."""
        return u - self.lift

    def observe(self, u) -> np.ndarray:
        return self.b_matrix @ self.homogenized(u)

    def eval_q(self, u) -> float:
        r = self.observe(u) - self.targets
        return float(r @ r)

    def dq_du(self, u) -> np.ndarray:
        r = self.observe(u) - self.targets
        return 2.0 * (self.b_matrix.T @ r)

    def d2q_du(self, du) -> np.ndarray:
        return 2.0 * (self.b_matrix.T @ (self.b_matrix @ np.asarray(du)))


class ToyForms:
    """Residual forms of the toy model; everything third order is zero."""

    def __init__(self, model: "QuadraticToyModel", v):
        self.model = model
        self._v = np.asarray(v, dtype=float)
        self._zero = np.zeros(model.dim)

    def vm(self, w):
        return -np.asarray(w, dtype=float)

    def um(self, w):
        return self._zero.copy()

    def mv(self, dv):
        return -np.asarray(dv, dtype=float)

    def mu(self, du):
        return self._zero.copy()

    def mm(self, w):
        return self._zero.copy()

    def zv(self, dv):
        if self.model.control_map is None:
            return np.zeros(self.model.n_controls)
        return -(self.model.control_map.T @ np.asarray(dv))

    def vum(self, w, du):
        return self._zero.copy()

    def umv(self, w, dv):
        return self._zero.copy()

    def umu(self, w, du):
        return self._zero.copy()

    def vmm(self, w1, w2):
        return self._zero.copy()

    def uum(self, w1, w2):
        return self._zero.copy()

    def grad_m(self):
        return -self._v


class ToyStateOperator:
    """Identity state map; solves are counted but trivial."""

    def __init__(self, model: "QuadraticToyModel", m):
        self.model = model
        self.m = np.array(m, dtype=float)

    def solve_state(self, z) -> np.ndarray:
        self.model.ledger.add_state()
        u = self.m.copy()
        if self.model.control_map is not None:
            u += self.model.control_map @ np.asarray(z, dtype=float)
        return u

    def solve_linear(self, rhs_dual_u) -> np.ndarray:
        self.model.ledger.add_linear()
        return np.array(rhs_dual_u, dtype=float)


class QuadraticToyModel:
    """Exactly quadratic quantity of interest on an identity state map.

    The residual is r(u, v, m, z) = v . (u - m - E z) and

        Q(u) = q0 + g.(u - u_ref) + 0.5 (u - u_ref) . H (u - u_ref)

    with H = U diag(d) U^T given by low-rank factors. With E = None the
    state map is the identity in m and controls act on nothing; with a
    control map E the cost functionals become closed quadratic forms in
    z, which the optimizer tests exploit.
    """

    def __init__(
        self,
        dim: int,
        q0: float,
        g: np.ndarray,
        h_factor: np.ndarray,
        h_values: np.ndarray,
        u_ref: np.ndarray | None = None,
        control_map: np.ndarray | None = None,
        n_controls: int | None = None,
    ):
        self.dim = int(dim)
        self.q0 = float(q0)
        self.g = np.asarray(g, dtype=float)
        self.h_factor = np.asarray(h_factor, dtype=float)
        self.h_values = np.asarray(h_values, dtype=float)
        self.u_ref = (
            np.zeros(self.dim) if u_ref is None else np.asarray(u_ref, dtype=float)
        )
        self.control_map = (
            None if control_map is None else np.asarray(control_map, dtype=float)
        )
        if self.control_map is not None:
            self._n_controls = self.control_map.shape[1]
        else:
            self._n_controls = self.dim if n_controls is None else int(n_controls)
        self.ledger = SolveLedger()

    @property
    def dim_m(self) -> int:
        return self.dim

    @property
    def n_controls(self) -> int:
        return self._n_controls

    def apply_h(self, x) -> np.ndarray:
        return self.h_factor @ (self.h_values * (self.h_factor.T @ np.asarray(x)))

    def h_dense(self) -> np.ndarray:
        return (self.h_factor * self.h_values) @ self.h_factor.T

    def state_operator(self, m) -> ToyStateOperator:
        return ToyStateOperator(self, m)

    def forms(self, m, u, v) -> ToyForms:
        return ToyForms(self, v)

    def eval_q(self, u) -> float:
        w = np.asarray(u) - self.u_ref
        return self.q0 + float(self.g @ w) + 0.5 * float(w @ self.apply_h(w))

    def dq_du(self, u) -> np.ndarray:
        return self.g + self.apply_h(np.asarray(u) - self.u_ref)

    def d2q_du(self, du) -> np.ndarray:
        return self.apply_h(du)
