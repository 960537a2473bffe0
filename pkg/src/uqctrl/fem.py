"""Structured triangular P1 finite elements on a rectangle.

Builds the mesh, the element geometry blocks, stiffness and mass
matrices, sparse factorizations, a dense symmetric eigensolver for
small cross-checks, and the counter-based random stream used
everywhere else.

Conventions, fixed once and relied on by every other module:

* Nodes are numbered lexicographically, x fastest: node ``j*(nx+1)+i``
  sits at ``(i*hx, j*hy)``.
* Each grid cell is split along its a-c diagonal into two
  counter-clockwise triangles ``(a, b, c)`` and ``(a, c, d)`` where
  ``a`` is the lower-left corner.
* The left and right edges (x = 0 and x = Lx) are Dirichlet, top and
  bottom are Neumann, and corners count as Dirichlet, so every
  boundary node carries exactly one tag.
* Coefficient fields are evaluated at element midpoints as the mean of
  the three vertex values (one-point quadrature).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SolverError(Exception):
    """Base class for linear-solver failures."""


class SingularOperatorError(SolverError):
    """The factorization hit an exact zero pivot."""


class IndefiniteOperatorError(SolverError):
    """A pivot came out negative where a positive matrix was expected."""


@dataclass
class Mesh:
    """Structured triangulation of [0, Lx] x [0, Ly].

    Attributes
    ----------
    coords : (n_nodes, 2) float array
        Node coordinates, lexicographic with x fastest.
    tris : (n_tris, 3) int array
        Vertex indices of each triangle, counter-clockwise.
    dirichlet : (n_d,) int array
        Nodes on x = 0 or x = Lx, corners included.
    neumann : (n_n,) int array
        Remaining boundary nodes on y = 0 or y = Ly.
    free : (n_f,) int array
        All nodes that are not Dirichlet.
    """

    nx: int
    ny: int
    lx: float
    ly: float
    coords: np.ndarray = field(repr=False)
    tris: np.ndarray = field(repr=False)
    dirichlet: np.ndarray = field(repr=False)
    neumann: np.ndarray = field(repr=False)
    free: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def n_tris(self) -> int:
        return self.tris.shape[0]

    @property
    def hx(self) -> float:
        return self.lx / self.nx

    @property
    def hy(self) -> float:
        return self.ly / self.ny


def build_mesh(nx: int, ny: int, lx: float = 2.0, ly: float = 1.0) -> Mesh:
    """Build the structured mesh with its boundary tags.

    Parameters
    ----------
    nx, ny : int
        Cells per direction; must be at least 1.
    lx, ly : float
        Side lengths of the rectangle.

    Returns
    -------
    Mesh
    """
    if nx < 1 or ny < 1:
        raise ValueError("mesh needs at least one cell per direction")
    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    coords = np.column_stack([gx.ravel(), gy.ravel()])

    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    a = (jj * (nx + 1) + ii).ravel()
    b = a + 1
    c = b + (nx + 1)
    d = a + (nx + 1)
    tris = np.empty((2 * nx * ny, 3), dtype=np.int64)
    tris[0::2] = np.column_stack([a, b, c])
    tris[1::2] = np.column_stack([a, c, d])

    i_idx = np.tile(np.arange(nx + 1), ny + 1)
    j_idx = np.repeat(np.arange(ny + 1), nx + 1)
    on_lr = (i_idx == 0) | (i_idx == nx)
    on_tb = (j_idx == 0) | (j_idx == ny)
    dirichlet = np.flatnonzero(on_lr)
    neumann = np.flatnonzero(on_tb & ~on_lr)
    free = np.flatnonzero(~on_lr)
    return Mesh(nx, ny, lx, ly, coords, tris, dirichlet, neumann, free)


@dataclass
class TriangleGeometry:
    """Per-triangle data reused across assemblies.

    ``gblocks[t, i, j]`` is the element stiffness entry
    ``area_t * grad(phi_i) . Theta . grad(phi_j)`` without any
    coefficient, so a stiffness matrix for coefficient exp(m) is the
    scatter of ``exp(m_t) * gblocks[t]``.
    """

    areas: np.ndarray
    grads: np.ndarray
    gblocks: np.ndarray
    rows: np.ndarray
    cols: np.ndarray


def triangle_geometry(mesh: Mesh, theta: np.ndarray | None = None) -> TriangleGeometry:
    """Precompute areas, basis gradients and stiffness blocks.

    Parameters
    ----------
    mesh : Mesh
    theta : (2, 2) array, optional
        Symmetric positive diffusion tensor; identity when omitted.
    """
    p = mesh.coords[mesh.tris]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    areas = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    if np.any(areas <= 0):
        raise ValueError("mesh contains non-positively oriented triangles")

    # grad(phi_k) is the rotated opposite edge over twice the area
    grads = np.empty((mesh.n_tris, 3, 2))
    for k, (r, s) in enumerate([(1, 2), (2, 0), (0, 1)]):
        edge = p[:, s] - p[:, r]
        grads[:, k, 0] = -edge[:, 1]
        grads[:, k, 1] = edge[:, 0]
    grads /= (2.0 * areas)[:, None, None]

    if theta is None:
        tg = grads
    else:
        theta = np.asarray(theta, dtype=float)
        tg = np.einsum("ab,tkb->tka", theta, grads)
    gblocks = np.einsum("t,tia,tja->tij", areas, grads, tg)

    rows = np.repeat(mesh.tris, 3, axis=1).ravel()
    cols = np.tile(mesh.tris, (1, 3)).ravel()
    return TriangleGeometry(areas, grads, gblocks, rows, cols)


def midpoint_values(mesh: Mesh, nodal: np.ndarray) -> np.ndarray:
    """Mean of the three vertex values on every triangle."""
    return nodal[mesh.tris].mean(axis=1)


def assemble_stiffness(
    mesh: Mesh,
    geom: TriangleGeometry,
    log_coeff: np.ndarray | None = None,
) -> sp.csr_matrix:
    """Assemble the stiffness matrix for coefficient exp(log_coeff).

    The coefficient is sampled once per triangle at the midpoint
    (mean of vertex values); ``None`` means unit coefficient.

    Returns
    -------
    scipy.sparse.csr_matrix of shape (n_nodes, n_nodes)
    """
    if log_coeff is None:
        scale = np.ones(mesh.n_tris)
    else:
        scale = np.exp(midpoint_values(mesh, np.asarray(log_coeff, dtype=float)))
    data = (scale[:, None, None] * geom.gblocks).ravel()
    a = sp.coo_matrix((data, (geom.rows, geom.cols)), shape=(mesh.n_nodes, mesh.n_nodes))
    return a.tocsr()


def assemble_mass(mesh: Mesh) -> sp.csr_matrix:
    """Consistent P1 mass matrix (n_nodes x n_nodes, CSR)."""
    geom_local = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
    p = mesh.coords[mesh.tris]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    areas = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    data = (areas[:, None, None] * geom_local).ravel()
    rows = np.repeat(mesh.tris, 3, axis=1).ravel()
    cols = np.tile(mesh.tris, (1, 3)).ravel()
    m = sp.coo_matrix((data, (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes))
    return m.tocsr()


def lumped_mass(mesh: Mesh) -> np.ndarray:
    """Row-sum lumped mass vector, area/3 scattered per vertex."""
    p = mesh.coords[mesh.tris]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    areas = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    out = np.zeros(mesh.n_nodes)
    np.add.at(out, mesh.tris.ravel(), np.repeat(areas / 3.0, 3))
    return out


class SparseFactor:
    """LU factorization of a sparse SPD matrix with reusable solves.

    Wraps SuperLU in symmetric mode with a fill-reducing symmetric
    permutation and no diagonal pivoting, so the U diagonal carries the
    inertia of the matrix: a zero pivot means singular, a negative one
    means the operator is not positive definite.
    """

    def __init__(self, a: sp.spmatrix, check_positive: bool = True):
        try:
            self._lu = spla.splu(
                a.tocsc(),
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options=dict(SymmetricMode=True),
            )
        except RuntimeError as err:
            raise SingularOperatorError(str(err)) from err
        du = self._lu.U.diagonal()
        if not np.all(np.isfinite(du)) or np.any(du == 0.0):
            raise SingularOperatorError("zero pivot in factorization")
        if check_positive and np.any(du < 0.0):
            raise IndefiniteOperatorError(
                "negative pivot: operator is not positive definite"
            )
        self.shape = a.shape

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(rhs, dtype=float))


class CgSolver:
    """Conjugate-gradient fallback with Jacobi preconditioning.

    Same interface as SparseFactor; meant for configurations where the
    direct factorization is not wanted. Tight tolerance so downstream
    derivative checks are not polluted by solver error.
    """

    def __init__(self, a: sp.spmatrix, rtol: float = 1e-12, maxiter: int = 20000):
        self._a = a.tocsr()
        d = self._a.diagonal()
        if np.any(d <= 0):
            raise IndefiniteOperatorError("nonpositive diagonal, cg needs SPD")
        self._m = spla.LinearOperator(a.shape, matvec=lambda x: x / d)
        self._rtol = rtol
        self._maxiter = maxiter
        self.shape = a.shape

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        x, info = spla.cg(
            self._a, rhs, rtol=self._rtol, atol=0.0, maxiter=self._maxiter, M=self._m
        )
        if info != 0:
            raise SolverError(f"cg did not converge (info={info})")
        return x


def factorize(a: sp.spmatrix, method: str = "splu", check_positive: bool = True):
    """Return a solver handle for the SPD matrix ``a``.

    ``method`` is "splu" (default) or "cg".
    """
    if method == "splu":
        return SparseFactor(a, check_positive=check_positive)
    if method == "cg":
        return CgSolver(a)
    raise ValueError(f"unknown solver method {method!r}")


def dense_sym_eig(a: np.ndarray, b: np.ndarray | None = None):
    """Dense (generalized) symmetric eigendecomposition.

    Solves a V = b V diag(w) with a symmetric and b SPD, returning the
    pairs ordered by decreasing absolute eigenvalue with signs kept.
    Guarded to small problems, this is the cross-check oracle for the
    randomized solver, not a production path.

    Returns
    -------
    w : (n,) eigenvalues, |w[0]| >= |w[1]| >= ...
    v : (n, n) eigenvectors, columns b-orthonormal
    """
    a = np.asarray(a, dtype=float)
    if a.shape[0] > 2000:
        raise ValueError("dense eigensolver limited to n <= 2000")
    a = 0.5 * (a + a.T)
    if b is None:
        w, v = np.linalg.eigh(a)
    else:
        import scipy.linalg as sla

        b = 0.5 * (np.asarray(b, dtype=float) + np.asarray(b, dtype=float).T)
        w, v = sla.eigh(a, b)
    order = np.argsort(-np.abs(w), kind="stable")
    return w[order], v[:, order]


class Rng:
    """Counter-based random stream (Philox) with explicit substreams.

    A stream is keyed by (seed, stream); draws are reproducible across
    platforms and independent across stream ids. Normal variates come
    from the Box-Muller transform applied to the raw uniforms so the
    mapping from counter to variate is pinned down by this module, not
    by the numpy version.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def substream(self, stream: int) -> "Rng":
        """Fresh stream with the same seed and a different stream id."""
        return Rng(self.seed, stream)

    def uniform(self, n: int) -> np.ndarray:
        """n uniforms in [0, 1)."""
        return self._gen.random(n)

    def standard_normal(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller.

        Pairs (r cos, r sin) with r = sqrt(-2 log(1 - u1)) are
        interleaved; 1 - u1 keeps the log away from zero.
        """
        m = (n + 1) // 2
        u1 = self.uniform(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log1p(-u1))
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(2.0 * np.pi * u2)
        out[1::2] = r * np.sin(2.0 * np.pi * u2)
        return out[:n]

    def normal_matrix(self, rows: int, cols: int) -> np.ndarray:
        """Rows x cols matrix of standard normals, drawn column-major."""
        return self.standard_normal(rows * cols).reshape((cols, rows)).T
