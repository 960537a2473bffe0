"""Matern-type Gaussian prior for the log-coefficient field.

The precision is the square of an elliptic operator: with
K = alpha1 * A_Theta + alpha2 * M (consistent mass inside K) and the
lumped mass vector M_L, the covariance is

    C = K^-1 M_L K^-1,

so apply_cinv is K M_L^-1 K and the two maps are exact mutual
inverses. The factor C^{1/2} = K^-1 M_L^{1/2} turns iid standard
normals into samples; C^{1/2} (C^{1/2})^T reproduces C because K is
symmetric. Gradients of scalar functionals live in the dual space and
pair with nodal fields through the plain euclidean dot product;
apply_c maps dual to primal and apply_cinv maps primal to dual.
"""

from __future__ import annotations

import numpy as np

from . import fem


class GaussianPrior:
    """Gaussian measure N(mean, C) on nodal fields.

    Parameters
    ----------
    mesh : fem.Mesh
    alpha1, alpha2 : float
        Weights of the stiffness and mass parts of K; both positive.
        Larger alpha2 shortens the correlation length and shrinks the
        marginal variance.
    theta : (2, 2) array, optional
        Anisotropy tensor inside the stiffness part; identity default.
    mean : array or float, optional
        Mean field, broadcast over nodes; zero default.
    solver : str
        Factorization backend for K, "splu" or "cg".
    """

    def __init__(self, mesh, alpha1, alpha2, theta=None, mean=None, solver="splu"):
        if alpha1 <= 0 or alpha2 <= 0:
            raise ValueError("prior weights must be positive")
        self.mesh = mesh
        self.alpha1 = float(alpha1)
        self.alpha2 = float(alpha2)
        geom = fem.triangle_geometry(mesh, theta)
        a = fem.assemble_stiffness(mesh, geom)
        m = fem.assemble_mass(mesh)
        self.k = (self.alpha1 * a + self.alpha2 * m).tocsr()
        self.m_lumped = fem.lumped_mass(mesh)
        self._k_solver = fem.factorize(self.k, solver)
        n = mesh.n_nodes
        if mean is None:
            self.mean = np.zeros(n)
        else:
            self.mean = np.broadcast_to(np.asarray(mean, dtype=float), (n,)).copy()

    @property
    def dim(self) -> int:
        return self.mesh.n_nodes

    def apply_c(self, dual: np.ndarray) -> np.ndarray:
        """Covariance action, dual vector in, nodal field out."""
        return self._k_solver.solve(self.m_lumped * self._k_solver.solve(dual))

    def apply_cinv(self, field: np.ndarray) -> np.ndarray:
        """Precision action, nodal field in, dual vector out."""
        return self.k @ ((self.k @ field) / self.m_lumped)

    def apply_sqrt_c(self, xi: np.ndarray) -> np.ndarray:
        """Map iid standard normals to a zero-mean sample."""
        return self._k_solver.solve(np.sqrt(self.m_lumped) * xi)

    def sample(self, rng: fem.Rng, count: int | None = None) -> np.ndarray:
        """Draw samples m = mean + C^{1/2} xi.

        Returns a single field when ``count`` is None, else an array of
        shape (count, n_nodes) whose rows consume the stream in order.
        """
        if count is None:
            return self.mean + self.apply_sqrt_c(rng.standard_normal(self.dim))
        out = np.empty((count, self.dim))
        for i in range(count):
            out[i] = self.mean + self.apply_sqrt_c(rng.standard_normal(self.dim))
        return out

    def quadratic(self, dual: np.ndarray) -> float:
        """The pairing <dual, C dual>, the variance of <dual, m>."""
        half = self._k_solver.solve(dual)
        return float(half @ (self.m_lumped * half))


def build_prior(
    mesh,
    alpha1: float,
    alpha2: float,
    theta11: float = 1.0,
    theta12: float = 0.0,
    theta22: float = 1.0,
    mean=None,
    solver: str = "splu",
) -> GaussianPrior:
    """Construct the prior from scalar tensor entries, as configs do."""
    theta = np.array([[theta11, theta12], [theta12, theta22]])
    return GaussianPrior(mesh, alpha1, alpha2, theta=theta, mean=mean, solver=solver)
