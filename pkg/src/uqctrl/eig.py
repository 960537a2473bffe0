"""Randomized generalized eigenpairs and trace estimators.

The double-pass solver targets the pencil (H, C^-1): eigenvalues of
the prior-preconditioned Hessian C H with eigenvectors orthonormal in
the C^-1 inner product. Operator actions are the only access to H,
and each of the two passes applies it k + p times, so the solve
budget downstream is exactly 2 (k + p) Hessian actions.

Trace estimators come in two flavors: the Gaussian probe average
(one Hessian action per probe, unbiased for tr and tr of the square)
and the spectral sum over retained eigenvalues, whose error is the
discarded tail.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fem


@dataclass
class EigPairs:
    """Result of the randomized generalized eigensolve.

    Attributes
    ----------
    values : (k,) array
        Retained eigenvalues, signed, sorted by decreasing magnitude.
    vectors : (n, k) array
        Matching eigenvectors, orthonormal in the B = C^-1 inner
        product (so C^-1-orthonormal primal fields).
    ritz_values : (r,) array
        Every Ritz value of the projected problem, same ordering; the
        entries beyond ``k`` expose the first discarded eigenvalues.
    requested : int
        The k that was asked for.
    breakdown : bool
        True when the sketch lost rank and the basis shrank below
        k + p columns; the retained count is then min(k, rank).
    """

    values: np.ndarray
    vectors: np.ndarray
    ritz_values: np.ndarray
    requested: int
    breakdown: bool

    @property
    def count(self) -> int:
        return self.values.shape[0]


def b_orthonormalize(y: np.ndarray, apply_b, drop_tol: float = 1e-12):
    """Modified Gram-Schmidt in the B inner product, one reorthogonalization.

    Returns (q, bq, breakdown): columns of q satisfy q^T B q = I and
    bq = B q. Columns whose B-norm collapses below drop_tol times the
    largest incoming B-norm are dropped, shrinking the basis.
    """
    n, cols = y.shape
    qs: list[np.ndarray] = []
    bqs: list[np.ndarray] = []
    ref_norm = 0.0
    breakdown = False
    for j in range(cols):
        v = y[:, j].copy()
        for _ in range(2):
            for q, bq in zip(qs, bqs):
                v -= (bq @ v) * q
        bv = apply_b(v)
        norm2 = float(v @ bv)
        norm = np.sqrt(max(norm2, 0.0))
        if j == 0:
            ref_norm = norm
        if not np.isfinite(norm) or norm <= drop_tol * max(ref_norm, 1.0):
            breakdown = True
            continue
        qs.append(v / norm)
        bqs.append(bv / norm)
    if not qs:
        return np.zeros((n, 0)), np.zeros((n, 0)), True
    return np.column_stack(qs), np.column_stack(bqs), breakdown


def double_pass_gevp(apply_a, apply_binv, apply_b, dim: int, k: int, p: int, rng: fem.Rng) -> EigPairs:
    """Double-pass randomized solver for the pencil (A, B).

    Parameters
    ----------
    apply_a : callable
        Symmetric operator action, primal field in, dual vector out.
    apply_binv, apply_b : callable
        Actions of B^-1 (dual to primal) and B (primal to dual); for
        the preconditioned Hessian these are the covariance and the
        precision.
    dim : int
        Field dimension; k + p must not exceed it.
    k, p : int
        Retained pairs and oversampling columns.
    rng : fem.Rng
        Stream for the Gaussian sketch; fixing it freezes the result.
    """
    if k < 1:
        raise ValueError("need at least one eigenpair")
    if p < 0 or k + p > dim:
        raise ValueError("need 0 <= p and k + p <= dim")
    cols = k + p
    omega = rng.normal_matrix(dim, cols)
    y = np.column_stack([apply_binv(apply_a(omega[:, j])) for j in range(cols)])
    q, _, breakdown = b_orthonormalize(y, apply_b)
    r = q.shape[1]
    if r == 0:
        return EigPairs(
            values=np.zeros(0),
            vectors=np.zeros((dim, 0)),
            ritz_values=np.zeros(0),
            requested=k,
            breakdown=True,
        )
    aq = np.column_stack([apply_a(q[:, j]) for j in range(r)])
    t = q.T @ aq
    t = 0.5 * (t + t.T)
    w, s = np.linalg.eigh(t)
    order = np.argsort(-np.abs(w), kind="stable")
    w = w[order]
    s = s[:, order]
    keep = min(k, r)
    return EigPairs(
        values=w[:keep],
        vectors=q @ s[:, :keep],
        ritz_values=w,
        requested=k,
        breakdown=breakdown or r < cols,
    )


def hessian_eigenpairs(lp, prior, k: int, p: int, rng: fem.Rng) -> EigPairs:
    """Eigenpairs of the prior-preconditioned Hessian at a point.

    Costs 2 (k + p) Hessian actions, each two linear solves.
    """
    return double_pass_gevp(
        lp.hess_apply, prior.apply_c, prior.apply_cinv, lp.dim, k, p, rng
    )


def spectral_traces(values: np.ndarray, n: int | None = None) -> tuple[float, float]:
    """Partial sums (sum lambda_j, sum lambda_j^2) over the first n."""
    v = np.asarray(values)[: (len(values) if n is None else n)]
    return float(v.sum()), float((v**2).sum())


def gaussian_traces(lp, prior, n_probes: int, rng: fem.Rng) -> tuple[float, float]:
    """Gaussian probe estimates of tr(C H) and tr((C H)^2).

    Probes are zero-mean prior samples; each consumes one Hessian
    action, shared between the two estimates, so n_probes actions in
    total. Both estimates are unbiased.
    """
    t1 = 0.0
    t2 = 0.0
    for _ in range(n_probes):
        mhat = prior.apply_sqrt_c(rng.standard_normal(lp.dim))
        hm = lp.hess_apply(mhat)
        t1 += float(mhat @ hm)
        t2 += float(hm @ prior.apply_c(hm))
    return t1 / n_probes, t2 / n_probes


def trace_error_sweep(values: np.ndarray, n_ref: int | None = None):
    """Rows (n, error1, error2): spectral-sum errors against n_ref.

    The reference is the full partial sum over n_ref eigenvalues, so
    the row at n = n_ref is exactly zero and earlier rows measure the
    discarded tail for both the trace and the squared trace.
    """
    values = np.asarray(values, dtype=float)
    if n_ref is None:
        n_ref = len(values)
    ref1, ref2 = spectral_traces(values, n_ref)
    csum1 = np.cumsum(values[:n_ref])
    csum2 = np.cumsum(values[:n_ref] ** 2)
    return [
        (n, abs(csum1[n - 1] - ref1), abs(csum2[n - 1] - ref2))
        for n in range(1, n_ref + 1)
    ]
