"""Linearization points and parameter-Hessian actions of the QoI.

``linearize`` solves the state and adjoint once at (m, z) and caches
the factorized operator, the homogenized QoI value, and the dual
gradient with respect to the parameter. ``hess_apply`` then costs
exactly two linear solves: one incremental state, one incremental
adjoint. Everything here works for any model implementing the shared
protocol, which is what the derivative checks exploit on the toy.
"""

from __future__ import annotations

import numpy as np


class LinearizationPoint:
    """State, adjoint and residual forms frozen at (m, z).

    Attributes
    ----------
    qbar : float
        QoI at the linearization point.
    gbar : array
        Dual-space parameter gradient of the QoI.
    """

    def __init__(self, model, m, z):
        self.model = model
        self.m = np.asarray(m, dtype=float)
        self.z = np.asarray(z, dtype=float)
        self.op = model.state_operator(self.m)
        self.u = self.op.solve_state(self.z)
        self.v = self.op.solve_linear(-model.dq_du(self.u))
        self.forms = model.forms(self.m, self.u, self.v)
        self.qbar = model.eval_q(self.u)
        self.gbar = self.forms.grad_m()

    @property
    def dim(self) -> int:
        return self.model.dim_m

    def incremental_pair(self, mhat) -> tuple[np.ndarray, np.ndarray]:
        """Incremental state and adjoint for a parameter direction.

        Two linear solves: A du = -r_vm[mhat] and
        A dv = -(Q_uu du + r_um[mhat]).
        """
        uhat = self.op.solve_linear(-self.forms.vm(mhat))
        vhat = self.op.solve_linear(
            -(self.model.d2q_du(uhat) + self.forms.um(mhat))
        )
        return uhat, vhat

    def hess_apply(self, mhat) -> np.ndarray:
        """Parameter-Hessian action on mhat, a dual vector; 2 solves."""
        uhat, vhat = self.incremental_pair(mhat)
        return (
            self.forms.mv(vhat) + self.forms.mu(uhat) + self.forms.mm(mhat)
        )

    def hess_quadratic(self, mhat) -> float:
        """The pairing <mhat, H mhat>; 2 solves."""
        return float(np.asarray(mhat) @ self.hess_apply(mhat))


def linearize(model, m, z) -> LinearizationPoint:
    """Solve state and adjoint at (m, z); 1 state + 1 linear solve."""
    return LinearizationPoint(model, m, z)


def dense_hessian(lp: LinearizationPoint) -> np.ndarray:
    """Column-by-column Hessian for small cross-checks; 2n solves."""
    n = lp.dim
    if n > 2000:
        raise ValueError("dense Hessian limited to n <= 2000")
    return np.column_stack([lp.hess_apply(e) for e in np.eye(n)])


def dense_precond_hessian(lp: LinearizationPoint, prior) -> np.ndarray:
    """Dense C H, the operator whose eigenvalues drive the Taylor terms."""
    h = dense_hessian(lp)
    return np.column_stack([prior.apply_c(h[:, j]) for j in range(lp.dim)])


def gradient_fd_table(model, m, z, direction, steps=None):
    """Central-difference check of the parameter gradient.

    Compares <gbar, direction> with (Q(m + h d) - Q(m - h d)) / 2h over
    a sweep of steps and returns rows (h, relative error). The minimum
    over rows is the figure of merit; a healthy gradient reaches the
    round-off floor near h ~ 1e-5.
    """
    if steps is None:
        steps = [10.0**-k for k in range(1, 8)]
    m = np.asarray(m, dtype=float)
    direction = np.asarray(direction, dtype=float)
    lp = linearize(model, m, z)
    exact = float(lp.gbar @ direction)
    rows = []
    for h in steps:
        qp = model.eval_q(model.state_operator(m + h * direction).solve_state(z))
        qm = model.eval_q(model.state_operator(m - h * direction).solve_state(z))
        fd = (qp - qm) / (2.0 * h)
        rows.append((h, abs(fd - exact) / max(abs(exact), 1e-300)))
    return rows


def hessian_fd_table(model, m, z, direction, steps=None):
    """Central-difference check of the Hessian action.

    Differences the exact gradient itself, so the only error is the
    step truncation: compares <H d, d> with
    <g(m + h d) - g(m - h d), d> / 2h.
    """
    if steps is None:
        steps = [10.0**-k for k in range(1, 7)]
    m = np.asarray(m, dtype=float)
    direction = np.asarray(direction, dtype=float)
    lp = linearize(model, m, z)
    exact = float(direction @ lp.hess_apply(direction))
    rows = []
    for h in steps:
        gp = linearize(model, m + h * direction, z).gbar
        gm = linearize(model, m - h * direction, z).gbar
        fd = float((gp - gm) @ direction) / (2.0 * h)
        rows.append((h, abs(fd - exact) / max(abs(exact), 1e-300)))
    return rows


def pairing_symmetry_error(lp: LinearizationPoint, d1, d2) -> float:
    """Relative asymmetry |<H d1, d2> - <H d2, d1>| / max(|.|, |.|)."""
    a = float(np.asarray(d2) @ lp.hess_apply(d1))
    b = float(np.asarray(d1) @ lp.hess_apply(d2))
    return abs(a - b) / max(abs(a), abs(b), 1e-300)
