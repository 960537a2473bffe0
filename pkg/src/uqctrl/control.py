"""Cost functionals, control gradients and the bound-constrained optimizer.

Each estimator from :mod:`uqctrl.estimators` induces a cost functional
J(z) = mean + beta * variance + penalty. The ``cost_grad_*`` drivers
evaluate J and its exact control gradient by adjoint calculus; their
solve budgets are fixed and tested:

========  ============  ==========================
method    state solves  linear solves
========  ============  ==========================
saa       M             M
lin       1             3
quad      1             3 + 6N + 4p
lin-mc    1 + M         3 + M
quad-mc   1 + M         3 + 6N + 4p + 5M
========  ============  ==========================

Randomness is frozen per run: the sample batch is drawn once and the
eigensolver re-uses one seed in every evaluation, so J is a smooth
deterministic function of z and quasi-Newton line searches are
well-posed.

The optimizer is a projected-gradient limited-memory BFGS with an
Armijo backtracking line search along the projected path, plain enough
to keep every accepted iterate non-increasing in J.
"""

from __future__ import annotations

import time
import warnings
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import eig, estimators, fem, hessian

SAMPLE_STREAM = 1
EIG_STREAM = 2

METHODS = ("saa", "lin", "quad", "lin-mc", "quad-mc")


@dataclass
class CostConfig:
    """Weights, bounds and budgets shared by all cost drivers."""

    beta: float = 1.0
    beta_p: float = 1e-5
    z_min: float = 0.0
    z_max: float = 32.0
    n_eigs: int = 10
    oversample: int = 10
    m_samples: int = 100
    tol: float = 1e-3
    max_iter: int = 100
    memory: int = 10
    seed: int = 0
    jobs: int = 1


def penalty(z, beta_p: float = 1e-5) -> float:
    z = np.asarray(z, dtype=float)
    return beta_p * float(z @ z)


def dz_penalty(z, beta_p: float = 1e-5) -> np.ndarray:
    return 2.0 * beta_p * np.asarray(z, dtype=float)


def _map_indexed(body, count: int, jobs: int) -> None:
    """Run body(i) for i < count, optionally on a thread pool."""
    if jobs > 1 and count > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(body, range(count)))
    else:
        for i in range(count):
            body(i)


def _sample_states(batch: estimators.SampleBatch, z, jobs: int = 1) -> np.ndarray:
    """Solve every sample state at the current control; M state solves.

    Factorizations cached on the batch are reused, so moving the
    control costs forward/backward substitutions only.
    """
    z = np.asarray(z, dtype=float)
    states = np.empty_like(batch.samples)

    def run(i: int) -> None:
        states[i] = batch.operators[i].solve_state(z)

    _map_indexed(run, batch.count, jobs)
    return states


def _sample_adjoints_into(model, batch, states, weights, grad, jobs: int = 1) -> None:
    """Accumulate per-sample adjoint contributions into the z-gradient.

    Solves A(m_i) v_i = -w_i dq_du(u_i) on the cached factorization and
    adds the control pairing of each v_i; M linear solves.
    """
    contrib = np.zeros((batch.count, grad.size))

    def run(i: int) -> None:
        v_i = batch.operators[i].solve_linear(-weights[i] * model.dq_du(states[i]))
        forms_i = model.forms(batch.samples[i], states[i], v_i)
        contrib[i] = forms_i.zv(v_i)

    _map_indexed(run, batch.count, jobs)
    grad += contrib.sum(axis=0)


def effective_truncation(pairs: eig.EigPairs, n: int, rel_tol: float = 1e-10) -> int:
    """Shrink the truncation if it would split a repeated eigenvalue.

    The spectral calculus differentiates cleanly only when the retained
    and discarded eigenvalues are separated; a cluster straddling the
    boundary is excluded entirely, with a warning.
    """
    if n > pairs.count:
        if pairs.breakdown:
            warnings.warn(
                f"operator rank below requested truncation: using {pairs.count} "
                f"of {n} eigenpairs",
                stacklevel=2,
            )
            n = pairs.count
        else:
            raise ValueError(
                f"requested {n} eigenpairs, solver retained {pairs.count}"
            )
    ritz = pairs.ritz_values
    if ritz.size == 0 or n <= 0:
        return max(n, 0)
    scale = abs(ritz[0])
    shrunk = n
    while 0 < shrunk < ritz.size and abs(ritz[shrunk - 1] - ritz[shrunk]) < rel_tol * scale:
        shrunk -= 1
    if shrunk != n:
        warnings.warn(
            f"truncation shrunk from {n} to {shrunk}: eigenvalue cluster at the boundary",
            stacklevel=2,
        )
    return shrunk


def cost_grad_saa(model, prior, z, batch: estimators.SampleBatch, cfg: CostConfig):
    """Sample-average cost and gradient; M state + M linear solves."""
    del prior
    z = np.asarray(z, dtype=float)
    beta = cfg.beta
    states = _sample_states(batch, z, cfg.jobs)
    qs = np.array([model.eval_q(u) for u in states])
    q_hat = float(qs.mean())
    v_hat = float((qs**2).mean()) - q_hat**2
    j = q_hat + beta * v_hat + penalty(z, cfg.beta_p)
    weights = (1.0 + 2.0 * beta * (qs - q_hat)) / batch.count
    grad = dz_penalty(z, cfg.beta_p)
    _sample_adjoints_into(model, batch, states, weights, grad, cfg.jobs)
    return j, grad


def cost_grad_lin(model, prior, z, cfg: CostConfig):
    """Linear-expansion cost and gradient; 1 state + 3 linear solves."""
    z = np.asarray(z, dtype=float)
    beta = cfg.beta
    lp = hessian.linearize(model, prior.mean, z)
    g2 = prior.quadratic(lp.gbar)
    j = lp.qbar + beta * g2 + penalty(z, cfg.beta_p)

    cg = prior.apply_c(lp.gbar)
    u_star = lp.op.solve_linear(-2.0 * beta * lp.forms.vm(cg))
    rhs_v = (
        model.dq_du(lp.u)
        + 2.0 * beta * lp.forms.um(cg)
        + model.d2q_du(u_star)
    )
    v_star = lp.op.solve_linear(-rhs_v)
    grad = dz_penalty(z, cfg.beta_p) + lp.forms.zv(v_star)
    return j, grad


def _spectral_gradient_terms(lp, pairs, theta, n, jobs: int = 1):
    """Third-order form contributions of the retained eigenpairs.

    Re-solves the incremental pair for each retained eigenvector (2N
    linear solves) and returns the two right-hand-side accumulators for
    the starred state and adjoint equations. The starred eigenvector
    multipliers enter only through the scalar factors in ``theta``;
    they are never obtained by solves.
    """
    rhs_u = np.zeros_like(lp.u)
    rhs_v = np.zeros_like(lp.u)
    parts_u = np.zeros((n, lp.u.size))
    parts_v = np.zeros((n, lp.u.size))

    def run(j: int) -> None:
        psi = pairs.vectors[:, j]
        u_j, v_j = lp.incremental_pair(psi)
        parts_u[j] = theta[j] * (
            2.0 * lp.forms.vum(psi, u_j) + lp.forms.vmm(psi, psi)
        )
        parts_v[j] = theta[j] * (
            2.0 * lp.forms.umv(psi, v_j) + lp.forms.uum(psi, psi)
        )

    _map_indexed(run, n, jobs)
    rhs_u += parts_u.sum(axis=0)
    rhs_v += parts_v.sum(axis=0)
    return rhs_u, rhs_v


def cost_grad_quad(model, prior, z, cfg: CostConfig):
    """Quadratic-expansion cost and gradient; 1 state, 3+6N+4p linear."""
    z = np.asarray(z, dtype=float)
    beta = cfg.beta
    lp = hessian.linearize(model, prior.mean, z)
    pairs = eig.hessian_eigenpairs(
        lp, prior, k=cfg.n_eigs, p=cfg.oversample, rng=fem.Rng(cfg.seed, EIG_STREAM)
    )
    n = effective_truncation(pairs, cfg.n_eigs)
    t1, t2 = eig.spectral_traces(pairs.values, n)
    g2 = prior.quadratic(lp.gbar)
    j = lp.qbar + 0.5 * t1 + beta * (g2 + 0.5 * t2) + penalty(z, cfg.beta_p)

    theta = (1.0 + 2.0 * beta * pairs.values[:n]) / 2.0
    rhs_u_spec, rhs_v_spec = _spectral_gradient_terms(lp, pairs, theta, n, cfg.jobs)
    cg = prior.apply_c(lp.gbar)
    u_star = lp.op.solve_linear(-(2.0 * beta * lp.forms.vm(cg) + rhs_u_spec))
    rhs_v = (
        model.dq_du(lp.u)
        + 2.0 * beta * lp.forms.um(cg)
        + model.d2q_du(u_star)
        + rhs_v_spec
    )
    v_star = lp.op.solve_linear(-rhs_v)
    grad = dz_penalty(z, cfg.beta_p) + lp.forms.zv(v_star)
    return j, grad


def cost_grad_lin_mc(model, prior, z, batch: estimators.SampleBatch, cfg: CostConfig):
    """MC-corrected linear cost and gradient; 1+M state, 3+M linear."""
    z = np.asarray(z, dtype=float)
    beta = cfg.beta
    count = batch.count
    lp = hessian.linearize(model, prior.mean, z)
    states = _sample_states(batch, z, cfg.jobs)
    qs = np.array([model.eval_q(u) for u in states])
    p_dev = batch.deviations()
    d = p_dev @ lp.gbar
    dq = qs - lp.qbar
    e1 = float(np.mean(dq - d))
    g2 = prior.quadratic(lp.gbar)
    j = (
        lp.qbar
        + e1
        + beta * (g2 + float(np.mean(dq**2 - d**2)) - e1**2)
        + penalty(z, cfg.beta_p)
    )

    weights = (1.0 + 2.0 * beta * (dq - e1)) / count
    s = -(1.0 + 2.0 * beta * (d - e1)) / count
    rho = -2.0 * beta * float(d.mean())
    w_g = 2.0 * beta * prior.apply_c(lp.gbar) + p_dev.T @ s
    u_star = lp.op.solve_linear(-lp.forms.vm(w_g))
    rhs_v = (
        rho * model.dq_du(lp.u)
        + lp.forms.um(w_g)
        + model.d2q_du(u_star)
    )
    v_star = lp.op.solve_linear(-rhs_v)
    grad = dz_penalty(z, cfg.beta_p) + lp.forms.zv(v_star)
    _sample_adjoints_into(model, batch, states, weights, grad, cfg.jobs)
    return j, grad


def cost_grad_quad_mc(model, prior, z, batch: estimators.SampleBatch, cfg: CostConfig):
    """MC-corrected quadratic cost and gradient.

    1+M state solves and 3+6N+4p+5M linear solves: the per-sample
    incremental multipliers are solved (2M), not scaled, while the
    eigenvector multipliers enter as scalar factors only.
    """
    z = np.asarray(z, dtype=float)
    beta = cfg.beta
    count = batch.count
    lp = hessian.linearize(model, prior.mean, z)
    pairs = eig.hessian_eigenpairs(
        lp, prior, k=cfg.n_eigs, p=cfg.oversample, rng=fem.Rng(cfg.seed, EIG_STREAM)
    )
    n = effective_truncation(pairs, cfg.n_eigs)
    t1, t2 = eig.spectral_traces(pairs.values, n)
    g2 = prior.quadratic(lp.gbar)

    states = _sample_states(batch, z, cfg.jobs)
    qs = np.array([model.eval_q(u) for u in states])
    p_dev = batch.deviations()
    d = estimators.linear_deviations(lp, batch)
    h = estimators.quadratic_deviations(lp, batch, jobs=cfg.jobs)
    t = d + 0.5 * h
    dq = qs - lp.qbar
    e2 = float(np.mean(dq - t))
    mean_total = 0.5 * t1 + e2
    j = (
        lp.qbar
        + mean_total
        + beta
        * (
            g2
            + 0.25 * t1**2
            + 0.5 * t2
            + float(np.mean(dq**2 - t**2))
            - mean_total**2
        )
        + penalty(z, cfg.beta_p)
    )

    weights = (1.0 + 2.0 * beta * (dq - mean_total)) / count
    s = -(1.0 + 2.0 * beta * (t - mean_total)) / count
    rho = 2.0 * beta * (0.5 * t1 - float(t.mean()))
    theta = (1.0 + 2.0 * beta * pairs.values[:n]) / 2.0 - beta * e2
    w_g = 2.0 * beta * prior.apply_c(lp.gbar) + p_dev.T @ s

    rhs_u_spec, rhs_v_spec = _spectral_gradient_terms(lp, pairs, theta, n, cfg.jobs)
    rhs_u_samp = np.zeros((count, lp.u.size))
    rhs_v_samp = np.zeros((count, lp.u.size))

    def run(i: int) -> None:
        p_i = p_dev[i]
        u_star_i = lp.op.solve_linear(-(0.5 * s[i]) * lp.forms.vm(p_i))
        v_star_i = lp.op.solve_linear(
            -((0.5 * s[i]) * lp.forms.um(p_i) + model.d2q_du(u_star_i))
        )
        rhs_u_samp[i] = (
            2.0 * lp.forms.vum(p_i, u_star_i)
            + (0.5 * s[i]) * lp.forms.vmm(p_i, p_i)
        )
        rhs_v_samp[i] = (
            2.0 * lp.forms.umv(p_i, v_star_i)
            + (0.5 * s[i]) * lp.forms.uum(p_i, p_i)
        )

    _map_indexed(run, count, cfg.jobs)
    rhs_u = lp.forms.vm(w_g) + rhs_u_spec + rhs_u_samp.sum(axis=0)
    u_star = lp.op.solve_linear(-rhs_u)
    rhs_v = (
        rho * model.dq_du(lp.u)
        + lp.forms.um(w_g)
        + model.d2q_du(u_star)
        + rhs_v_spec
        + rhs_v_samp.sum(axis=0)
    )
    v_star = lp.op.solve_linear(-rhs_v)
    grad = dz_penalty(z, cfg.beta_p) + lp.forms.zv(v_star)
    _sample_adjoints_into(model, batch, states, weights, grad, cfg.jobs)
    return j, grad


def make_costgrad(model, prior, method: str, cfg: CostConfig, batch=None):
    """Bind a cost driver to its frozen randomness; returns z -> (J, grad)."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}, expected one of {METHODS}")
    if method == "lin":
        return lambda z: cost_grad_lin(model, prior, z, cfg)
    if method == "quad":
        return lambda z: cost_grad_quad(model, prior, z, cfg)
    if batch is None:
        raise ValueError(f"method {method!r} needs a sample batch")
    if method == "saa":
        return lambda z: cost_grad_saa(model, prior, z, batch, cfg)
    if method == "lin-mc":
        return lambda z: cost_grad_lin_mc(model, prior, z, batch, cfg)
    return lambda z: cost_grad_quad_mc(model, prior, z, batch, cfg)


@dataclass
class OptTrace:
    """Accepted iterates of one optimizer run.

    Rows are (iter, J, projected-gradient norm, cumulative state
    solves, cumulative linear solves, seconds since start); counts are
    deltas against the ledger at entry.
    """

    rows: list = field(default_factory=list)
    z: np.ndarray | None = None
    j: float = float("inf")
    converged: bool = False
    reason: str = ""

    @property
    def iterations(self) -> int:
        return len(self.rows) - 1 if self.rows else 0


def _two_loop(g, s_list, y_list):
    """Standard L-BFGS two-loop recursion for -H g."""
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_list), reversed(y_list)):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    if s_list:
        s, y = s_list[-1], y_list[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y), a in zip(zip(s_list, y_list), reversed(alphas)):
        rho = 1.0 / float(y @ s)
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


def lbfgs_b(
    costgrad,
    z0,
    lower,
    upper,
    tol: float = 1e-3,
    max_iter: int = 100,
    memory: int = 10,
    ledger=None,
    max_halvings: int = 30,
) -> OptTrace:
    """Projected-gradient limited-memory BFGS on a box.

    The quasi-Newton direction is built on the free variables only (a
    variable is bound when it sits on its bound and the gradient pushes
    outward), steps follow the projected path z(a) = P(z + a d) under
    an Armijo test with c1 = 1e-4 and halving, and the run stops when
    the projected gradient falls below ``tol`` in the max norm.
    """
    z = np.asarray(z0, dtype=float).copy()
    lo = np.broadcast_to(np.asarray(lower, dtype=float), z.shape)
    hi = np.broadcast_to(np.asarray(upper, dtype=float), z.shape)
    if np.any(lo > hi):
        raise ValueError("lower bound exceeds upper bound")
    z = np.clip(z, lo, hi)
    start = time.perf_counter()
    base = ledger.snapshot() if ledger is not None else (0, 0)

    def counts() -> tuple[int, int]:
        if ledger is None:
            return 0, 0
        now = ledger.snapshot()
        return now[0] - base[0], now[1] - base[1]

    trace = OptTrace()
    j, g = costgrad(z)
    s_list: deque = deque(maxlen=memory)
    y_list: deque = deque(maxlen=memory)

    def record(it: int, j_val: float, pg: float) -> None:
        st, li = counts()
        trace.rows.append((it, j_val, pg, st, li, time.perf_counter() - start))

    for it in range(max_iter + 1):
        pg = z - np.clip(z - g, lo, hi)
        pg_norm = float(np.max(np.abs(pg))) if pg.size else 0.0
        record(it, j, pg_norm)
        if pg_norm < tol:
            trace.converged = True
            trace.reason = "converged"
            break
        if it == max_iter:
            trace.reason = "max_iterations"
            break

        bound_low = (z <= lo) & (g > 0.0)
        bound_high = (z >= hi) & (g < 0.0)
        free = ~(bound_low | bound_high)
        g_free = np.where(free, g, 0.0)
        d = _two_loop(g_free, list(s_list), list(y_list))
        d = np.where(free, d, 0.0)
        if float(g_free @ d) >= 0.0:
            s_list.clear()
            y_list.clear()
            d = -g_free

        alpha = 1.0
        accepted = False
        for _ in range(max_halvings + 1):
            z_new = np.clip(z + alpha * d, lo, hi)
            step = z_new - z
            if np.any(step):
                j_new, g_new = costgrad(z_new)
                if j_new <= j + 1e-4 * float(g @ step):
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            trace.reason = "line_search_failure"
            break

        s = z_new - z
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-10 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            s_list.append(s)
            y_list.append(y)
        z, j, g = z_new, j_new, g_new

    trace.z = z
    trace.j = j
    return trace


def run_chain(model, prior, method: str, z0, cfg: CostConfig, batch=None):
    """Optimize with multifidelity warm starts; returns [(stage, trace)].

    Monte Carlo corrected methods start from the optimum of cheaper
    stages: lin before lin-mc, and lin then quad before quad-mc. The
    sample batch is drawn once per run so every stage sees the same
    frozen randomness; callers may pass one in to pin the samples
    themselves (the states it carries are re-solved per iterate, so
    where it was drawn does not matter).
    """
    stages = {
        "saa": ["saa"],
        "lin": ["lin"],
        "quad": ["quad"],
        "lin-mc": ["lin", "lin-mc"],
        "quad-mc": ["lin", "quad", "quad-mc"],
    }.get(method)
    if stages is None:
        raise ValueError(f"unknown method {method!r}, expected one of {METHODS}")
    z = np.clip(np.asarray(z0, dtype=float), cfg.z_min, cfg.z_max)
    out = []
    for stage in stages:
        if stage in ("saa", "lin-mc", "quad-mc") and batch is None:
            batch = estimators.draw_sample_batch(
                model, prior, z, cfg.m_samples,
                fem.Rng(cfg.seed, SAMPLE_STREAM), jobs=cfg.jobs,
            )
        costgrad = make_costgrad(model, prior, stage, cfg, batch=batch)
        trace = lbfgs_b(
            costgrad, z, cfg.z_min, cfg.z_max,
            tol=cfg.tol, max_iter=cfg.max_iter, memory=cfg.memory,
            ledger=model.ledger,
        )
        out.append((stage, trace))
        z = trace.z
    return out
