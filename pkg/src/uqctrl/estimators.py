"""Moment estimators of the QoI under parameter uncertainty.

Five ways to estimate E[Q] and Var[Q] at a control:

* plain sample averages over a batch (``saa``),
* closed-form moments of the linear expansion (``taylor_lin_moments``),
* closed-form moments of the quadratic expansion with spectral trace
  sums (``taylor_quad_moments``),
* Monte Carlo corrections of either expansion, which estimate the
  Taylor remainder from samples so the expansion acts as a control
  variate (``mc_corrected_lin`` / ``mc_corrected_quad``).

Sample batches cache the factorized operator of every sample, so the
optimizer can later solve per-sample adjoints without refactorizing,
and cache the per-sample linear and quadratic deviations so mean and
variance corrections share Hessian actions.

MSE accounting follows one convention throughout: the MSE of a Monte
Carlo component is the population (1/M) variance of its integrand
divided by M. Variance integrands are squared deviations from the
nominal value Q(mbar), the fixed center the estimators expand around.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import eig, fem


@dataclass
class MomentReport:
    """Mean/variance estimate with its provenance.

    ``correction`` is the sampled remainder term (zero for pure Taylor
    estimates), ``trace_linear`` and ``trace_square`` the spectral
    sums that entered, and the solve counters are deltas measured by
    the caller when it owns the ledger.
    """

    method: str
    mean: float
    variance: float
    correction: float = 0.0
    trace_linear: float = 0.0
    trace_square: float = 0.0
    m_samples: int = 0
    n_eigs: int = 0
    state_solves: int = -1
    linear_solves: int = -1


@dataclass
class SampleBatch:
    """Frozen parameter samples with cached solves at one control.

    Mean and variance corrections share these samples (the shared
    flag records it); drawing is sequential from the stream so the
    batch is reproducible regardless of how many workers solved the
    states afterwards.
    """

    z: np.ndarray
    mbar: np.ndarray
    samples: np.ndarray
    states: np.ndarray
    q: np.ndarray
    operators: list = field(repr=False)
    shared: bool = True
    lin_dev: np.ndarray | None = None
    quad_dev: np.ndarray | None = None
    dev_owner: object = field(default=None, repr=False)

    @property
    def count(self) -> int:
        return self.samples.shape[0]

    def deviations(self) -> np.ndarray:
        return self.samples - self.mbar[None, :]


def batch_from_samples(model, mbar, z, samples, jobs: int = 1) -> SampleBatch:
    """Build a batch from given parameter samples; one state solve each.

    Factorized operators are kept on the batch. ``jobs`` > 1 solves
    states concurrently with results reduced in index order, so the
    batch does not depend on the worker count.
    """
    z = np.asarray(z, dtype=float)
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    count = samples.shape[0]
    operators: list = [None] * count
    states = np.empty_like(samples)

    def run(i: int) -> None:
        op = model.state_operator(samples[i])
        operators[i] = op
        states[i] = op.solve_state(z)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(run, range(count)))
    else:
        for i in range(count):
            run(i)
    qs = np.array([model.eval_q(states[i]) for i in range(count)])
    return SampleBatch(
        z=z, mbar=np.asarray(mbar, dtype=float).copy(), samples=samples,
        states=states, q=qs, operators=operators,
    )


def draw_sample_batch(model, prior, z, count: int, rng: fem.Rng, jobs: int = 1) -> SampleBatch:
    """Draw ``count`` prior samples and solve their states at ``z``.

    Sampling is sequential from the stream regardless of ``jobs``, so
    the batch is reproducible for any worker count.
    """
    samples = prior.sample(rng, count=count)
    return batch_from_samples(model, prior.mean, z, samples, jobs=jobs)


def _claim_caches(lp, batch: SampleBatch) -> None:
    """Invalidate deviation caches computed at a different linearization."""
    if batch.dev_owner is not lp:
        batch.lin_dev = None
        batch.quad_dev = None
        batch.dev_owner = lp


def linear_deviations(lp, batch: SampleBatch) -> np.ndarray:
    """Per-sample first-order deviations d_i = <m_i - mbar, gbar>, cached."""
    _claim_caches(lp, batch)
    if batch.lin_dev is None:
        batch.lin_dev = batch.deviations() @ lp.gbar
    return batch.lin_dev


def quadratic_deviations(lp, batch: SampleBatch, jobs: int = 1) -> np.ndarray:
    """Per-sample curvatures h_i = <p_i, H p_i>, cached; 2 solves each."""
    _claim_caches(lp, batch)
    if batch.quad_dev is None:
        p = batch.deviations()
        out = np.empty(batch.count)

        def run(i: int) -> None:
            out[i] = lp.hess_quadratic(p[i])

        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                list(pool.map(run, range(batch.count)))
        else:
            for i in range(batch.count):
                run(i)
        batch.quad_dev = out
    return batch.quad_dev


def eval_qlin(lp, m) -> float:
    """Pointwise linear expansion Q(mbar) + <m - mbar, gbar>."""
    return lp.qbar + float((np.asarray(m) - lp.m) @ lp.gbar)


def eval_qquad(lp, m) -> float:
    """Pointwise quadratic expansion; costs one Hessian action."""
    p = np.asarray(m) - lp.m
    return eval_qlin(lp, m) + 0.5 * float(p @ lp.hess_apply(p))


def saa(model, z, batch: SampleBatch) -> MomentReport:
    """Plain sample-average mean and population variance."""
    if batch.count < 2:
        raise ValueError("variance estimation needs at least two samples")
    mean = float(batch.q.mean())
    var = float((batch.q**2).mean() - mean**2)
    return MomentReport(
        method="saa", mean=mean, variance=var, m_samples=batch.count
    )


def taylor_lin_moments(lp, prior) -> tuple[float, float]:
    """Closed-form moments of the linear expansion: Q(mbar), <gbar, C gbar>."""
    return lp.qbar, prior.quadratic(lp.gbar)


def taylor_quad_moments(lp, prior, pairs: eig.EigPairs, n: int) -> tuple[float, float]:
    """Closed-form moments of the quadratic expansion via spectral sums.

    Mean adds half the trace, variance adds half the squared trace,
    both truncated at the first n retained eigenvalues.
    """
    if n > pairs.count:
        raise ValueError(f"requested {n} eigenvalues, solver retained {pairs.count}")
    t1, t2 = eig.spectral_traces(pairs.values, n)
    e0, v0 = taylor_lin_moments(lp, prior)
    return e0 + 0.5 * t1, v0 + 0.5 * t2


def mc_corrected_lin(lp, prior, batch: SampleBatch) -> MomentReport:
    """Linear expansion plus sampled remainder, mean and variance.

    The mean adds the average of Q_i - Q(mbar) - d_i; the variance
    starts from <gbar, C gbar>, adds the sampled difference of squared
    deviations, and subtracts the squared mean correction.
    """
    if batch.count < 2:
        raise ValueError("variance estimation needs at least two samples")
    d = linear_deviations(lp, batch)
    dq = batch.q - lp.qbar
    e1 = float(np.mean(dq - d))
    g2 = prior.quadratic(lp.gbar)
    var = g2 + float(np.mean(dq**2 - d**2)) - e1**2
    return MomentReport(
        method="lin-mc",
        mean=lp.qbar + e1,
        variance=var,
        correction=e1,
        m_samples=batch.count,
    )


def mc_corrected_quad(lp, prior, pairs: eig.EigPairs, n: int, batch: SampleBatch) -> MomentReport:
    """Quadratic expansion plus sampled remainder, mean and variance.

    The variance uses the derivation-consistent centered remainder
    (Q_i - Q(mbar))^2 - t_i^2 with t_i = d_i + h_i / 2; together with
    subtracting the squared total mean correction this cancels the
    quartic (trace/2)^2 term exactly when Q is exactly quadratic and
    the trace is fully resolved, independent of sample count and seed.
    """
    if batch.count < 2:
        raise ValueError("variance estimation needs at least two samples")
    if n > pairs.count:
        raise ValueError(f"requested {n} eigenvalues, solver retained {pairs.count}")
    t1, t2 = eig.spectral_traces(pairs.values, n)
    d = linear_deviations(lp, batch)
    h = quadratic_deviations(lp, batch)
    t = d + 0.5 * h
    dq = batch.q - lp.qbar
    e2 = float(np.mean(dq - t))
    g2 = prior.quadratic(lp.gbar)
    var = (
        g2
        + 0.25 * t1**2
        + 0.5 * t2
        + float(np.mean(dq**2 - t**2))
        - (0.5 * t1 + e2) ** 2
    )
    return MomentReport(
        method="quad-mc",
        mean=lp.qbar + 0.5 * t1 + e2,
        variance=var,
        correction=e2,
        trace_linear=t1,
        trace_square=t2,
        m_samples=batch.count,
        n_eigs=n,
    )


def _corr(a: np.ndarray, b: np.ndarray) -> float:
    sa = float(np.std(a))
    sb = float(np.std(b))
    if sa == 0.0 or sb == 0.0:
        return math.nan
    return float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))


def correlation_report(lp, batch: SampleBatch) -> dict:
    """Sample correlations between Q and its expansions.

    Returns correlations for the values themselves and for the
    variance integrands (squared deviations from the nominal value).
    Degenerate (zero-variance) pairs are reported as nan rather than
    raising.
    """
    d = linear_deviations(lp, batch)
    h = batch.quad_dev
    if h is None:
        h = quadratic_deviations(lp, batch)
    q_lin = lp.qbar + d
    q_quad = lp.qbar + d + 0.5 * h
    vq = (batch.q - lp.qbar) ** 2
    return {
        "corr_q_lin": _corr(batch.q, q_lin),
        "corr_q_quad": _corr(batch.q, q_quad),
        "corr_vq_lin": _corr(vq, (q_lin - lp.qbar) ** 2),
        "corr_vq_quad": _corr(vq, (q_quad - lp.qbar) ** 2),
    }


def population_variance(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.mean((x - x.mean()) ** 2))


def per_sample_table(lp, batch: SampleBatch) -> list[tuple]:
    """Rows (i, Q, Qlin, Qquad, q, qlin, qquad) for the integrand CSV.

    The lowercase columns are variance integrands: squared deviations
    of each value from the nominal Q(mbar).
    """
    d = linear_deviations(lp, batch)
    h = quadratic_deviations(lp, batch)
    q_lin = lp.qbar + d
    q_quad = q_lin + 0.5 * h
    rows = []
    for i in range(batch.count):
        rows.append(
            (
                i,
                batch.q[i],
                q_lin[i],
                q_quad[i],
                (batch.q[i] - lp.qbar) ** 2,
                (q_lin[i] - lp.qbar) ** 2,
                (q_quad[i] - lp.qbar) ** 2,
            )
        )
    return rows


def mse_summary(lp, batch: SampleBatch) -> dict:
    """MSE of the sampled component of each mean and variance estimator.

    Every entry is a population variance of an integrand divided by
    the sample count: the integrand is Q for the plain average and the
    remainder Q minus its expansion for the corrected estimators; the
    variance analogues replace values by squared deviations from the
    nominal Q(mbar).
    """
    m = batch.count
    d = linear_deviations(lp, batch)
    h = quadratic_deviations(lp, batch)
    q_lin = lp.qbar + d
    q_quad = q_lin + 0.5 * h
    vq = (batch.q - lp.qbar) ** 2
    vq_lin = (q_lin - lp.qbar) ** 2
    vq_quad = (q_quad - lp.qbar) ** 2
    return {
        "e_hat": float(batch.q.mean()),
        "mse_q": population_variance(batch.q) / m,
        "mse_q_lin": population_variance(batch.q - q_lin) / m,
        "mse_q_quad": population_variance(batch.q - q_quad) / m,
        "v_hat": float(np.mean(vq)),
        "mse_vq": population_variance(vq) / m,
        "mse_vq_lin": population_variance(vq - vq_lin) / m,
        "mse_vq_quad": population_variance(vq - vq_quad) / m,
    }
