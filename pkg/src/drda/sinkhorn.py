"""Entropic optimal transport between a batch of points and a set of anchors."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError, DegenerateError
from .numerics import Tensor, as_tensor, constant

log = logging.getLogger(__name__)


def logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    # scipy.special.logsumexp carries ~100x the overhead at these sizes
    m = a.max(axis=axis, keepdims=True)
    out = np.log(np.exp(a - m).sum(axis=axis, keepdims=True)) + m
    return out.squeeze(axis)


@dataclass(frozen=True)
class TransportPlan:
    coupling: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    epsilon: float
    iterations_used: int
    converged: bool
    residual: float
    col_potential: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.coupling.shape


def marginal_residual(coupling: np.ndarray, mu: np.ndarray, nu: np.ndarray) -> float:
    return float(np.abs(coupling.sum(axis=1) - mu).sum() + np.abs(coupling.sum(axis=0) - nu).sum())


def sinkhorn_plan(
    cost,
    mu,
    nu,
    epsilon: float,
    max_iter: int = 1000,
    tol: float = 1e-6,
    check_every: int = 10,
    init_col_potential: np.ndarray | None = None,
    eps_scaling: float | None = None,
) -> TransportPlan:
    """Solve min <pi, C> + eps * KL(pi || mu x nu) over couplings of (mu, nu).

    Iterates on the dual potentials in log space, so epsilon far below the
    cost scale does not underflow.  When ``max_iter`` is hit the plan is still
    returned, with ``converged=False``.  ``init_col_potential`` (in cost units,
    one entry per atom of ``nu``) warm-starts the iteration.

    ``eps_scaling`` in (0, 1) anneals epsilon down from the cost range by that
    factor per stage, warm-starting each stage from the last.  Tied or
    degenerate costs at tiny epsilon converge only sublinearly without it.
    """
    if eps_scaling is not None:
        return _annealed(cost, mu, nu, epsilon, max_iter, tol, check_every, init_col_potential, eps_scaling)
    C = np.asarray(cost, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    if C.ndim != 2 or C.shape != (mu.size, nu.size):
        raise ContractError(f"cost shape {C.shape} does not match marginals ({mu.size}, {nu.size})")
    if not np.all(np.isfinite(C)):
        raise ContractError("cost matrix has non-finite entries")
    if np.any(mu < 0) or np.any(nu < 0):
        raise ContractError("marginals must be nonnegative")
    mass = mu.sum()
    if mass <= 0 or abs(mass - nu.sum()) > 1e-9:
        raise ContractError(f"marginal masses differ: {mass!r} vs {nu.sum()!r}")
    if not epsilon > 0:
        raise ContractError("epsilon must be positive")

    # zero-mass atoms carry no coupling; solve on the support only
    rows = mu > 0
    cols = nu > 0
    K = -C[np.ix_(rows, cols)] / epsilon
    log_mu = np.log(mu[rows])
    log_nu = np.log(nu[cols])
    mu_s = mu[rows]
    nu_s = nu[cols]
    # u, v are the dual potentials divided by epsilon
    v = np.zeros(K.shape[1])
    if init_col_potential is not None and init_col_potential.shape == nu.shape:
        v = np.asarray(init_col_potential, dtype=np.float64)[cols] / epsilon
    u = log_mu - logsumexp(K + v, axis=1)
    v = log_nu - logsumexp(K + u[:, None], axis=0)
    it = 1
    converged = False
    # Inner iterations rescale the stabilized kernel exp(K + u + v) by vectors
    # a, b that are folded back into (u, v) every `check_every` steps, so the
    # kernel entries stay O(1) while the potentials carry the dynamic range.
    while it < max_iter and not converged:
        Kt = np.exp(K + u[:, None] + v)
        KtT = Kt.T.copy()
        b = np.ones(K.shape[1])
        steps = min(check_every, max_iter - it)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            for _ in range(steps):
                a = mu_s / (Kt @ b)
                b = nu_s / (KtT @ a)
            la, lb = np.log(a), np.log(b)
        it += steps
        if np.isfinite(la).all() and np.isfinite(lb).all():
            u = u + la
            v = v + lb
        else:
            u = log_mu - logsumexp(K + v, axis=1)
            v = log_nu - logsumexp(K + u[:, None], axis=0)
        # columns are exact after the v-update; the row residual is what remains
        rows_mass = np.exp(logsumexp(K + u[:, None] + v, axis=1))
        converged = np.abs(rows_mass - mu_s).sum() < tol
    pi = np.zeros_like(C)
    pi[np.ix_(rows, cols)] = np.exp(K + u[:, None] + v)
    residual = marginal_residual(pi, mu, nu)
    converged = converged or residual < tol
    if not converged:
        log.debug("sinkhorn stopped at max_iter=%d with residual %.3e", max_iter, residual)
    col_potential = np.zeros(nu.size)
    col_potential[cols] = v * epsilon
    return TransportPlan(pi, mu, nu, float(epsilon), it, converged, residual, col_potential)


def _annealed(cost, mu, nu, epsilon, max_iter, tol, check_every, init, factor) -> TransportPlan:
    if not 0 < factor < 1:
        raise ContractError("eps_scaling must lie in (0, 1)")
    C = np.asarray(cost, dtype=np.float64)
    span = float(C.max() - C.min()) if C.size and np.all(np.isfinite(C)) else 0.0
    stage, used = span, 0
    while stage * factor > epsilon and used < max_iter:
        stage *= factor
        plan = sinkhorn_plan(C, mu, nu, stage, max_iter=min(200, max_iter - used), tol=tol,
                             check_every=check_every, init_col_potential=init)
        init, used = plan.col_potential, used + plan.iterations_used
    plan = sinkhorn_plan(C, mu, nu, epsilon, max_iter=max(max_iter - used, 1), tol=tol,
                         check_every=check_every, init_col_potential=init)
    return replace(plan, iterations_used=plan.iterations_used + used)


def kl_to_product(plan: TransportPlan) -> float:
    """KL(pi || mu x nu) for probability-or-equal-mass measures."""
    pi = plan.coupling
    ref = np.outer(plan.row_marginal, plan.col_marginal) / plan.row_marginal.sum()
    pos = pi > 0
    return float(np.sum(pi[pos] * np.log(pi[pos] / ref[pos])) - pi.sum() + ref.sum())


def entropic_cost(plan: TransportPlan, cost):
    """<pi, C> + eps * KL(pi || mu x nu) with the plan held constant.

    With an ndarray cost a float is returned; with a Tensor cost the result is
    a scalar Tensor whose gradient w.r.t. the cost is exactly ``pi``.
    """
    tensor_in = isinstance(cost, Tensor)
    C = as_tensor(cost)
    if C.shape != plan.coupling.shape:
        raise ContractError(f"cost shape {C.shape} != plan shape {plan.coupling.shape}")
    value = (C * constant(plan.coupling)).sum()
    if plan.epsilon > 0:
        value = value + plan.epsilon * kl_to_product(plan)
    return value if tensor_in else value.item()


def transport_cost(plan: TransportPlan, cost) -> float:
    return float(np.sum(plan.coupling * np.asarray(cost, dtype=np.float64)))


def soft_assignments(plan: TransportPlan) -> np.ndarray:
    pi = plan.coupling
    rows = pi.sum(axis=1, keepdims=True)
    if np.any(rows <= 0):
        bad = int(np.flatnonzero(rows.ravel() <= 0)[0])
        raise DegenerateError(f"transport plan row {bad} has zero mass")
    return pi / rows


def entropy(pi: np.ndarray) -> float:
    pos = pi > 0
    return float(-np.sum(pi[pos] * np.log(pi[pos])))
