"""Augmented Lagrangian fitting of exact bi-factor and hierarchical structures."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from .model import ConstraintSet, FactorParams, SampleCov
from .objective import AugLagCoefficients, PackedObjective, constraint_residuals, discrepancy

logger = logging.getLogger(__name__)

THREADS_ENV = "BIFACTOR_ALM_THREADS"


class LineSearchFailed(RuntimeError):
    pass


class AllStartsFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class AlmConfig:
    c0: float = 1.0
    c_theta: float = 0.25
    c_sigma: float = 10.0
    delta1: float = 1e-2
    delta2: float = 1e-2
    T_max: int = 1000
    inner_max_iters: int = 500
    inner_grad_tol: float = 1e-6
    inner_ftol: float = 1e-12
    n_starts: int = 50
    seed: int = 0
    max_restarts: int = 3
    # an attempt is abandoned once the penalty would pass this value
    c_max: float = 1e12
    refine: bool = True
    n_jobs: int | None = None

    def __post_init__(self):
        if self.c0 <= 0:
            raise ValueError("c0 must be positive")
        if not 0 < self.c_theta < 1:
            raise ValueError("c_theta must lie in (0, 1)")
        if self.c_sigma <= 1:
            raise ValueError("c_sigma must exceed 1")
        if self.delta1 <= 0 or self.delta2 <= 0:
            raise ValueError("tolerances must be positive")
        if self.n_starts < 1:
            raise ValueError("n_starts must be at least 1")


@dataclass
class OuterStep:
    """One outer iteration: the coefficients used, the residuals obtained and
    the coefficients handed to the next iteration. ``attempt`` counts warm
    restarts, each of which resets the multipliers and the penalty."""

    c: float
    beta: np.ndarray
    residuals: np.ndarray
    beta_next: np.ndarray
    c_next: float
    param_change: float
    structure_gap: float
    objective: float
    attempt: int = 0


@dataclass
class FitResult:
    params: FactorParams
    phi: np.ndarray
    loss: float
    structure: np.ndarray | None
    membership: np.ndarray
    converged: bool
    outer_iters: int
    restarts_used: int
    max_second_largest: float
    param_change: float = np.inf
    inner_evals: int = 0
    bic: float | None = None
    history: list[OuterStep] = field(default_factory=list, repr=False)


def n_threads() -> int:
    value = os.environ.get(THREADS_ENV)
    if value:
        return max(1, int(value))
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# inner solver


def inner_minimize(fun, x0: np.ndarray, config: AlmConfig) -> np.ndarray:
    """Minimise ``fun`` (returning value and gradient) with L-BFGS-B.

    The returned point never has a larger objective than ``x0``. Box bounds
    are taken from ``fun.bounds`` when present.
    """
    x0 = np.asarray(x0, dtype=float)
    bounds = getattr(fun, "bounds", None)
    if bounds is not None:
        x0 = fun.clip(x0)
    f0, g0 = fun(x0)
    if not np.isfinite(f0):
        raise LineSearchFailed("objective is not finite at the starting point")
    if x0.size == 0 or np.max(np.abs(g0)) <= config.inner_grad_tol:
        return x0.copy()
    res = minimize(
        fun,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={
            "maxiter": config.inner_max_iters,
            "gtol": config.inner_grad_tol,
            "ftol": config.inner_ftol,
            "maxcor": 10,
        },
    )
    if not np.isfinite(res.fun) or not np.all(np.isfinite(res.x)):
        raise LineSearchFailed(str(res.message))
    if res.fun > f0:
        return x0.copy()
    return res.x


# ---------------------------------------------------------------------------
# structure


def structure_gap(Lambda: np.ndarray, max_active: int = 1) -> float:
    """Largest over rows of the ``(max_active+1)``-th largest absolute group loading.

    With ``max_active=1`` this is the second-largest value used for bi-factor
    models; hierarchies with two layers below the root use the third-largest.
    """
    groups = np.abs(np.asarray(Lambda)[:, 1:])
    if groups.shape[1] <= max_active:
        return 0.0
    ordered = -np.sort(-groups, axis=1)
    return float(ordered[:, max_active].max()) if ordered.size else 0.0


def membership(Lambda: np.ndarray, delta2: float) -> np.ndarray:
    """Boolean ``J x G`` matrix: item ``j`` belongs to group ``g`` when
    ``|Lambda[j, g]| > delta2`` (group ``g`` is column ``g`` of the result,
    column ``g+1`` of ``Lambda``)."""
    return np.abs(np.asarray(Lambda)[:, 1:]) > delta2


def extract_structure(Lambda: np.ndarray, delta2: float) -> np.ndarray:
    """Per-item group assignment.

    ``g`` in ``1..G`` when exactly one group loading exceeds ``delta2``,
    ``0`` when none does and ``-1`` when several do (not an exact bi-factor
    pattern).
    """
    member = membership(Lambda, delta2)
    count = member.sum(axis=1)
    assignment = np.where(count == 1, np.argmax(member, axis=1) + 1, 0)
    assignment[count > 1] = -1
    return assignment


def _param_change(a: FactorParams, b: FactorParams, n_params: int) -> float:
    sq = np.sum((a.Lambda - b.Lambda) ** 2) + np.sum((a.psi - b.psi) ** 2)
    if a.gamma is not None:
        sq += np.sum((a.gamma - b.gamma) ** 2)
    return float(np.sqrt(sq) / np.sqrt(n_params))


# ---------------------------------------------------------------------------
# initial values


def random_init(data: SampleCov, constraints: ConstraintSet, rng: np.random.Generator) -> FactorParams:
    """Standard-normal loadings, zero correlation parameters, half of diag(S)."""
    J, K = data.J, constraints.n_factors
    Lambda = rng.standard_normal((J, K))
    gamma = np.zeros(constraints.n_groups * (constraints.n_groups - 1) // 2) if constraints.oblique else None
    psi = 0.5 * np.diag(data.S)
    return FactorParams(Lambda, gamma, psi)


def start_rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


# ---------------------------------------------------------------------------
# fitting


def confirmatory_fit(
    data: SampleCov,
    free: np.ndarray,
    init: FactorParams,
    config: AlmConfig,
    oblique: bool = True,
) -> tuple[FactorParams, float]:
    """Minimise the discrepancy with loadings outside ``free`` fixed at zero."""
    K = free.shape[1]
    empty = ConstraintSet((), n_factors=K, oblique=oblique)
    obj = PackedObjective(data, empty, free=free, oblique=oblique)
    start = init.copy()
    start.Lambda = np.where(free, start.Lambda, 0.0)
    if not oblique:
        start.gamma = None
    x = inner_minimize(obj, obj.pack(start), replace(config, inner_max_iters=max(config.inner_max_iters, 2000)))
    params = obj.unpack(x)
    return params, discrepancy(params, data)


def _run_attempt(data, constraints, config, params, record, history, attempt=0):
    J = data.J
    obj = PackedObjective(data, constraints)
    n_params = params.Lambda.size + params.psi.size + (0 if params.gamma is None else params.gamma.size)
    coeffs = AugLagCoefficients.zeros(J, constraints, config.c0)
    R_prev = constraint_residuals(params.Lambda, constraints)
    change, gap = np.inf, structure_gap(params.Lambda, constraints.max_active)
    for t in range(1, config.T_max + 1):
        obj.coeffs = coeffs
        x = inner_minimize(obj, obj.pack(params), config)
        new = obj.unpack(x)
        R = constraint_residuals(new.Lambda, constraints)
        beta_next = coeffs.beta + coeffs.c * R
        if np.linalg.norm(R) > config.c_theta * np.linalg.norm(R_prev):
            c_next = config.c_sigma * coeffs.c
        else:
            c_next = coeffs.c
        change = _param_change(new, params, n_params)
        gap = structure_gap(new.Lambda, constraints.max_active)
        if record:
            history.append(
                OuterStep(coeffs.c, coeffs.beta.copy(), R, beta_next, c_next, change, gap, float(obj(x)[0]), attempt)
            )
        params, R_prev = new, R
        if change < config.delta1 and gap < config.delta2:
            return params, True, t, change, gap, obj.n_evals
        if c_next > config.c_max:
            return params, False, t, change, gap, obj.n_evals
        coeffs = AugLagCoefficients(beta_next, c_next)
    return params, False, config.T_max, change, gap, obj.n_evals


def alm_fit(
    data: SampleCov,
    constraints: ConstraintSet,
    config: AlmConfig,
    init: FactorParams,
    record_history: bool = False,
) -> FitResult:
    """Run the augmented Lagrangian method from ``init``.

    An attempt that does not meet both stopping rules within ``T_max`` outer
    iterations is restarted from its last iterate with fresh multipliers, up
    to ``max_restarts`` times. Failure is reported via ``converged=False``.
    """
    if init.Lambda.shape != (data.J, constraints.n_factors):
        raise ValueError(
            f"init Lambda has shape {init.Lambda.shape}, expected {(data.J, constraints.n_factors)}"
        )
    params = init.copy()
    if not constraints.oblique:
        params.gamma = None
    history: list[OuterStep] = []
    total_iters, evals, restarts = 0, 0, 0
    converged = False
    change = gap = np.inf
    for attempt in range(config.max_restarts + 1):
        restarts = attempt
        try:
            params, converged, iters, change, gap, n_ev = _run_attempt(
                data, constraints, config, params, record_history, history, attempt
            )
        except LineSearchFailed as exc:
            logger.debug("inner solver failed: %s", exc)
            converged = False
            break
        total_iters += iters
        evals += n_ev
        if converged:
            break

    member = membership(params.Lambda, config.delta2)
    if converged and constraints.max_active == 1 and np.any(member.sum(axis=1) > 1):
        converged = False

    if converged and config.refine:
        free = np.column_stack([np.ones(data.J, bool), member])
        # the reported fit is the exact-structure optimum: entries below
        # delta2 are set to zero, not left as small residual loadings
        refined, loss = confirmatory_fit(data, free, params, config, oblique=constraints.oblique)
        if np.isfinite(loss):
            params = refined
            member = membership(params.Lambda, config.delta2)
    loss = discrepancy(params, data)
    structure = None
    bic = None
    if constraints.max_active == 1:
        from .selection import bic_bifactor

        structure = extract_structure(params.Lambda, config.delta2)
        bic = bic_bifactor(loss, constraints.n_groups, data.N)
    return FitResult(
        params=params,
        phi=params.phi,
        loss=loss,
        structure=structure,
        membership=member,
        converged=converged,
        outer_iters=total_iters,
        restarts_used=restarts,
        max_second_largest=gap,
        param_change=change,
        inner_evals=evals,
        bic=bic,
        history=history,
    )


def _fit_one(args):
    data, constraints, config, seed_seq = args
    rng = np.random.default_rng(seed_seq)
    init = random_init(data, constraints, rng)
    return alm_fit(data, constraints, config, init)


def best_of(results: list[FitResult]) -> FitResult:
    """Converged result with the smallest discrepancy; ties keep the earliest."""
    best = None
    for res in results:
        if res.converged and (best is None or res.loss < best.loss):
            best = res
    if best is None:
        raise AllStartsFailed(f"none of {len(results)} starts converged")
    return best


def multi_start_fit(
    data: SampleCov,
    constraints: ConstraintSet,
    config: AlmConfig,
    return_all: bool = False,
):
    """Fit from ``config.n_starts`` seeded random starts and keep the best.

    Starts may run in worker processes (``config.n_jobs`` or the
    ``BIFACTOR_ALM_THREADS`` environment variable); the reduction is ordered by
    start index so the result does not depend on scheduling.
    """
    seqs = np.random.SeedSequence(config.seed).spawn(config.n_starts)
    tasks = [(data, constraints, config, s) for s in seqs]
    jobs = config.n_jobs if config.n_jobs is not None else n_threads()
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            results = list(pool.map(_fit_one, tasks))
    else:
        results = [_fit_one(t) for t in tasks]
    best = best_of(results)
    return (best, results) if return_all else best
