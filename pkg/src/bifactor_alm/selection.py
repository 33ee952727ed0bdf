"""Choosing the number of group factors by BIC, and the exploratory baseline."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .alm import AllStartsFailed, AlmConfig, LineSearchFailed, inner_minimize, multi_start_fit
from .model import ConstraintSet, FactorParams, SampleCov, bifactor_constraint_pairs
from .objective import PackedObjective, discrepancy

logger = logging.getLogger(__name__)


def bic_bifactor(loss: float, G: int, N: int) -> float:
    """``loss + (G - 1) G log(N) / 2``.

    Only the correlation parameters enter the penalty; the loading and
    uniqueness counts are the same for every exact bi-factor structure.
    """
    if N < 2:
        raise ValueError("N must be at least 2")
    if G < 1:
        raise ValueError("G must be at least 1")
    return float(loss + (G - 1) * G * math.log(N) / 2.0)


def bic_efa(loss: float, K: int, J: int, N: int) -> float:
    """``loss + (J K - K (K - 1) / 2) log(N)`` for a ``K``-factor exploratory fit."""
    if N < 2:
        raise ValueError("N must be at least 2")
    if K < 1:
        raise ValueError("K must be at least 1")
    return float(loss + (J * K - K * (K - 1) / 2.0) * math.log(N))


@dataclass
class BicSweepResult:
    """Per-candidate losses and BIC values with the selected ``G``.

    Lists are aligned with ``candidates`` (sorted ascending). Candidates whose
    fits all failed carry ``nan`` loss and BIC and a ``None`` fit, and are listed
    in ``failed``.
    """

    candidates: list[int]
    losses: list[float]
    bics: list[float]
    chosen: int
    fits: list = field(default_factory=list, repr=False)
    failed: list[int] = field(default_factory=list)


def _argmin_smallest(candidates, bics) -> int:
    best = None
    for g, b in zip(candidates, bics):
        if np.isfinite(b) and (best is None or b < best[1]):
            best = (g, b)
    if best is None:
        raise AllStartsFailed("every candidate failed")
    return best[0]


def _normalise_candidates(candidates) -> list[int]:
    out = sorted({int(g) for g in candidates})
    if not out:
        raise ValueError("candidate list is empty")
    if out[0] < 1:
        raise ValueError("candidates must be at least 1")
    return out


def select_g(data: SampleCov, candidates, config: AlmConfig) -> BicSweepResult:
    """Fit an exact bi-factor model for each candidate ``G`` and pick the BIC minimiser.

    Ties go to the smaller ``G``. The result does not depend on the order in
    which candidates are given.
    """
    cands = _normalise_candidates(candidates)
    losses, bics, fits, failed = [], [], [], []
    for G in cands:
        try:
            fit = multi_start_fit(data, bifactor_constraint_pairs(G), config)
        except AllStartsFailed:
            logger.info("G=%d: no start converged", G)
            losses.append(float("nan"))
            bics.append(float("nan"))
            fits.append(None)
            failed.append(G)
            continue
        losses.append(fit.loss)
        bics.append(bic_bifactor(fit.loss, G, data.N))
        fits.append(fit)
    return BicSweepResult(cands, losses, bics, _argmin_smallest(cands, bics), fits, failed)


# ---------------------------------------------------------------------------
# exploratory baseline


def echelon_mask(J: int, K: int) -> np.ndarray:
    """Free-loading mask for a ``K``-factor exploratory model.

    With ``G = K - 1`` the loadings ``lambda[i, j]`` (1-based) are fixed at
    zero for ``i = 2..G`` and ``j = i+1..G+1``. Any loading matrix can be
    rotated into this pattern, so the attainable loss is that of the
    unrestricted model.
    """
    if K < 1 or K >= J:
        raise ValueError(f"need 1 <= K < J, got K={K}, J={J}")
    free = np.ones((J, K), bool)
    G = K - 1
    for i in range(2, G + 1):
        free[i - 1, i:] = False
    return free


@dataclass
class EfaFit:
    Lambda: np.ndarray
    psi: np.ndarray
    loss: float
    n_succeeded: int


def efa_fit(data: SampleCov, K: int, config: AlmConfig) -> EfaFit:
    """Orthogonal maximum-likelihood factor analysis with ``K`` factors.

    Multi-start over ``config.n_starts`` seeded random starts drawn like the
    bi-factor starts; the lowest discrepancy is kept.
    """
    free = echelon_mask(data.J, K)
    empty = ConstraintSet((), n_factors=K, oblique=False)
    solver_cfg = replace(config, inner_max_iters=max(config.inner_max_iters, 2000))
    best = None
    ok = 0
    for seq in np.random.SeedSequence(config.seed).spawn(config.n_starts):
        rng = np.random.default_rng(seq)
        obj = PackedObjective(data, empty, free=free, oblique=False)
        start = FactorParams(np.where(free, rng.standard_normal((data.J, K)), 0.0), None, 0.5 * np.diag(data.S))
        try:
            x = inner_minimize(obj, obj.pack(start), solver_cfg)
        except LineSearchFailed:
            continue
        params = obj.unpack(x)
        loss = discrepancy(params, data)
        if not np.isfinite(loss):
            continue
        ok += 1
        if best is None or loss < best.loss:
            best = EfaFit(params.Lambda, params.psi, loss, 0)
    if best is None:
        raise AllStartsFailed(f"no exploratory start succeeded for K={K}")
    best.n_succeeded = ok
    return best


@dataclass
class EfaSweepResult:
    """Exploratory counterpart of :class:`BicSweepResult`; ``chosen`` is ``K - 1``."""

    candidates: list[int]
    losses: list[float]
    bics: list[float]
    chosen: int
    fits: list = field(default_factory=list, repr=False)
    failed: list[int] = field(default_factory=list)


def select_g_efa(data: SampleCov, candidates, config: AlmConfig) -> EfaSweepResult:
    """Pick ``G`` as one less than the BIC-optimal number of exploratory factors."""
    cands = _normalise_candidates(candidates)
    losses, bics, fits, failed = [], [], [], []
    for G in cands:
        K = G + 1
        try:
            fit = efa_fit(data, K, config)
        except AllStartsFailed:
            losses.append(float("nan"))
            bics.append(float("nan"))
            fits.append(None)
            failed.append(G)
            continue
        losses.append(fit.loss)
        bics.append(bic_efa(fit.loss, K, data.J, data.N))
        fits.append(fit)
    return EfaSweepResult(cands, losses, bics, _argmin_smallest(cands, bics), fits, failed)


__all__ = [
    "BicSweepResult",
    "EfaFit",
    "EfaSweepResult",
    "bic_bifactor",
    "bic_efa",
    "echelon_mask",
    "efa_fit",
    "select_g",
    "select_g_efa",
]
