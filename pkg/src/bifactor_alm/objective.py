"""Normal-theory discrepancy, augmented Lagrangian objective and gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernel
from .model import ConstraintSet, FactorParams, SampleCov, phi_gamma_vjp, phi_with_parts

# log-uniqueness box relative to log diag(S): keeps psi positive and finite
ETA_BELOW = 25.0
ETA_ABOVE = 10.0


class SigmaNotPD(ArithmeticError):
    """The implied covariance matrix failed a Cholesky factorisation."""


@dataclass
class AugLagCoefficients:
    """Multipliers ``beta`` (``J x n_pairs``) and penalty coefficient ``c``."""

    beta: np.ndarray
    c: float

    @classmethod
    def zeros(cls, J: int, constraints: ConstraintSet, c: float = 1.0) -> AugLagCoefficients:
        return cls(np.zeros((J, len(constraints))), float(c))


def _fit_terms(sigma: np.ndarray, data: SampleCov):
    # one Cholesky factorisation doubles as the positive-definiteness test
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise SigmaNotPD(str(exc)) from None
    diag = chol.diagonal()
    if not (np.all(np.isfinite(diag)) and np.all(diag > 0)):
        raise SigmaNotPD("non-positive pivot")
    logdet = 2.0 * np.sum(np.log(diag))
    chol_inv = np.linalg.inv(chol)
    sigma_inv = chol_inv.T @ chol_inv
    value = data.N * (logdet + np.sum(data.S * sigma_inv) - data.logdet - data.J)
    return value, sigma_inv


def discrepancy(params: FactorParams, data: SampleCov) -> float:
    """``N (log det Sigma + tr(S Sigma^-1) - log det S - J)``."""
    return float(_fit_terms(params.implied_cov(), data)[0])


def discrepancy_cov(sigma: np.ndarray, data: SampleCov) -> float:
    return float(_fit_terms(np.asarray(sigma, dtype=float), data)[0])


def constraint_residuals(Lambda: np.ndarray, constraints: ConstraintSet) -> np.ndarray:
    """Row-wise products ``Lambda[j, a] * Lambda[j, b]`` for every pair ``(a, b)``."""
    Lambda = np.asarray(Lambda, dtype=float)
    if not constraints.pairs:
        return np.zeros((Lambda.shape[0], 0))
    return Lambda[:, constraints.left] * Lambda[:, constraints.right]


def _penalty(Lambda, coeffs, constraints, need_grad):
    if not constraints.pairs:
        return 0.0, (np.zeros_like(Lambda) if need_grad else None)
    R = constraint_residuals(Lambda, constraints)
    value = float(np.sum(coeffs.beta * R) + coeffs.c * np.sum(R * R))
    if not need_grad:
        return value, None
    W = coeffs.beta + 2.0 * coeffs.c * R
    Ea, Eb = constraints.incidence
    grad = (W * Lambda[:, constraints.right]) @ Ea + (W * Lambda[:, constraints.left]) @ Eb
    return value, grad


def augmented_objective(
    params: FactorParams,
    coeffs: AugLagCoefficients,
    constraints: ConstraintSet,
    data: SampleCov,
) -> float:
    """Discrepancy plus multiplier and quadratic penalty terms."""
    fit = discrepancy(params, data)
    pen, _ = _penalty(params.Lambda, coeffs, constraints, need_grad=False)
    return fit + pen


def _fit_gradient(Lambda, phi, gamma, sigma_inv, data, parts=None):
    # dl/dSigma for the normal-theory discrepancy
    dS = data.N * (sigma_inv - sigma_inv @ data.S @ sigma_inv)
    dS = 0.5 * (dS + dS.T)
    dS_L = dS @ Lambda
    g_lambda = 2.0 * dS_L @ phi
    if gamma is None or gamma.size == 0:
        g_gamma = None if gamma is None else np.zeros(0)
    else:
        d_phi = Lambda.T @ dS_L
        g_gamma = phi_gamma_vjp(gamma, phi.shape[0] - 1, d_phi, parts)
    g_psi = dS.diagonal().copy()
    return g_lambda, g_gamma, g_psi


def augmented_gradient(
    params: FactorParams,
    coeffs: AugLagCoefficients,
    constraints: ConstraintSet,
    data: SampleCov,
):
    """Gradient blocks ``(d/dLambda, d/dgamma, d/dpsi)`` of :func:`augmented_objective`."""
    phi = params.phi
    L = params.Lambda
    sigma = L @ phi @ L.T + np.diag(params.psi)
    _, sigma_inv = _fit_terms(sigma, data)
    g_lambda, g_gamma, g_psi = _fit_gradient(L, phi, params.gamma, sigma_inv, data)
    _, g_pen = _penalty(L, coeffs, constraints, need_grad=True)
    return g_lambda + g_pen, g_gamma, g_psi


class PackedObjective:
    """Augmented Lagrangian over a flat vector ``[free Lambda, gamma, log psi]``.

    ``free`` is a boolean ``J x K`` mask of optimised loadings; fixed entries
    are held at zero. The objective is a callable returning ``(value, grad)``
    for use with scipy minimisers. ``backend="numpy"`` selects the pure numpy
    evaluation instead of the compiled kernel; both give the same numbers.
    """

    def __init__(self, data, constraints, coeffs=None, free=None, oblique=None, backend="compiled"):
        self.data = data
        self.constraints = constraints
        self.J = data.J
        self.K = constraints.n_factors
        self.oblique = constraints.oblique if oblique is None else oblique
        self.G = self.K - 1
        self.free = np.ones((self.J, self.K), bool) if free is None else np.asarray(free, bool)
        self.n_lambda = int(self.free.sum())
        self.n_gamma = self.G * (self.G - 1) // 2 if self.oblique else 0
        self.coeffs = coeffs if coeffs is not None else AugLagCoefficients.zeros(self.J, constraints, 0.0)
        self.n_evals = 0
        self._diag = np.arange(self.J)
        self._free_idx = np.flatnonzero(self.free.ravel())
        self._eye = np.eye(self.K)
        if backend not in ("compiled", "numpy"):
            raise ValueError(f"unknown backend {backend!r}")
        self.backend = backend
        self._free_rows, self._free_cols = (a.astype(np.int64) for a in np.nonzero(self.free))
        self._left = np.asarray(constraints.left, dtype=np.int64)
        self._right = np.asarray(constraints.right, dtype=np.int64)
        self._S = np.ascontiguousarray(data.S, dtype=float)

    @property
    def bounds(self) -> list[tuple[float | None, float | None]]:
        """Box constraints for L-BFGS-B; only the log uniquenesses are bounded."""
        log_s = np.log(np.diag(self.data.S))
        free = [(None, None)] * (self.n_lambda + self.n_gamma)
        return free + [(float(v - ETA_BELOW), float(v + ETA_ABOVE)) for v in log_s]

    def clip(self, x: np.ndarray) -> np.ndarray:
        lo, hi = np.array([(-np.inf if a is None else a, np.inf if b is None else b) for a, b in self.bounds]).T
        return np.clip(x, lo, hi)

    @property
    def size(self) -> int:
        return self.n_lambda + self.n_gamma + self.J

    def pack(self, params: FactorParams) -> np.ndarray:
        parts = [params.Lambda[self.free]]
        if self.oblique:
            parts.append(params.gamma)
        parts.append(np.log(params.psi))
        return np.concatenate(parts)

    def unpack(self, x: np.ndarray) -> FactorParams:
        L = np.zeros((self.J, self.K))
        L[self.free] = x[: self.n_lambda]
        gamma = x[self.n_lambda : self.n_lambda + self.n_gamma].copy() if self.oblique else None
        psi = np.exp(x[self.n_lambda + self.n_gamma :])
        return FactorParams(L, gamma, psi)

    def __call__(self, x: np.ndarray):
        self.n_evals += 1
        if self.backend == "compiled":
            x = np.ascontiguousarray(x, dtype=float)
            grad = np.empty_like(x)
            value = _kernel.evaluate(
                x, self._free_rows, self._free_cols, self.J, self.K, self.n_gamma,
                self._S, float(self.data.N), float(self.data.logdet),
                np.ascontiguousarray(self.coeffs.beta, dtype=float), float(self.coeffs.c),
                self._left, self._right, grad,
            )
            return value, grad
        nl, ng = self.n_lambda, self.n_gamma
        eta = x[nl + ng :]
        if not np.all(np.isfinite(x)) or np.any(eta > 700):
            return np.inf, np.zeros_like(x)
        L = np.zeros(self.J * self.K)
        L[self._free_idx] = x[:nl]
        L = L.reshape(self.J, self.K)
        psi = np.exp(eta)
        if self.oblique:
            gamma = x[nl : nl + ng]
            phi, parts = phi_with_parts(gamma, self.G)
        else:
            gamma, parts, phi = None, None, self._eye
        sigma = L @ phi @ L.T
        sigma[self._diag, self._diag] += psi
        try:
            value, sigma_inv = _fit_terms(sigma, self.data)
        except SigmaNotPD:
            return np.inf, np.zeros_like(x)
        g_lambda, g_gamma, g_psi = _fit_gradient(L, phi, gamma, sigma_inv, self.data, parts)
        pen, g_pen = _penalty(L, self.coeffs, self.constraints, need_grad=True)
        grad = np.empty_like(x)
        grad[:nl] = (g_lambda + g_pen).ravel()[self._free_idx]
        if self.oblique:
            grad[nl : nl + ng] = g_gamma
        grad[nl + ng :] = g_psi * psi
        return value + pen, grad
