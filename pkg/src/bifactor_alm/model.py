"""Domain types, the correlation-matrix parameterisation and constraint sets.

Column indices are 0-based throughout: column 0 of a loading matrix is the
general factor (or the root of a hierarchy) and columns 1..G are the group
factors.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np

# z = tanh(gamma) is clamped away from +-1 so square roots stay positive
Z_CLAMP = 1.0 - 1e-12


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class SampleCov:
    """Sample covariance matrix ``S`` of ``J`` variables from ``N`` observations."""

    S: np.ndarray
    N: int

    def __post_init__(self):
        S = np.array(self.S, dtype=float)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise ModelError(f"S must be square, got shape {S.shape}")
        scale = max(np.abs(S).max(), 1.0)
        if np.abs(S - S.T).max() > 1e-10 * scale:
            raise ModelError("S is not symmetric")
        S = 0.5 * (S + S.T)
        if int(self.N) < 2:
            raise ModelError(f"N must be at least 2, got {self.N}")
        if np.linalg.eigvalsh(S)[0] <= 0:
            raise ModelError("S is not positive definite")
        S.setflags(write=False)
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "N", int(self.N))

    @property
    def J(self) -> int:
        return self.S.shape[0]

    @cached_property
    def logdet(self) -> float:
        return float(np.linalg.slogdet(self.S)[1])


@dataclass
class FactorParams:
    """Optimisation variables of a (possibly hierarchical) factor model.

    ``gamma`` holds the unconstrained correlation parameters of the group
    factors; ``None`` means all factors are orthogonal (``Phi = I``), which is
    how the hierarchical model is fitted.
    """

    Lambda: np.ndarray
    gamma: np.ndarray | None
    psi: np.ndarray

    def __post_init__(self):
        self.Lambda = np.asarray(self.Lambda, dtype=float)
        self.psi = np.asarray(self.psi, dtype=float)
        if self.gamma is not None:
            self.gamma = np.asarray(self.gamma, dtype=float)
        J, K = self.Lambda.shape
        if self.psi.shape != (J,):
            raise ModelError(f"psi has shape {self.psi.shape}, expected ({J},)")
        if np.any(self.psi <= 0):
            raise ModelError("psi entries must be strictly positive")
        if self.gamma is not None:
            G = K - 1
            if self.gamma.shape != (G * (G - 1) // 2,):
                raise ModelError(
                    f"gamma has length {self.gamma.size}, expected {G * (G - 1) // 2} for G={G}"
                )
            if not np.all(np.isfinite(self.gamma)):
                raise ModelError("gamma entries must be finite")

    @property
    def J(self) -> int:
        return self.Lambda.shape[0]

    @property
    def n_factors(self) -> int:
        return self.Lambda.shape[1]

    @property
    def phi(self) -> np.ndarray:
        if self.gamma is None:
            return np.eye(self.n_factors)
        return build_phi(self.gamma, self.n_factors - 1)

    def implied_cov(self) -> np.ndarray:
        L = self.Lambda
        return L @ self.phi @ L.T + np.diag(self.psi)

    def copy(self) -> FactorParams:
        return FactorParams(
            self.Lambda.copy(),
            None if self.gamma is None else self.gamma.copy(),
            self.psi.copy(),
        )


# ---------------------------------------------------------------------------
# correlation parameterisation


def n_corr_params(G: int) -> int:
    return G * (G - 1) // 2


def gamma_index(i: int, j: int) -> int:
    """Position of the parameter for U[i, j] (``i < j``) in the gamma vector.

    Parameters are stored column by column over the strict upper triangle:
    (0,1), (0,2), (1,2), (0,3), ...
    """
    return j * (j - 1) // 2 + i


@lru_cache(maxsize=64)
def _upper_index(G: int) -> tuple[np.ndarray, np.ndarray]:
    rows = np.array([i for j in range(G) for i in range(j)], dtype=int)
    cols = np.array([j for j in range(G) for i in range(j)], dtype=int)
    return rows, cols


def _z_matrix(gamma: np.ndarray, G: int) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=float)
    if G < 1:
        raise ModelError(f"G must be at least 1, got {G}")
    if gamma.shape != (n_corr_params(G),):
        raise ModelError(
            f"gamma has length {gamma.size}, expected {n_corr_params(G)} for G={G}"
        )
    Z = np.zeros((G, G))
    rows, cols = _upper_index(G)
    Z[rows, cols] = np.clip(np.tanh(gamma), -Z_CLAMP, Z_CLAMP)
    return Z


@lru_cache(maxsize=64)
def _masks(G: int) -> tuple[np.ndarray, np.ndarray]:
    strict = np.triu(np.ones((G, G), bool), 1)
    upper = np.triu(np.ones((G, G), bool))
    strict.flags.writeable = False
    upper.flags.writeable = False
    return strict, upper


def _factor_parts(gamma, G):
    Z = _z_matrix(gamma, G)
    S = np.sqrt(1.0 - Z * Z)
    # P[i, j] = prod_{k<i} sqrt(1 - z[k, j]**2); lower-triangle S entries are 1
    P = np.ones((G, G))
    if G > 1:
        np.cumprod(S[:-1], axis=0, out=P[1:])
    strict, _ = _masks(G)
    U = np.where(strict, Z * P, 0.0)
    diag = np.arange(G)
    U[diag, diag] = P[diag, diag]
    return Z, S, P, U


def cholesky_factor(gamma: np.ndarray, G: int) -> np.ndarray:
    """Upper-triangular ``U`` with unit-norm columns such that ``U.T @ U`` is
    the group-factor correlation matrix.

    Uses the product form ``U[i, j] = z[i, j] * prod_{k<i} sqrt(1 - z[k, j]**2)``
    and ``U[j, j] = prod_{k<j} sqrt(1 - z[k, j]**2)``.
    """
    return _factor_parts(gamma, G)[3]


def cholesky_factor_recursive(gamma: np.ndarray, G: int) -> np.ndarray:
    """Same factor as :func:`cholesky_factor` via the ratio recursion.

    Divides by ``z[i-1, j]`` and is therefore undefined when any such entry is
    zero; kept as an independent cross-check of the product form.
    """
    Z = _z_matrix(gamma, G)
    U = np.zeros((G, G))
    U[0, 0] = 1.0
    for j in range(1, G):
        U[0, j] = Z[0, j]
        for i in range(1, j + 1):
            prev = Z[i - 1, j]
            ratio = U[i - 1, j] / prev * np.sqrt(1.0 - prev**2)
            U[i, j] = Z[i, j] * ratio if i < j else ratio
    return U


def build_phi(gamma: np.ndarray, G: int) -> np.ndarray:
    """Factor correlation matrix ``blockdiag(1, U.T U)`` of size ``G+1``."""
    return _phi_from_factor(cholesky_factor(gamma, G))


def _phi_from_factor(U: np.ndarray) -> np.ndarray:
    G = U.shape[0]
    phi = np.zeros((G + 1, G + 1))
    block = U.T @ U
    phi[1:, 1:] = 0.5 * (block + block.T)
    np.fill_diagonal(phi, 1.0)
    return phi


def phi_jacobian(gamma: np.ndarray, G: int) -> np.ndarray:
    """Derivatives of :func:`build_phi` with respect to each gamma entry.

    Returns an array of shape ``(G(G-1)/2, G+1, G+1)``; slice ``m`` is
    ``dPhi / dgamma[m]``.
    """
    gamma = np.asarray(gamma, dtype=float)
    U = cholesky_factor(gamma, G)
    Z = _z_matrix(gamma, G)
    m_total = n_corr_params(G)
    jac = np.zeros((m_total, G + 1, G + 1))
    if m_total == 0:
        return jac
    dz = 1.0 - np.tanh(gamma) ** 2
    for j in range(1, G):
        z = Z[:j, j]
        s2 = 1.0 - z**2
        col = U[: j + 1, j]
        for m in range(j):
            # dU[:, j] / dz[m, j]; entries above row m do not depend on z[m, j]
            v = np.zeros(G)
            v[m] = np.prod(np.sqrt(s2[:m]))
            v[m + 1 : j + 1] = -col[m + 1 : j + 1] * z[m] / s2[m]
            w = U.T @ v
            w[j] = 0.0
            idx = gamma_index(m, j)
            block = jac[idx, 1:, 1:]
            block[j, :] += w
            block[:, j] += w
            jac[idx] *= dz[idx]
    return jac


def phi_gamma_vjp(gamma: np.ndarray, G: int, d_phi: np.ndarray, parts=None) -> np.ndarray:
    """Chain a derivative with respect to ``Phi`` back to ``gamma``.

    Equivalent to ``einsum("mab,ab->m", phi_jacobian(gamma, G), d_phi)`` for
    symmetric ``d_phi`` without forming the Jacobian. ``parts`` may carry the
    output of the factor construction when the caller already has it.
    """
    gamma = np.asarray(gamma, dtype=float)
    if gamma.size == 0:
        return np.zeros(0)
    Z, S, P, U = _factor_parts(gamma, G) if parts is None else parts
    M = d_phi[1:, 1:]
    D = U @ (M + M.T)
    A = np.where(_masks(G)[1], D * U, 0.0)
    # T[m, j] = sum_{i > m} A[i, j]
    T = np.cumsum(A[::-1], axis=0)[::-1] - A
    dZ = D * P - Z / (S * S) * T
    rows, cols = _upper_index(G)
    return dZ[rows, cols] * (1.0 - Z[rows, cols] ** 2)


def phi_with_parts(gamma: np.ndarray, G: int):
    """``(Phi, parts)`` where ``parts`` can be handed to :func:`phi_gamma_vjp`."""
    parts = _factor_parts(gamma, G)
    return _phi_from_factor(parts[3]), parts


# ---------------------------------------------------------------------------
# constraint sets


@dataclass(frozen=True)
class ConstraintSet:
    """Column pairs whose row-wise loading products must vanish.

    ``max_active`` is the number of non-general columns a row may load on
    (1 for a bi-factor model, the tree depth for a hierarchy); the structure
    criterion looks at the ``max_active + 1``-th largest absolute loading.
    ``oblique`` selects correlated group factors (bi-factor) versus ``Phi = I``.
    """

    pairs: tuple[tuple[int, int], ...]
    n_factors: int
    max_active: int = 1
    oblique: bool = True

    def __post_init__(self):
        pairs = tuple(sorted(tuple(sorted((int(a), int(b)))) for a, b in self.pairs))
        if len(set(pairs)) != len(pairs):
            raise ModelError("duplicate constraint pairs")
        for a, b in pairs:
            if a == b or a < 1 or b >= self.n_factors:
                raise ModelError(f"constraint pair {(a, b)} out of range")
        object.__setattr__(self, "pairs", pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    @cached_property
    def left(self) -> np.ndarray:
        return np.array([a for a, _ in self.pairs], dtype=int)

    @cached_property
    def right(self) -> np.ndarray:
        return np.array([b for _, b in self.pairs], dtype=int)

    @cached_property
    def incidence(self) -> tuple[np.ndarray, np.ndarray]:
        P, K = len(self.pairs), self.n_factors
        Ea = np.zeros((P, K))
        Eb = np.zeros((P, K))
        Ea[np.arange(P), self.left] = 1.0
        Eb[np.arange(P), self.right] = 1.0
        return Ea, Eb

    @property
    def n_groups(self) -> int:
        return self.n_factors - 1


def bifactor_constraint_pairs(G: int) -> ConstraintSet:
    if G < 1:
        raise ModelError(f"G must be at least 1, got {G}")
    pairs = tuple(itertools.combinations(range(1, G + 1), 2))
    return ConstraintSet(pairs, n_factors=G + 1, max_active=1, oblique=True)


@dataclass(frozen=True)
class HierarchyTree:
    """Rooted factor tree; ``parent[k]`` is the parent column of factor ``k``
    and ``parent[0] == -1`` marks the root (the general factor)."""

    parent: tuple[int, ...]
    children: dict[int, tuple[int, ...]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        parent = tuple(int(p) for p in self.parent)
        object.__setattr__(self, "parent", parent)
        K = len(parent)
        if K == 0 or parent[0] != -1:
            raise ModelError("node 0 must be the root (parent -1)")
        for k in range(1, K):
            if not 0 <= parent[k] < K or parent[k] == k:
                raise ModelError(f"node {k} has invalid parent {parent[k]}")
        for k in range(1, K):
            seen, node = set(), k
            while node != 0:
                if node in seen:
                    raise ModelError(f"cycle through node {k}")
                seen.add(node)
                node = parent[node]
        children = {k: tuple(c for c in range(K) if parent[c] == k) for k in range(K)}
        object.__setattr__(self, "children", children)

    @classmethod
    def from_edges(cls, edges) -> HierarchyTree:
        """Build from 1-based ``(child, parent)`` pairs with the root as ``(1, 0)``."""
        edges = [(int(c), int(p)) for c, p in edges]
        ids = sorted(c for c, _ in edges)
        if ids != list(range(1, len(ids) + 1)):
            raise ModelError("factor ids must be exactly 1..K")
        lookup = dict(edges)
        if lookup.get(1) != 0:
            raise ModelError("factor 1 must be the root, listed as '1 0'")
        if sum(1 for _, p in edges if p == 0) != 1:
            raise ModelError("exactly one root is allowed")
        return cls(tuple(lookup[k] - 1 for k in ids))

    @classmethod
    def two_layer(cls, G: int) -> HierarchyTree:
        return cls((-1,) + (0,) * G)

    @property
    def n_factors(self) -> int:
        return len(self.parent)

    def ancestors(self, k: int) -> list[int]:
        out = []
        while self.parent[k] != -1:
            k = self.parent[k]
            out.append(k)
        return out

    def depth(self, k: int) -> int:
        return len(self.ancestors(k))

    @property
    def max_depth(self) -> int:
        return max(self.depth(k) for k in range(self.n_factors))

    def descendants(self, k: int) -> list[int]:
        out, stack = [], list(self.children[k])
        while stack:
            c = stack.pop()
            out.append(c)
            stack.extend(self.children[c])
        return sorted(out)


FIG_A1_TREE = HierarchyTree((-1, 0, 0, 1, 1, 2, 2))


def hierarchy_constraint_pairs(
    tree: HierarchyTree, oblique: bool = False, complete: bool = True
) -> ConstraintSet:
    """Constraint pairs implied by a factor hierarchy.

    By default every pair of non-root factors without an ancestor relation is
    constrained (eleven pairs for :data:`FIG_A1_TREE`). Then the only
    relabellings that keep a fitted structure feasible are the automorphisms
    of the tree.

    With ``complete=False`` each factor is paired only with its siblings and
    their descendants. For :data:`FIG_A1_TREE` that gives the seven pairs
    (1,2), (1,5), (1,6), (2,3), (2,4), (3,4), (5,6). This smaller set leaves
    cousins such as 3 and 5 unconstrained, so a fit may attach a layer-one
    factor to the wrong parent label while still reaching zero loss.
    """
    K = tree.n_factors
    if complete:
        pairs = [
            (a, b)
            for a, b in itertools.combinations(range(1, K), 2)
            if a not in tree.ancestors(b) and b not in tree.ancestors(a)
        ]
    else:
        found = set()
        for k in range(1, K):
            for sib in tree.children[tree.parent[k]]:
                if sib == k:
                    continue
                for other in [sib, *tree.descendants(sib)]:
                    found.add((min(k, other), max(k, other)))
        pairs = sorted(found)
    return ConstraintSet(tuple(pairs), n_factors=K, max_active=max(tree.max_depth, 1), oblique=oblique)


def _canonical(tree: HierarchyTree, k: int):
    return tuple(sorted(_canonical(tree, c) for c in tree.children[k]))


def _isomorphisms(tree: HierarchyTree, a: int, b: int) -> list[dict[int, int]]:
    if _canonical(tree, a) != _canonical(tree, b):
        return []
    ca, cb = tree.children[a], tree.children[b]
    out = []
    for perm in itertools.permutations(cb):
        per_child = [_isomorphisms(tree, x, y) for x, y in zip(ca, perm)]
        if any(not maps for maps in per_child):
            continue
        for combo in itertools.product(*per_child):
            mapping = {a: b}
            for m in combo:
                mapping.update(m)
            out.append(mapping)
    return out


def tree_automorphisms(tree: HierarchyTree) -> list[tuple[int, ...]]:
    """Label permutations of the tree that leave the hierarchy unchanged.

    Each entry maps factor ``k`` to ``perm[k]``.
    """
    maps = _isomorphisms(tree, 0, 0)
    return sorted({tuple(m[k] for k in range(tree.n_factors)) for m in maps})
