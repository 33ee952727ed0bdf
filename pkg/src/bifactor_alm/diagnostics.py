"""Checkable identifiability conditions for exact bi-factor loading matrices.

Structures are per-item group labels in ``1..G`` (``0`` marks an item with no
group factor). Item indices in reports are 0-based; group ids are 1-based,
matching the column of ``Lambda`` that holds the group loading.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr


class StructureMismatch(ValueError):
    """Loadings above tolerance sit outside the declared structure."""


@dataclass
class IdentifiabilityReport:
    Q_sets: list[list[int]]
    H_set: list[int]
    condition2: bool
    condition2_witness: int | None
    condition3: bool
    condition5: bool
    anderson_rubin_rows: list[bool | None]
    zero_tol: float
    rank_tol: float
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "Q_sets": [list(map(int, q)) for q in self.Q_sets],
            "H_set": [int(g) for g in self.H_set],
            "condition2": bool(self.condition2),
            "condition2_witness": self.condition2_witness,
            "condition3": bool(self.condition3),
            "condition5": bool(self.condition5),
            "anderson_rubin_rows": list(self.anderson_rubin_rows),
            "zero_tol": self.zero_tol,
            "rank_tol": self.rank_tol,
            "notes": list(self.notes),
        }


def _validate(Lambda, structure, zero_tol):
    Lambda = np.asarray(Lambda, dtype=float)
    structure = np.asarray(structure, dtype=int)
    if Lambda.ndim != 2 or Lambda.shape[1] < 2:
        raise ValueError("Lambda must be J x (G+1) with G >= 1")
    J, K = Lambda.shape
    G = K - 1
    if structure.shape != (J,):
        raise StructureMismatch(f"structure has {structure.size} entries for {J} items")
    if np.any(structure < 0) or np.any(structure > G):
        raise StructureMismatch(f"group labels must lie in 0..{G}")
    own = np.zeros((J, G), bool)
    rows = np.flatnonzero(structure > 0)
    own[rows, structure[rows] - 1] = True
    stray = (np.abs(Lambda[:, 1:]) > zero_tol) & ~own
    if np.any(stray):
        i, g = np.argwhere(stray)[0]
        raise StructureMismatch(
            f"item {i} has loading {Lambda[i, g + 1]:.3g} on group {g + 1} but is assigned to group {structure[i]}"
        )
    return Lambda, structure, G


def _rank(M: np.ndarray, rank_tol: float) -> int:
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] == 0:
        return 0
    return int(np.sum(s > rank_tol * s[0]))


def compute_q_h(Lambda, structure, zero_tol: float = 1e-6, rank_tol: float = 1e-8):
    """Items with a non-zero group loading per group, and the rank-2 groups.

    Returns ``(Q_sets, H_set)``: ``Q_sets[g-1]`` lists the items of group
    ``g`` whose loading on that group exceeds ``zero_tol``; ``H_set`` lists
    groups whose ``[general, own group]`` block has numerical rank 2.
    """
    Lambda, structure, G = _validate(Lambda, structure, zero_tol)
    Q_sets, H_set = [], []
    for g in range(1, G + 1):
        items = np.flatnonzero(structure == g)
        Q_sets.append([int(i) for i in items if abs(Lambda[i, g]) > zero_tol])
        if _rank(Lambda[np.ix_(items, [0, g])], rank_tol) == 2:
            H_set.append(g)
    return Q_sets, H_set


def rows_pairwise_independent(block: np.ndarray, rank_tol: float = 1e-8) -> bool:
    """True when no two rows of a ``n x 2`` block are parallel."""
    block = np.asarray(block, dtype=float)
    norms = np.linalg.norm(block, axis=1)
    for a in range(len(block)):
        for b in range(a + 1, len(block)):
            u, v = block[a], block[b]
            if abs(u[0] * v[1] - u[1] * v[0]) <= rank_tol * norms[a] * norms[b]:
                return False
    return True


def _greedy_basis(M: np.ndarray, order, rank_tol: float, target: int):
    chosen: list[int] = []
    for i in order:
        trial = chosen + [i]
        if _rank(M[trial], rank_tol) == len(trial):
            chosen = trial
            if len(chosen) == target:
                break
    return chosen


def two_disjoint_full_rank(M: np.ndarray, rank_tol: float = 1e-8, tries: int = 200, seed: int = 0):
    """Search for two disjoint row subsets of ``M`` that each have full column rank.

    Returns ``True`` when found, ``False`` when impossible by a counting or
    rank argument, and ``None`` when the search gave up.
    """
    n, K = M.shape
    if n < 2 * K or _rank(M, rank_tol) < K:
        return False
    # first attempt: pivoted QR picks a well-conditioned basis
    _, _, piv = qr(M.T, pivoting=True, mode="economic")
    orders = [list(piv)]
    rng = np.random.default_rng(seed)
    orders += [list(rng.permutation(n)) for _ in range(tries)]
    for order in orders:
        first = _greedy_basis(M, order, rank_tol, K)
        if len(first) < K:
            continue
        rest = np.setdiff1d(np.arange(n), first)
        if _rank(M[rest], rank_tol) == K:
            return True
    return None


def anderson_rubin_rows(Lambda, rank_tol: float = 1e-8, tries: int = 200, seed: int = 0) -> list[bool | None]:
    """Row-deletion test: after removing row ``j``, can the remaining rows be
    split into two disjoint full-column-rank submatrices?

    ``None`` marks rows for which the randomised search was inconclusive.
    """
    Lambda = np.asarray(Lambda, dtype=float)
    out: list[bool | None] = []
    for j in range(Lambda.shape[0]):
        rest = np.delete(Lambda, j, axis=0)
        out.append(two_disjoint_full_rank(rest, rank_tol, tries, seed + j))
    return out


def check_conditions(
    Lambda,
    structure,
    phi=None,
    zero_tol: float = 1e-6,
    rank_tol: float = 1e-8,
    ar_tries: int = 200,
) -> IdentifiabilityReport:
    """Evaluate the checkable identifiability conditions for a bi-factor pattern.

    Parameters
    ----------
    Lambda : (J, G+1) array
    structure : (J,) int array of group labels
    phi : optional (G+1, G+1) factor correlation matrix. Only used to find
        groups uncorrelated with all others; without it every group is taken
        to be correlated with some other group.
    """
    Lambda, structure, G = _validate(Lambda, structure, zero_tol)
    Q_sets, H_set = compute_q_h(Lambda, structure, zero_tol, rank_tol)
    q = [len(s) for s in Q_sets]
    notes = []

    witness = None
    if len(H_set) >= 2:
        for g in H_set:
            items = np.flatnonzero(structure == g)
            if q[g - 1] >= 3 and rows_pairwise_independent(Lambda[np.ix_(items, [0, g])], rank_tol):
                witness = g
                break
    cond2 = witness is not None

    cond3 = all(n >= 3 for n in q) and len(H_set) >= 3

    isolated = []
    if phi is not None:
        phi = np.asarray(phi, dtype=float)
        for g in range(1, G + 1):
            others = [h for h in range(1, G + 1) if h != g]
            if all(abs(phi[g, h]) <= zero_tol for h in others):
                isolated.append(g)
    else:
        notes.append("phi not supplied: groups treated as correlated")
    cond5 = len(H_set) >= 2 and all(n >= 2 for n in q) and all(q[g - 1] >= 3 for g in isolated)

    ar = anderson_rubin_rows(Lambda, rank_tol, ar_tries)
    return IdentifiabilityReport(
        Q_sets=Q_sets,
        H_set=H_set,
        condition2=cond2,
        condition2_witness=witness,
        condition3=cond3,
        condition5=cond5,
        anderson_rubin_rows=ar,
        zero_tol=zero_tol,
        rank_tol=rank_tol,
        notes=notes,
    )
