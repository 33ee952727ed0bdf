"""Ground-truth generators, data sampling, recovery metrics and the study runner."""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.optimize import linear_sum_assignment

from .alm import AllStartsFailed, AlmConfig, multi_start_fit, n_threads
from .model import (
    FIG_A1_TREE,
    HierarchyTree,
    SampleCov,
    bifactor_constraint_pairs,
    build_phi,
    hierarchy_constraint_pairs,
    n_corr_params,
    tree_automorphisms,
)
from .selection import select_g, select_g_efa

logger = logging.getLogger(__name__)

STUDIES = ("study1", "study2", "hier")


@dataclass
class TruthModel:
    """Population parameters of a simulation setting.

    ``membership`` is a ``J x G`` boolean matrix: item ``j`` loads on group
    (or non-root hierarchy) factor ``g`` when ``membership[j, g-1]``.
    ``evaluated`` marks the items whose truth fits the assumed structure
    exactly; metrics ignore the others.
    """

    Lambda_star: np.ndarray
    Phi_star: np.ndarray
    Psi_star: np.ndarray
    membership: np.ndarray
    hierarchy: HierarchyTree | None = None
    evaluated: np.ndarray | None = None

    @property
    def J(self) -> int:
        return self.Lambda_star.shape[0]

    @property
    def G(self) -> int:
        return self.Lambda_star.shape[1] - 1

    @property
    def labels(self) -> np.ndarray:
        """Per-item group label in ``1..G`` for bi-factor truths."""
        return _labels_from_membership(self.membership)

    def sigma(self) -> np.ndarray:
        return self.Lambda_star @ self.Phi_star @ self.Lambda_star.T + np.diag(self.Psi_star)


def _labels_from_membership(member: np.ndarray) -> np.ndarray:
    member = np.asarray(member, bool)
    count = member.sum(axis=1)
    lab = np.where(count == 1, np.argmax(member, axis=1) + 1, 0)
    lab[count > 1] = -1
    return lab


def _membership_from_labels(labels, G: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, G), bool)
    ok = (labels >= 1) & (labels <= G)
    out[np.flatnonzero(ok), labels[ok] - 1] = True
    return out


def _group_loadings(rng, shape):
    x = rng.standard_normal(shape)
    return np.sign(x) * (0.1 + 2.0 * np.abs(x))


def generate_bifactor_truth(J: int, G: int, rng_seed) -> TruthModel:
    """Exact bi-factor truth with groups ``{g, g+G, g+2G, ...}`` (1-based).

    General loadings are Uniform(0, 1), group loadings ``sign(x)(0.1 + 2|x|)``
    with standard normal ``x``, correlation parameters N(0, 1/4) and unit
    uniquenesses.
    """
    if G < 1 or J % G != 0:
        raise ValueError(f"J={J} must be a positive multiple of G={G}")
    rng = np.random.default_rng(rng_seed)
    labels = np.arange(J) % G + 1
    Lambda = np.zeros((J, G + 1))
    Lambda[:, 0] = rng.uniform(0.0, 1.0, J)
    group = _group_loadings(rng, J)
    Lambda[np.arange(J), labels] = group
    gamma = rng.normal(0.0, 0.5, n_corr_params(G))
    return TruthModel(
        Lambda_star=Lambda,
        Phi_star=build_phi(gamma, G),
        Psi_star=np.ones(J),
        membership=_membership_from_labels(labels, G),
        evaluated=np.ones(J, bool),
    )


def hier_blocks(J: int, disjoint: bool = False) -> list[np.ndarray]:
    """0-based item sets of the six non-root factors of the three-layer tree.

    The default follows the closed ranges ``{1..J/2}, {J/2..J}, {1..J/4},
    {J/4..J/2}, {J/2..3J/4}, {3J/4..J}`` so neighbouring blocks share their
    boundary item; ``disjoint=True`` makes every block start one item later
    than its left neighbour ends.
    """
    if J % 4 != 0 or J < 8:
        raise ValueError(f"J={J} must be a multiple of 4 and at least 8")
    h, q = J // 2, J // 4
    starts = [1, h, 1, q, h, 3 * q]
    ends = [h, J, q, h, 3 * q, J]
    if disjoint:
        starts = [1, h + 1, 1, q + 1, h + 1, 3 * q + 1]
    return [np.arange(s - 1, e) for s, e in zip(starts, ends)]


def generate_hier_truth(J: int, rng_seed, disjoint: bool = False) -> TruthModel:
    """Three-layer hierarchical truth on the seven-factor tree.

    Loadings follow the bi-factor generator; factors are uncorrelated and
    uniquenesses are one. Items shared by sibling blocks (see
    :func:`hier_blocks`) are excluded from ``evaluated``.
    """
    blocks = hier_blocks(J, disjoint)
    rng = np.random.default_rng(rng_seed)
    K = len(blocks) + 1
    member = np.zeros((J, K - 1), bool)
    for k, items in enumerate(blocks):
        member[items, k] = True
    Lambda = np.zeros((J, K))
    Lambda[:, 0] = rng.uniform(0.0, 1.0, J)
    draws = _group_loadings(rng, (J, K - 1))
    Lambda[:, 1:] = np.where(member, draws, 0.0)
    tree = FIG_A1_TREE
    evaluated = _on_single_path(member, tree)
    return TruthModel(
        Lambda_star=Lambda,
        Phi_star=np.eye(K),
        Psi_star=np.ones(J),
        membership=member,
        hierarchy=tree,
        evaluated=evaluated,
    )


def _on_single_path(member: np.ndarray, tree: HierarchyTree) -> np.ndarray:
    # an item fits the tree when it loads on exactly one factor per layer
    depth = np.array([tree.depth(k) for k in range(1, tree.n_factors)])
    ok = np.ones(member.shape[0], bool)
    for d in range(1, tree.max_depth + 1):
        ok &= member[:, depth == d].sum(axis=1) == 1
    return ok


def sample_covariance(truth: TruthModel, N: int, rng_seed) -> SampleCov:
    """Sample covariance (divisor ``N``, mean-centred) of ``N`` normal draws."""
    if N < truth.J + 1:
        raise ValueError(f"N={N} must be at least J+1={truth.J + 1}")
    rng = np.random.default_rng(rng_seed)
    chol = np.linalg.cholesky(truth.sigma())
    X = rng.standard_normal((N, truth.J)) @ chol.T
    X -= X.mean(axis=0)
    return SampleCov(X.T @ X / N, N)


# ---------------------------------------------------------------------------
# metrics


@lru_cache(maxsize=16)
def _permutations(G: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(G))), dtype=int).reshape(-1, G)


def _column_costs(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    # cost[i, j] = min over sign s of ||A[:, i] - s B[:, j]||^2
    a = A[:, :, None]
    b = B[:, None, :]
    return np.minimum(((a - b) ** 2).sum(axis=0), ((a + b) ** 2).sum(axis=0))


EXHAUSTIVE_MAX_G = 8


def mse_lambda(Lambda_hat, Lambda_star) -> float:
    """``min_{P, D} ||Lambda_hat - Lambda_star P D||_F^2 / (J K)``.

    ``P`` permutes group columns (the general column stays first) and ``D``
    flips column signs. Exhaustive over permutations up to eight groups,
    optimal assignment above that; both give the same minimum because the
    cost separates over columns once each column takes its best sign.
    """
    A = np.asarray(Lambda_hat, dtype=float)
    B = np.asarray(Lambda_star, dtype=float)
    if A.shape != B.shape or A.ndim != 2:
        raise ValueError(f"shape mismatch: {A.shape} vs {B.shape}")
    J, K = A.shape
    first = _column_costs(A[:, :1], B[:, :1])[0, 0]
    G = K - 1
    if G == 0:
        return float(first / (J * K))
    cost = _column_costs(A[:, 1:], B[:, 1:])
    if G <= EXHAUSTIVE_MAX_G:
        perms = _permutations(G)
        best = cost[np.arange(G), perms].sum(axis=1).min()
    else:
        r, c = linear_sum_assignment(cost)
        best = cost[r, c].sum()
    return float((first + best) / (J * K))


def _match_scores(hat: np.ndarray, star: np.ndarray) -> np.ndarray:
    # score[g, h] = agreements between true group g and estimated group h
    hat = hat.astype(float)
    star = star.astype(float)
    n = hat.shape[0]
    both = star.T @ hat
    neither = (1 - star).T @ (1 - hat)
    return (both + neither) / n


def _as_membership(x, G: int) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 1:
        return _membership_from_labels(x, G)
    if x.shape[1] != G:
        raise ValueError(f"membership has {x.shape[1]} columns, expected {G}")
    return x.astype(bool)


def acc(structure_hat, partition_star, G: int | None = None) -> float:
    """Average correctness under the best relabelling of estimated groups.

    Both arguments are per-item labels in ``1..G`` or ``J x G`` membership
    matrices. Labels outside ``1..G`` count as belonging to no group.
    """
    star = np.asarray(partition_star)
    if G is None:
        G = int(star.max()) if star.ndim == 1 else star.shape[1]
    star = _as_membership(star, G)
    hat = _as_membership(structure_hat, G)
    if hat.shape[0] != star.shape[0]:
        raise ValueError("structures cover different numbers of items")
    scores = _match_scores(hat, star)
    r, c = linear_sum_assignment(scores, maximize=True)
    return float(scores[r, c].sum() / G)


def emc(structure_hat, partition_star, G: int | None = None) -> int:
    """1 when the estimated groups equal the true groups up to relabelling."""
    star = np.asarray(partition_star)
    if G is None:
        G = int(star.max()) if star.ndim == 1 else star.shape[1]
    star = _as_membership(star, G)
    hat = _as_membership(structure_hat, G)
    true_sets = sorted(tuple(np.flatnonzero(star[:, g])) for g in range(G))
    hat_sets = sorted(tuple(np.flatnonzero(hat[:, g])) for g in range(G))
    return int(true_sets == hat_sets)


def hier_match_metrics(membership_hat, truth: TruthModel) -> tuple[int, float]:
    """EMC and ACC for hierarchical structures, maximised over tree automorphisms.

    ``membership_hat`` is ``J x (K-1)`` (non-root factors) or ``J x K``;
    the root column is not scored. Only ``truth.evaluated`` items count.
    """
    hat = np.asarray(membership_hat, bool)
    K = truth.Lambda_star.shape[1]
    if hat.shape[1] == K:
        hat = hat[:, 1:]
    if hat.shape != truth.membership.shape:
        raise ValueError(f"membership has shape {hat.shape}, expected {truth.membership.shape}")
    keep = truth.evaluated if truth.evaluated is not None else np.ones(truth.J, bool)
    star = truth.membership[keep]
    hat = hat[keep]
    best_emc, best_acc = 0, 0.0
    for perm in tree_automorphisms(truth.hierarchy):
        # factor k of the truth is compared with factor perm[k] of the estimate
        cols = [perm[k] - 1 for k in range(1, K)]
        mapped = hat[:, cols]
        best_emc = max(best_emc, int(np.array_equal(mapped, star)))
        agree = (mapped == star).mean()
        best_acc = max(best_acc, float(agree))
    return best_emc, best_acc


# ---------------------------------------------------------------------------
# study runner


@dataclass(frozen=True)
class StudySpec:
    """Simulation setting.

    ``kind`` is ``study1`` (structure recovery at known ``G``), ``study2``
    (choice of ``G`` by BIC against the exploratory baseline) or ``hier``
    (three-layer hierarchy; ``G`` is ignored).
    """

    kind: str
    J: int
    N: int
    G: int = 0
    candidates: tuple[int, ...] | None = None
    disjoint: bool = False

    def __post_init__(self):
        if self.kind not in STUDIES:
            raise ValueError(f"unknown study {self.kind!r}; expected one of {STUDIES}")
        if self.N < self.J + 1:
            raise ValueError("N must exceed J")
        if self.kind == "hier":
            if self.J % 4 != 0 or self.J < 8:
                raise ValueError("hierarchical study needs J a multiple of 4, at least 8")
        else:
            if self.G < 1 or self.J % self.G != 0:
                raise ValueError(f"J={self.J} must be a positive multiple of G={self.G}")

    def candidate_set(self) -> tuple[int, ...]:
        if self.candidates is not None:
            return tuple(sorted(set(self.candidates)))
        return tuple(g for g in (self.G - 1, self.G, self.G + 1) if g >= 1)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "J": self.J, "N": self.N, "G": self.G}
        if self.kind == "study2":
            out["candidates"] = list(self.candidate_set())
        if self.kind == "hier":
            out["disjoint"] = self.disjoint
        return out


METRIC_KEYS = ("mse_lambda", "emc", "acc", "g_hat", "sc", "efa_g_hat", "efa_sc")


@dataclass
class StudyReport:
    spec: StudySpec
    replications: int
    base_seed: int
    n_starts: int
    rows: list[dict] = field(default_factory=list)

    @property
    def n_failed(self) -> int:
        return sum(1 for r in self.rows if r["failed"])

    def aggregates(self) -> dict:
        """Means of each metric over successful replications."""
        out = {}
        for key in METRIC_KEYS:
            vals = [r[key] for r in self.rows if not r["failed"] and r.get(key) is not None]
            out[key] = float(np.mean(vals)) if vals else None
        out["n_ok"] = len(self.rows) - self.n_failed
        out["n_failed"] = self.n_failed
        return out

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "replications": self.replications,
            "base_seed": self.base_seed,
            "n_starts": self.n_starts,
            "rows": self.rows,
            "aggregate": self.aggregates(),
        }


def _seed_int(*entropy) -> int:
    return int(np.random.SeedSequence(list(entropy)).generate_state(1, dtype=np.uint64)[0] >> 1)


def truth_for(spec: StudySpec, base_seed: int) -> TruthModel:
    seed = np.random.SeedSequence([base_seed, 0])
    if spec.kind == "hier":
        return generate_hier_truth(spec.J, seed, disjoint=spec.disjoint)
    return generate_bifactor_truth(spec.J, spec.G, seed)


def _blank_row(rep: int) -> dict:
    row = {"rep": rep, "failed": False, "error": None}
    row.update({k: None for k in METRIC_KEYS})
    return row


def run_replication(spec: StudySpec, truth: TruthModel, rep: int, base_seed: int, config: AlmConfig) -> dict:
    """One replication: sample data, fit, score. Failures are recorded in the row."""
    row = _blank_row(rep)
    data = sample_covariance(truth, spec.N, np.random.SeedSequence([base_seed, 1, rep]))
    cfg = replace(config, seed=_seed_int(base_seed, 2, rep), n_jobs=1)
    try:
        if spec.kind == "study1":
            fit = multi_start_fit(data, bifactor_constraint_pairs(spec.G), cfg)
            row["mse_lambda"] = mse_lambda(fit.params.Lambda, truth.Lambda_star)
            row["emc"] = emc(fit.structure, truth.labels, spec.G)
            row["acc"] = acc(fit.structure, truth.labels, spec.G)
        elif spec.kind == "study2":
            sweep = select_g(data, spec.candidate_set(), cfg)
            row["g_hat"] = sweep.chosen
            row["sc"] = int(sweep.chosen == spec.G)
            efa = select_g_efa(data, spec.candidate_set(), cfg)
            row["efa_g_hat"] = efa.chosen
            row["efa_sc"] = int(efa.chosen == spec.G)
            if sweep.chosen == spec.G:
                fit = sweep.fits[sweep.candidates.index(spec.G)]
                row["mse_lambda"] = mse_lambda(fit.params.Lambda, truth.Lambda_star)
                row["emc"] = emc(fit.structure, truth.labels, spec.G)
                row["acc"] = acc(fit.structure, truth.labels, spec.G)
        else:
            fit = multi_start_fit(data, hierarchy_constraint_pairs(truth.hierarchy), cfg)
            row["emc"], row["acc"] = hier_match_metrics(fit.membership, truth)
            row["mse_lambda"] = _hier_mse(fit.params.Lambda, truth, truth.evaluated)
    except AllStartsFailed as exc:
        row["failed"] = True
        row["error"] = str(exc)
    return row


def _hier_mse(Lambda_hat, truth: TruthModel, keep) -> float:
    # label freedom is the tree's automorphism group, sign freedom per column
    A = np.asarray(Lambda_hat)[keep]
    B = truth.Lambda_star[keep]
    cost = _column_costs(A, B)
    K = A.shape[1]
    best = min(sum(cost[perm[k], k] for k in range(K)) for perm in tree_automorphisms(truth.hierarchy))
    return float(best / (A.shape[0] * K))


def _replication_task(args):
    return run_replication(*args)


def run_study(spec: StudySpec, replications: int, base_seed: int, config: AlmConfig, n_jobs: int | None = None) -> StudyReport:
    """Run ``replications`` replications of ``spec`` against one fixed truth.

    The report depends only on the arguments: replication ``r`` draws its
    data and its random starts from seeds derived from ``(base_seed, r)``,
    and rows are kept in replication order whatever the scheduling.
    """
    if replications < 0:
        raise ValueError("replications must be non-negative")
    report = StudyReport(spec, replications, base_seed, config.n_starts)
    if replications == 0:
        return report
    truth = truth_for(spec, base_seed)
    tasks = [(spec, truth, rep, base_seed, config) for rep in range(replications)]
    jobs = n_jobs if n_jobs is not None else (config.n_jobs if config.n_jobs is not None else n_threads())
    if jobs > 1 and replications > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, replications)) as pool:
            report.rows = list(pool.map(_replication_task, tasks))
    else:
        report.rows = [_replication_task(t) for t in tasks]
    return report
