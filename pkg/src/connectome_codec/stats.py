"""Exact graph statistics and distribution-level generation metrics.

The four target statistics (edge count, reciprocity, total betweenness,
non-neuronal count) are the non-differentiable ground truth that the
learned surrogate predictors approximate.  Degree, clustering, and
graphlet-orbit descriptors feed the MMD metrics used to score generated
graph sets against held-out references.

Directed statistics (edge count, reciprocity, betweenness) are computed
on A as-is; clustering and orbit counts are computed on the symmetrized
graph A or A^T.  Reciprocity with a zero denominator (no unidirectional
edges) is the ``None`` sentinel, never 0 or NaN.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import InsufficientSamples

N_ORBITS = 15


@dataclass(frozen=True)
class FeatureVector:
    """The four scaled target statistics of one subgraph."""

    edge_count: int
    reciprocity_scaled: float | None  # rho * 1000, None when undefined
    betweenness_scaled: float  # sum of normalized betweenness * 100
    non_neuronal_scaled: float  # padding count * 100

    def reciprocity_defined(self) -> bool:
        return self.reciprocity_scaled is not None

    def as_list(self) -> list[float | None]:
        return [
            float(self.edge_count),
            self.reciprocity_scaled,
            self.betweenness_scaled,
            self.non_neuronal_scaled,
        ]


def _symmetrize(A: np.ndarray) -> np.ndarray:
    S = ((A + A.T) > 0).astype(np.uint8)
    np.fill_diagonal(S, 0)
    return S


def edge_count(A: np.ndarray) -> int:
    return int(np.asarray(A, dtype=np.int64).sum())


def reciprocity(A: np.ndarray) -> float | None:
    """1000 x (unordered reciprocal pairs) / (ordered one-way edges).

    Returns None when the graph has no unidirectional edge (empty or
    fully reciprocal), leaving the ratio undefined.
    """
    A = np.asarray(A, dtype=np.int64)
    both = A & A.T
    numerator = int(np.triu(both, k=1).sum())
    denominator = int((A & (1 - A.T)).sum())
    if denominator == 0:
        return None
    return 1000.0 * numerator / denominator


def total_betweenness(A: np.ndarray) -> float:
    """Sum of per-node directed betweenness, each normalized by
    (n-1)(n-2), scaled by 100.

    All-pairs shortest paths are counted with level-synchronous BFS
    sweeps run for every source at once (Brandes' dependency
    accumulation expressed as matrix products).  Unreachable pairs
    contribute nothing; n < 3 returns 0.
    """
    A = np.asarray(A)
    n = A.shape[0]
    if n < 3:
        return 0.0
    Af = A.astype(np.float64)

    # dist[s, v] = BFS depth of v from s (-1 unreached); sigma = path counts.
    dist = np.full((n, n), -1, dtype=np.int64)
    sigma = np.zeros((n, n), dtype=np.float64)
    np.fill_diagonal(dist, 0)
    np.fill_diagonal(sigma, 1.0)
    frontier = np.eye(n, dtype=bool)
    depth = 0
    while frontier.any():
        depth += 1
        reach = (sigma * frontier) @ Af
        new = (reach > 0) & (dist < 0)
        sigma[new] = reach[new]
        dist[new] = depth
        frontier = new

    # Walk depths backwards; a predecessor of w sits exactly one level up.
    delta = np.zeros((n, n), dtype=np.float64)
    safe_sigma = np.where(sigma > 0, sigma, 1.0)
    for d in range(int(dist.max()), 0, -1):
        coef = np.where(dist == d, (1.0 + delta) / safe_sigma, 0.0)
        contrib = coef @ Af.T
        delta += np.where(dist == d - 1, sigma * contrib, 0.0)
    np.fill_diagonal(delta, 0.0)

    per_node = delta.sum(axis=0)
    return float(per_node.sum() / ((n - 1) * (n - 2)) * 100.0)


def non_neuronal_count(labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    return 100.0 * int(np.count_nonzero(labels == 4))


def feature_vector(sample) -> FeatureVector:
    A = sample.adjacency
    return FeatureVector(
        edge_count=edge_count(A),
        reciprocity_scaled=reciprocity(A),
        betweenness_scaled=total_betweenness(A),
        non_neuronal_scaled=non_neuronal_count(sample.labels),
    )


def degree_histogram(A: np.ndarray, mode: str = "out") -> np.ndarray:
    """Counts of nodes per degree value; length n for in/out, 2n-1 for total."""
    A = np.asarray(A, dtype=np.int64)
    n = A.shape[0]
    if mode == "out":
        deg, length = A.sum(axis=1), n
    elif mode == "in":
        deg, length = A.sum(axis=0), n
    elif mode == "total":
        deg, length = A.sum(axis=0) + A.sum(axis=1), 2 * n - 1
    else:
        raise ValueError(f"mode must be in/out/total, got {mode!r}")
    return np.bincount(deg, minlength=length)


def clustering_values(A: np.ndarray) -> np.ndarray:
    """Per-node local clustering C_i = 2 T_i / (k_i (k_i - 1)) on the
    symmetrized graph; 0 when the degree is below 2."""
    S = _symmetrize(A).astype(np.float64)
    k = S.sum(axis=1)
    triangles2 = np.einsum("ij,jk,ki->i", S, S, S)  # = 2 * T_i
    denom = k * (k - 1.0)
    out = np.zeros_like(k)
    ok = denom > 0
    out[ok] = triangles2[ok] / denom[ok]
    return out


@lru_cache(maxsize=8)
def _subsets(n: int, k: int) -> tuple[np.ndarray, ...]:
    """Column arrays of all k-subsets of range(n), cached per (n, k)."""
    count = 1
    for t in range(k):
        count = count * (n - t) // (t + 1)
    flat = np.fromiter(
        itertools.chain.from_iterable(itertools.combinations(range(n), k)),
        dtype=np.int64,
        count=count * k,
    )
    cols = flat.reshape(-1, k)
    return tuple(np.ascontiguousarray(cols[:, t]) for t in range(k))


def _connected4(M: np.ndarray) -> bool:
    seen = {0}
    stack = [0]
    while stack:
        v = stack.pop()
        for u in range(4):
            if M[v, u] and u not in seen:
                seen.add(u)
                stack.append(u)
    return len(seen) == 4


def _build_lut3() -> np.ndarray:
    """Orbit of each position in a 3-subset, indexed by the 3-bit edge
    code (ij, ik, jk); -1 when the induced graph is not connected."""
    lut = np.full((8, 3), -1, dtype=np.int8)
    for code in range(8):
        b_ij, b_ik, b_jk = (code >> 2) & 1, (code >> 1) & 1, code & 1
        m = b_ij + b_ik + b_jk
        deg = (b_ij + b_ik, b_ij + b_jk, b_ik + b_jk)
        if m == 2:  # path: ends are orbit 1, middle orbit 2
            lut[code] = [1 if d == 1 else 2 for d in deg]
        elif m == 3:  # triangle
            lut[code] = [3, 3, 3]
    return lut


def _build_lut4() -> np.ndarray:
    """Orbit of each position in a 4-subset, indexed by the 6-bit edge
    code (ij, ik, il, jk, jl, kl).  Each connected 4-node graph type is
    fixed by its edge count and maximum degree; the orbit within it is
    fixed by the node's degree."""
    pairs = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
    lut = np.full((64, 4), -1, dtype=np.int8)
    for code in range(64):
        bits = [(code >> (5 - t)) & 1 for t in range(6)]
        M = np.zeros((4, 4), dtype=np.int64)
        for bit, (a, b) in zip(bits, pairs):
            M[a, b] = M[b, a] = bit
        m = sum(bits)
        if m < 3 or not _connected4(M):
            continue
        deg = M.sum(axis=1)
        if m == 3:
            by_deg = {1: 6, 3: 7} if deg.max() == 3 else {1: 4, 2: 5}  # claw | path
        elif m == 4:
            by_deg = {2: 8} if deg.max() == 2 else {1: 9, 2: 10, 3: 11}  # cycle | paw
        elif m == 5:
            by_deg = {2: 12, 3: 13}  # diamond
        else:
            by_deg = {3: 14}  # clique
        lut[code] = [by_deg[d] for d in deg]
    return lut


_LUT3 = _build_lut3()
_LUT4 = _build_lut4()


def orbit_counts(A: np.ndarray) -> np.ndarray:
    """Per-node counts over the 15 orbits of connected graphlets on 2-4
    nodes, by exhaustive enumeration of induced subgraphs of the
    symmetrized graph.  Orbit 0 is the degree."""
    S = _symmetrize(A)
    n = S.shape[0]
    counts = np.zeros((n, N_ORBITS), dtype=np.int64)
    counts[:, 0] = S.sum(axis=1)
    flat = S.reshape(-1)

    if n >= 3:
        i, j, k = _subsets(n, 3)
        code = (flat[i * n + j] << 2) | (flat[i * n + k] << 1) | flat[j * n + k]
        orb = _LUT3[code]
        for pos, nodes in enumerate((i, j, k)):
            o = orb[:, pos]
            valid = o >= 0
            if valid.any():
                keys = nodes[valid] * N_ORBITS + o[valid]
                counts += np.bincount(keys, minlength=n * N_ORBITS).reshape(n, N_ORBITS)

    if n >= 4:
        i, j, k, l = _subsets(n, 4)
        code = (
            (flat[i * n + j].astype(np.int64) << 5)
            | (flat[i * n + k] << 4)
            | (flat[i * n + l] << 3)
            | (flat[j * n + k] << 2)
            | (flat[j * n + l] << 1)
            | flat[k * n + l]
        )
        orb = _LUT4[code]
        for pos, nodes in enumerate((i, j, k, l)):
            o = orb[:, pos]
            valid = o >= 0
            if valid.any():
                keys = nodes[valid] * N_ORBITS + o[valid]
                counts += np.bincount(keys, minlength=n * N_ORBITS).reshape(n, N_ORBITS)

    return counts


def _as_matrix(samples) -> np.ndarray:
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr


def _sq_dists(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    d = np.sum(X * X, axis=1)[:, None] + np.sum(Y * Y, axis=1)[None, :] - 2.0 * (X @ Y.T)
    return np.maximum(d, 0.0)


def median_heuristic_bandwidth(set_a, set_b) -> float:
    """Median positive pairwise distance over the pooled samples.

    Pooling both sets keeps the bandwidth, and thus the MMD, symmetric
    in its two arguments.  Falls back to 1.0 when all points coincide.
    """
    Z = np.concatenate([_as_matrix(set_a), _as_matrix(set_b)], axis=0)
    d = np.sqrt(_sq_dists(Z, Z))
    vals = d[np.triu_indices(len(Z), k=1)]
    vals = vals[vals > 0]
    return float(np.median(vals)) if vals.size else 1.0


def mmd(set_a, set_b, kernel_bandwidth: float | None = None,
        estimator: str = "biased") -> float:
    """Empirical squared maximum mean discrepancy under a Gaussian
    kernel k(x, y) = exp(-||x - y||^2 / (2 sigma^2)).

    `kernel_bandwidth=None` uses the pooled median heuristic.  The
    biased estimator averages all kernel pairs; the unbiased one drops
    the diagonal of the within-set terms and needs >= 2 samples a side.
    Histogram inputs should be normalized to distributions by the
    caller before kerneling.
    """
    X, Y = _as_matrix(set_a), _as_matrix(set_b)
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    if estimator not in ("biased", "unbiased"):
        raise ValueError(f"estimator must be biased or unbiased, got {estimator!r}")
    m, l = len(X), len(Y)
    need = 2 if estimator == "unbiased" else 1
    if m < need or l < need:
        raise InsufficientSamples(f"{estimator} estimator needs >= {need} samples per side")

    sigma = median_heuristic_bandwidth(X, Y) if kernel_bandwidth is None else float(kernel_bandwidth)
    gamma = 1.0 / (2.0 * sigma * sigma)
    Kxx = np.exp(-gamma * _sq_dists(X, X))
    Kyy = np.exp(-gamma * _sq_dists(Y, Y))
    Kxy = np.exp(-gamma * _sq_dists(X, Y))

    if estimator == "biased":
        return float(Kxx.mean() + Kyy.mean() - 2.0 * Kxy.mean())
    xx = (Kxx.sum() - np.trace(Kxx)) / (m * (m - 1))
    yy = (Kyy.sum() - np.trace(Kyy)) / (l * (l - 1))
    return float(xx + yy - 2.0 * Kxy.mean())


@dataclass(frozen=True)
class MmdReport:
    deg_mmd: float
    clus_mmd: float
    orbit_mmd: float

    def as_dict(self) -> dict[str, float]:
        return {"deg_mmd": self.deg_mmd, "clus_mmd": self.clus_mmd, "orbit_mmd": self.orbit_mmd}


def graph_descriptors(sample, degree_mode: str = "out",
                      exclude_isolated: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One graph's (degree histogram, clustering histogram, mean orbit
    vector) descriptor triple.  Histograms are normalized to sum 1.

    `exclude_isolated` drops nodes with zero symmetrized degree from
    every descriptor (padding nodes in particular).
    """
    A = np.asarray(sample.adjacency)
    n = A.shape[0]
    present = np.ones(n, dtype=bool)
    if exclude_isolated:
        present = _symmetrize(A).sum(axis=1) > 0

    if degree_mode == "out":
        deg, length = A.sum(axis=1, dtype=np.int64), n
    elif degree_mode == "in":
        deg, length = A.sum(axis=0, dtype=np.int64), n
    else:
        deg, length = A.sum(axis=0, dtype=np.int64) + A.sum(axis=1, dtype=np.int64), 2 * n - 1
    deg_hist = np.bincount(deg[present], minlength=length).astype(np.float64)
    deg_hist /= max(deg_hist.sum(), 1.0)

    cv = clustering_values(A)[present]
    clus_hist, _ = np.histogram(cv, bins=100, range=(0.0, 1.0))
    clus_hist = clus_hist.astype(np.float64)
    clus_hist /= max(clus_hist.sum(), 1.0)

    orb = orbit_counts(A)[present]
    orb_mean = orb.mean(axis=0) if len(orb) else np.zeros(N_ORBITS)

    return deg_hist, clus_hist, orb_mean.astype(np.float64)


def generation_mmd_report(generated, reference, kernel_bandwidth: float | None = None,
                          estimator: str = "biased", degree_mode: str = "out",
                          exclude_isolated: bool = False) -> MmdReport:
    """Three MMD values between generated and reference sets, one per
    descriptor family (degree / clustering / orbit)."""
    if not generated or not reference:
        raise InsufficientSamples("both sample lists must be nonempty")
    gen = [graph_descriptors(s, degree_mode, exclude_isolated) for s in generated]
    ref = [graph_descriptors(s, degree_mode, exclude_isolated) for s in reference]
    values = []
    for part in range(3):
        ga = np.stack([d[part] for d in gen])
        rb = np.stack([d[part] for d in ref])
        values.append(mmd(ga, rb, kernel_bandwidth=kernel_bandwidth, estimator=estimator))
    return MmdReport(*values)
