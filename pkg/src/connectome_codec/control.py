"""Controlled generation in latent space.

Two routes to "a graph with statistic y": a white-box dynamic program
over the binned Shapley table (pick one bin per latent dimension so the
summed contributions land on the target), and a black-box CMA-ES search
matching a concrete target graph either through its full adjacency or
through its degree sequences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .data import SubgraphSample
from .errors import EmptyTable, GridOverflow, NoReachableCell
from .explain import ShapTable
from .metrics import all_zeros_accuracy, edge_accuracy, edge_auc
from .model import GraphCodec, discretize

DEFAULT_GRID_CELLS = 2000


@dataclass
class DpTable:
    """Reachability layers of the bin-assignment dynamic program.

    ``layers[i]`` maps an integer contribution sum j (in grid cells) to
    the backpointer (k, j_prev): bin k chosen for dimension i-1 from the
    predecessor sum j_prev.  Layer 0 is {0: None}.  The update in the
    source algorithm stores only k, which cannot reconstruct paths when
    predecessors collide, so the predecessor index is stored alongside;
    the first writer of a cell wins, deterministically.
    """

    layers: list[dict[int, tuple[int, int] | None]]
    resolution: float
    contributions: list[dict[int, int]]  # per dimension: bin -> cells
    bin_centers: np.ndarray  # (d, bins)

    @property
    def n_dims(self) -> int:
        return len(self.layers) - 1

    def reachable_sums(self) -> list[int]:
        return sorted(self.layers[-1].keys())


def _dp_forward(contribs: list[dict[int, int]],
                bounds: tuple[int, int] | None) -> list[dict[int, tuple[int, int] | None]]:
    layers: list[dict[int, tuple[int, int] | None]] = [{0: None}]
    for i, bins in enumerate(contribs):
        nxt: dict[int, tuple[int, int]] = {}
        for j in layers[i]:
            for k in sorted(bins):
                j2 = j + bins[k]
                if bounds is not None and not bounds[0] <= j2 <= bounds[1]:
                    raise GridOverflow(
                        f"sum {j2} leaves grid bounds {bounds} at dimension {i}")
                if j2 not in nxt:
                    nxt[j2] = (k, j)
        layers.append(nxt)
    return layers


def dp_build(table: ShapTable, grid_resolution: float | None = None,
             bounds: tuple[int, int] | None = None) -> DpTable:
    """Forward reachability over dimensions of the binned contributions.

    Each populated bin's mean contribution is rounded to integer grid
    cells; cell (i, j + round(shap[i][k]/resolution)) becomes reachable
    from (i-1, j).  The default resolution spans the exact reachable
    range with DEFAULT_GRID_CELLS cells.  Explicit ``bounds`` that a sum
    escapes are auto-widened to the exact range once, then GridOverflow
    propagates.
    """
    populated = table.populated()
    if not populated.any():
        raise EmptyTable("no populated cell in the table")
    per_dim_values: list[dict[int, float]] = []
    for i in range(table.n_dims):
        ks = np.flatnonzero(populated[i])
        if ks.size == 0:
            raise EmptyTable(f"dimension {i} has no populated bin")
        per_dim_values.append({int(k): float(table.values[i, k]) for k in ks})

    if grid_resolution is None:
        lo = sum(min(v.values()) for v in per_dim_values)
        hi = sum(max(v.values()) for v in per_dim_values)
        grid_resolution = (hi - lo) / DEFAULT_GRID_CELLS if hi > lo else 1.0
    contribs = [
        {k: int(round(value / grid_resolution)) for k, value in v.items()}
        for v in per_dim_values
    ]

    try:
        layers = _dp_forward(contribs, bounds)
    except GridOverflow:
        exact = (sum(min(c.values()) for c in contribs),
                 sum(max(c.values()) for c in contribs))
        layers = _dp_forward(contribs, exact)
    return DpTable(layers=layers, resolution=float(grid_resolution),
                   contributions=contribs, bin_centers=table.bin_centers)


@dataclass
class DpGeneration:
    z: np.ndarray
    bins: list[int]
    dp_prediction: float  # base + reached cell value
    achieved_prediction: float  # surrogate prediction at z (dp_prediction if no predictor)
    target: float
    gap: float  # (reached - requested) in statistic units


def dp_generate(dp: DpTable, base_value: float, target_y: float,
                predictor=None) -> DpGeneration:
    """Backtrack the reachable cell nearest the target.

    Bin indices map to bin-center z values (zero contribution elsewhere
    is impossible: every dimension commits to its chosen bin).  Targets
    beyond the reachable range clamp to the extreme cell, with the gap
    reported.  ``predictor`` (vectorized z -> prediction), when given,
    supplies the achieved prediction at the returned z.
    """
    final = dp.layers[-1]
    if not final:
        raise NoReachableCell("dynamic program has no reachable final cell")
    j_star = int(round((target_y - base_value) / dp.resolution))
    j0 = min(final.keys(), key=lambda j: (abs(j - j_star), j))

    ks: list[int] = []
    j = j0
    for i in range(dp.n_dims, 0, -1):
        k, j_prev = dp.layers[i][j]
        ks.append(k)
        j = j_prev
    ks.reverse()

    z = np.array([dp.bin_centers[i, k] for i, k in enumerate(ks)], dtype=np.float64)
    dp_prediction = base_value + j0 * dp.resolution
    achieved = dp_prediction
    if predictor is not None:
        achieved = float(np.asarray(predictor(z[None, :])).reshape(-1)[0])
    return DpGeneration(z=z, bins=ks, dp_prediction=dp_prediction,
                        achieved_prediction=achieved, target=float(target_y),
                        gap=(j0 - j_star) * dp.resolution)


def enumerate_assignment_sums(dp: DpTable) -> set[int]:
    """Brute-force check oracle: all assignment sums over the same
    integer contributions.  Exponential; intended for tiny tables."""
    sums = {0}
    for bins in dp.contributions:
        sums = {j + c for j in sums for c in bins.values()}
    return sums


@dataclass
class CmaState:
    mean: np.ndarray
    C: np.ndarray
    sigma_step: float
    p_c: np.ndarray
    p_sigma: np.ndarray
    generation: int = 0
    degenerate_events: int = 0  # covariance re-regularizations so far


def cmaes_init(d: int, mean: np.ndarray | None = None, sigma_step: float = 1.0) -> CmaState:
    return CmaState(
        mean=np.zeros(d) if mean is None else np.asarray(mean, dtype=np.float64).copy(),
        C=np.eye(d),
        sigma_step=float(sigma_step),
        p_c=np.zeros(d),
        p_sigma=np.zeros(d),
    )


def default_population(d: int) -> int:
    return 4 + int(math.floor(3 * math.log(d)))


def default_weights(lam: int, mu: int | None = None) -> np.ndarray:
    mu = lam // 2 if mu is None else mu
    w = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    return w / w.sum()


def _expected_norm(d: int) -> float:
    return math.sqrt(d) * (1.0 - 1.0 / (4.0 * d) + 1.0 / (21.0 * d * d))


def cmaes_step(state: CmaState, fitness, lam: int | None = None, mu: int | None = None,
               weights: np.ndarray | None = None,
               rng: np.random.Generator | None = None) -> tuple[CmaState, np.ndarray, float]:
    """One generation: sample, rank (minimization), recombine, update
    paths, covariance (rank-1 + rank-mu), and step size.

    Returns (new state, best sampled point, its fitness).  A covariance
    eigenvalue below 1e-14 triggers re-regularization by adding a small
    multiple of the identity; the event is counted on the state, not
    raised.
    """
    d = len(state.mean)
    lam = default_population(d) if lam is None else lam
    mu = lam // 2 if mu is None else mu
    if not lam >= mu >= 1:
        raise ValueError(f"need lam >= mu >= 1, got lam={lam}, mu={mu}")
    w = default_weights(lam, mu) if weights is None else np.asarray(weights, dtype=np.float64)
    if len(w) != mu or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be mu nonnegative values summing to 1")
    rng = np.random.default_rng() if rng is None else rng

    mu_eff = 1.0 / float(np.sum(w * w))
    c_sigma = (mu_eff + 2.0) / (d + mu_eff + 5.0)
    d_sigma = 1.0 + 2.0 * max(0.0, math.sqrt((mu_eff - 1.0) / (d + 1.0)) - 1.0) + c_sigma
    c_c = (4.0 + mu_eff / d) / (d + 4.0 + 2.0 * mu_eff / d)
    c_1 = 2.0 / ((d + 1.3) ** 2 + mu_eff)
    c_mu = min(1.0 - c_1, 2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((d + 2.0) ** 2 + mu_eff))

    C = 0.5 * (state.C + state.C.T)
    vals, B = np.linalg.eigh(C)
    degenerate = state.degenerate_events
    if vals.min() < 1e-14:
        C = C + 1e-12 * np.eye(d)
        vals, B = np.linalg.eigh(C)
        vals = np.clip(vals, 1e-20, None)
        degenerate += 1
    D = np.sqrt(vals)

    Z = rng.standard_normal((lam, d))
    Y = Z @ (B * D).T  # rows: y_i = B diag(D) z_i
    X = state.mean + state.sigma_step * Y
    f = np.array([float(fitness(x)) for x in X])
    order = np.argsort(f, kind="stable")
    best_x, best_f = X[order[0]].copy(), float(f[order[0]])

    Xel = X[order[:mu]]
    Yel = Y[order[:mu]]
    mean_new = w @ Xel
    y_w = w @ Yel  # (mean_new - mean) / sigma_step

    c_invsqrt_yw = B @ ((B.T @ y_w) / D)
    p_sigma = (1.0 - c_sigma) * state.p_sigma + math.sqrt(
        c_sigma * (2.0 - c_sigma) * mu_eff) * c_invsqrt_yw
    norm_ps = float(np.linalg.norm(p_sigma))
    e_norm = _expected_norm(d)
    denom = math.sqrt(1.0 - (1.0 - c_sigma) ** (2 * (state.generation + 1)))
    h_sigma = 1.0 if norm_ps / denom < (1.4 + 2.0 / (d + 1.0)) * e_norm else 0.0

    p_c = (1.0 - c_c) * state.p_c + h_sigma * math.sqrt(c_c * (2.0 - c_c) * mu_eff) * y_w
    rank_one = np.outer(p_c, p_c)
    rank_mu = (Yel.T * w) @ Yel
    C_new = ((1.0 - c_1 - c_mu) * C
             + c_1 * (rank_one + (1.0 - h_sigma) * c_c * (2.0 - c_c) * C)
             + c_mu * rank_mu)
    C_new = 0.5 * (C_new + C_new.T)

    sigma_new = state.sigma_step * math.exp((c_sigma / d_sigma) * (norm_ps / e_norm - 1.0))

    new_state = CmaState(mean=mean_new, C=C_new, sigma_step=sigma_new,
                         p_c=p_c, p_sigma=p_sigma,
                         generation=state.generation + 1,
                         degenerate_events=degenerate)
    return new_state, best_x, best_f


def cmaes_optimize(fitness, d: int, generations: int, seed: int = 0,
                   sigma0: float = 1.0, mean0: np.ndarray | None = None,
                   lam: int | None = None, mu: int | None = None,
                   tol: float | None = None) -> tuple[np.ndarray, float, list[float], CmaState]:
    """Run cmaes_step for up to ``generations``; returns the best-so-far
    point, its fitness, the per-generation best-so-far trace, and the
    final state."""
    rng = np.random.default_rng(seed)
    state = cmaes_init(d, mean=mean0, sigma_step=sigma0)
    best_x = state.mean.copy()
    best_f = math.inf
    trace: list[float] = []
    for _ in range(generations):
        state, x, fval = cmaes_step(state, fitness, lam=lam, mu=mu, rng=rng)
        if fval < best_f:
            best_f = fval
            best_x = x
        trace.append(best_f)
        if tol is not None and best_f < tol:
            break
    return best_x, best_f, trace, state


@dataclass
class CmaesGenConfig:
    generations: int = 200
    seed: int = 0
    sigma0: float = 1.0
    lam: int | None = None
    mu: int | None = None
    tol: float | None = None


def _sorted_degrees(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    A = np.asarray(A, dtype=np.int64)
    return np.sort(A.sum(axis=0)), np.sort(A.sum(axis=1))


def cmaes_generate(decoder: GraphCodec, target: SubgraphSample, objective: str = "full_adjacency",
                   cfg: CmaesGenConfig | None = None) -> tuple[np.ndarray, dict]:
    """Search latent space for a graph matching ``target``.

    full_adjacency minimizes mean BCE between the target adjacency and
    decoded edge probabilities; degree_stats minimizes the L1 distance
    between sorted in/out degree sequences of the discretized decode and
    the target's.  Metrics report rank-based AUC (None if the target has
    a single class), thresholded accuracy, and the all-zeros baseline
    accuracy for context.
    """
    cfg = cfg or CmaesGenConfig()
    d = decoder.config.latent_dim
    dtype = next(decoder.parameters()).dtype
    A_target = np.asarray(target.adjacency, dtype=np.float64)
    A_target_t = torch.as_tensor(A_target, dtype=dtype)
    kappa = decoder.config.threshold
    tgt_in, tgt_out = _sorted_degrees(A_target)

    if objective == "full_adjacency":
        def fitness(z: np.ndarray) -> float:
            with torch.no_grad():
                dg = decoder.decode_tensors(torch.as_tensor(z[None, :], dtype=dtype))
                probs = dg.edge_probs[0].clamp(1e-7, 1.0 - 1e-7)
                bce = torch.nn.functional.binary_cross_entropy(probs, A_target_t)
            return float(bce)
    elif objective == "degree_stats":
        def fitness(z: np.ndarray) -> float:
            with torch.no_grad():
                dg = decoder.decode_tensors(torch.as_tensor(z[None, :], dtype=dtype))
            sample = discretize(
                type(dg)(edge_probs=dg.edge_probs[0], node_scores=dg.node_scores[0]), kappa)
            gen_in, gen_out = _sorted_degrees(sample.adjacency)
            return float(np.abs(gen_in - tgt_in).sum() + np.abs(gen_out - tgt_out).sum())
    else:
        raise ValueError(f"objective must be full_adjacency or degree_stats, got {objective!r}")

    best_z, best_f, trace, state = cmaes_optimize(
        fitness, d, cfg.generations, seed=cfg.seed, sigma0=cfg.sigma0,
        lam=cfg.lam, mu=cfg.mu, tol=cfg.tol)

    with torch.no_grad():
        dg = decoder.decode_tensors(torch.as_tensor(best_z[None, :], dtype=dtype))
    probs = dg.edge_probs[0].cpu().numpy()
    metrics = {
        "objective": objective,
        "generations": len(trace),
        "best_fitness": best_f,
        "best_fitness_trace": trace,
        "final_auc": edge_auc(A_target, probs),
        "final_acc": edge_accuracy(A_target, probs, kappa),
        "all_zeros_acc": all_zeros_accuracy(A_target),
        "degenerate_events": state.degenerate_events,
    }
    return best_z, metrics
