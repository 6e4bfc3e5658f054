"""Shapley attribution of latent dimensions to surrogate predictions.

Attribution always runs through the composite differentiable map
z -> decode -> surrogate (continuous outputs); the exact statistics are
never on this path.  The binned ShapTable summarizing per-dimension
contributions is the input of the dynamic-program generator.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import stats
from .errors import EmptyTable
from .model import GraphCodec, discretize
from .surrogate import SurrogateSet

EXACT_MODE_MAX_DIM = 10


@dataclass
class ShapMatrix:
    """Per-sample, per-dimension contributions for one target feature.

    Efficiency holds row-wise: sum_j phi[s, j] equals
    predictions[s] - base_value up to estimator tolerance.
    """

    phi: np.ndarray  # (n_samples, d)
    base_value: float
    predictions: np.ndarray  # (n_samples,) model output at each sample
    mode: str  # "exact" or "sampled"


@dataclass
class ShapTable:
    """Mean contribution per (dimension, bin), binned over [-sigma_i, +sigma_i]."""

    values: np.ndarray  # (d, bins), NaN where unpopulated
    counts: np.ndarray  # (d, bins) samples per cell
    bin_centers: np.ndarray  # (d, bins) representative z value per cell
    sigma: np.ndarray  # (d,) per-dimension std of the z samples
    min_count: int = 1

    def populated(self) -> np.ndarray:
        return self.counts >= self.min_count

    @property
    def n_dims(self) -> int:
        return self.values.shape[0]

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]

    def to_json_obj(self) -> dict:
        return {
            "values": [[None if math.isnan(v) else v for v in row] for row in self.values.tolist()],
            "counts": self.counts.tolist(),
            "bin_centers": self.bin_centers.tolist(),
            "sigma": self.sigma.tolist(),
            "min_count": self.min_count,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ShapTable":
        values = np.array([[np.nan if v is None else v for v in row] for row in obj["values"]],
                          dtype=np.float64)
        return cls(
            values=values,
            counts=np.asarray(obj["counts"], dtype=np.int64),
            bin_centers=np.asarray(obj["bin_centers"], dtype=np.float64),
            sigma=np.asarray(obj["sigma"], dtype=np.float64),
            min_count=int(obj["min_count"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_obj()))

    @classmethod
    def load(cls, path: str | Path) -> "ShapTable":
        return cls.from_json_obj(json.loads(Path(path).read_text()))


def _composite(x: np.ndarray, background: np.ndarray, member: np.ndarray) -> np.ndarray:
    """Points taking x on `member` dimensions and each background row elsewhere.

    member: (k, d) bool -> output (k * nb, d), background-major within
    each mask row.
    """
    nb = len(background)
    k, d = member.shape
    pts = np.broadcast_to(background, (k, nb, d)).copy()
    mask = np.broadcast_to(member[:, None, :], (k, nb, d))
    pts[mask] = np.broadcast_to(x, (k, nb, d))[mask]
    return pts.reshape(k * nb, d)


def _exact_shap_one(g, x: np.ndarray, background: np.ndarray, chunk: int) -> np.ndarray:
    d = len(x)
    n_masks = 1 << d
    member = np.zeros((n_masks, d), dtype=bool)
    for j in range(d):
        member[:, j] = (np.arange(n_masks) >> j) & 1
    pts = _composite(x, background, member)
    vals = np.concatenate([g(pts[i:i + chunk]) for i in range(0, len(pts), chunk)])
    v = vals.reshape(n_masks, len(background)).mean(axis=1)

    fact = [math.factorial(i) for i in range(d + 1)]
    sizes = np.array([bin(m).count("1") for m in range(n_masks)], dtype=np.int64)
    weight_by_size = np.array(
        [fact[s] * fact[d - s - 1] / fact[d] for s in range(d)], dtype=np.float64
    )
    phi = np.zeros(d)
    masks = np.arange(n_masks)
    for j in range(d):
        without = masks[(masks >> j) & 1 == 0]
        s = sizes[without]
        phi[j] = np.sum(weight_by_size[s] * (v[without | (1 << j)] - v[without]))
    return phi


def _sampled_shap_one(g, x: np.ndarray, background: np.ndarray, n_permutations: int,
                      rng: np.random.Generator, chunk: int) -> np.ndarray:
    d = len(x)
    n_pairs = max(1, n_permutations // 2)
    phi = np.zeros(d)
    nb = len(background)
    for _ in range(n_pairs):
        perm = rng.permutation(d)
        for order in (perm, perm[::-1]):  # antithetic pair
            member = np.zeros((d + 1, d), dtype=bool)
            for s, dim in enumerate(order):
                member[s + 1:, dim] = True
            pts = _composite(x, background, member)
            vals = np.concatenate([g(pts[i:i + chunk]) for i in range(0, len(pts), chunk)])
            v = vals.reshape(d + 1, nb).mean(axis=1)
            phi[order] += np.diff(v)
    return phi / (2 * n_pairs)


def shap_values(g, samples, background, n_coalitions: int = 256,
                mode: str | None = None, seed: int = 0, chunk: int = 4096) -> ShapMatrix:
    """Shapley attribution of each input dimension of ``g``.

    ``g`` must accept a (k, d) array and return (k,) outputs.  Coalition
    values are estimated as the mean of g over background rows filling
    the absent dimensions.  Mode "exact" enumerates all subsets (d <= 10
    by default); "sampled" uses permutation sampling with antithetic
    pairs, ``n_coalitions`` permutations per sample.  Efficiency
    (contributions summing to prediction minus base) is asserted on
    every call at the estimator's tolerance.
    """
    X = np.asarray(samples, dtype=np.float64)
    B = np.asarray(background, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if B.ndim == 1:
        B = B[None, :]
    if B.size == 0:
        raise ValueError("background must be nonempty")
    d = X.shape[1]
    if mode is None:
        mode = "exact" if d <= EXACT_MODE_MAX_DIM else "sampled"

    base_value = float(np.mean(np.concatenate(
        [g(B[i:i + chunk]) for i in range(0, len(B), chunk)])))
    predictions = np.concatenate([g(X[i:i + chunk]) for i in range(0, len(X), chunk)])
    rng = np.random.default_rng(seed)

    phi = np.zeros_like(X)
    for s in range(len(X)):
        if mode == "exact":
            phi[s] = _exact_shap_one(g, X[s], B, chunk)
        else:
            phi[s] = _sampled_shap_one(g, X[s], B, n_coalitions, rng, chunk)
        gap = abs(phi[s].sum() - (predictions[s] - base_value))
        tol = 1e-6 if mode == "exact" else 0.02 * abs(predictions[s] - base_value) + 1e-3
        assert gap <= tol, f"Shapley efficiency violated: gap {gap:.3e} > tol {tol:.3e}"

    return ShapMatrix(phi=phi, base_value=base_value,
                      predictions=np.asarray(predictions, dtype=np.float64), mode=mode)


def build_shap_table(shap: ShapMatrix, z_samples, bins: int = 11, min_count: int = 1) -> ShapTable:
    """Bucket each dimension's z values into equal-width bins over
    [-sigma_i, +sigma_i] and average the contributions per cell.

    Values beyond +-sigma are clipped into the edge bins.  A dimension
    with zero spread collapses into the center bin.
    """
    z = np.asarray(z_samples, dtype=np.float64)
    if z.shape != shap.phi.shape:
        raise ValueError(f"z samples {z.shape} do not align with phi {shap.phi.shape}")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    n, d = z.shape
    sigma = z.std(axis=0)
    values = np.full((d, bins), np.nan)
    counts = np.zeros((d, bins), dtype=np.int64)
    centers = np.zeros((d, bins))
    for i in range(d):
        # std of identical values can come out as ~1e-17, not exactly 0
        if sigma[i] <= 1e-12 * max(1.0, float(np.abs(z[:, i]).max())):
            sigma[i] = 0.0
            idx = np.full(n, bins // 2)
        else:
            width = 2.0 * sigma[i] / bins
            idx = np.clip(((z[:, i] + sigma[i]) // width).astype(np.int64), 0, bins - 1)
            centers[i] = -sigma[i] + (np.arange(bins) + 0.5) * 2.0 * sigma[i] / bins
        counts[i] = np.bincount(idx, minlength=bins)
        sums = np.bincount(idx, weights=shap.phi[:, i], minlength=bins)
        ok = counts[i] > 0
        values[i, ok] = sums[ok] / counts[i, ok]
    table = ShapTable(values=values, counts=counts, bin_centers=centers,
                      sigma=sigma, min_count=min_count)
    if not table.populated().any():
        raise EmptyTable(f"no cell reached min_count={min_count}")
    return table


def feature_fn(name: str):
    """Exact-statistic selector by feature name, in surrogate output units
    (reciprocity is the raw count ratio, not the x1000 report scale, and
    may yield None)."""
    def _raw_reciprocity(s):
        rho = stats.reciprocity(s.adjacency)
        return None if rho is None else rho / 1000.0

    table = {
        "edge_count": lambda s: float(stats.edge_count(s.adjacency)),
        "reciprocity": _raw_reciprocity,
        "betweenness": lambda s: stats.total_betweenness(s.adjacency),
        "non_neuronal": lambda s: stats.non_neuronal_count(s.labels),
    }
    if name not in table:
        raise ValueError(f"unknown feature {name!r}; expected one of {sorted(table)}")
    return table[name]


def surrogate_predictor(decoder: GraphCodec, sset: SurrogateSet, feature: str,
                        chunk: int = 512):
    """Vectorized z -> decode -> surrogate map for attribution."""
    dtype = next(decoder.parameters()).dtype

    def g(zs: np.ndarray) -> np.ndarray:
        zs = np.atleast_2d(np.asarray(zs))
        outs = []
        with torch.no_grad():
            for start in range(0, len(zs), chunk):
                zt = torch.as_tensor(zs[start:start + chunk], dtype=dtype)
                dg = decoder.decode_tensors(zt)
                outs.append(sset.predict(feature, dg).cpu().numpy())
        return np.concatenate(outs).astype(np.float64)

    return g


def dimension_sweep(decoder: GraphCodec, feature, dim: int, grid) -> list[tuple[float, float | None]]:
    """Exact statistic of the discretized decode as one latent dimension
    moves along ``grid`` with all others at zero.  Undefined reciprocity
    shows up as None gaps."""
    fn = feature_fn(feature) if isinstance(feature, str) else feature
    d = decoder.config.latent_dim
    curve = []
    for value in grid:
        z = np.zeros(d)
        z[dim] = value
        sample = discretize(decoder.decode(z), decoder.config.threshold)
        curve.append((float(value), fn(sample)))
    return curve
