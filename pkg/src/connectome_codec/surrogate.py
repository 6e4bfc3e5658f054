"""Differentiable surrogate predictors of the four graph statistics.

Each surrogate reads the decoder's continuous outputs (edge
probabilities, or raw node scores for the padding count) and predicts
one scaled statistic.  They are trained by regression against the exact
statistics of the discretized decodes, and exist so that Shapley
attribution has a differentiable path from the latent code to each
statistic; exact statistics stay the ground truth everywhere else.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import stats
from .errors import InsufficientValidPairs
from .model import (
    LEAKY_SLOPE,
    DecodedGraph,
    GraphCodec,
    discretize,
    init_uniform_fanin,
    load_state_arrays,
    read_tensor_archive,
    state_dict_arrays,
    write_tensor_archive,
)

FEATURE_NAMES = ("edge_count", "reciprocity", "betweenness", "non_neuronal")


@dataclass
class SurrogateConfig:
    n_nodes: int = 100
    n_classes: int = 5
    row_width: int = 32  # width of the per-row linear over A'
    hidden: int = 256
    guard_eps: float = 1e-3  # magnitude floor for the reciprocity denominator
    init_seed: int = 0

    def to_dict(self) -> dict:
        return self.__dict__.copy()

    @classmethod
    def from_dict(cls, d: dict) -> "SurrogateConfig":
        return cls(**d)


class MatrixRegressor(nn.Module):
    """T = LeakyReLU(Linear(A)) row-wise, then a scalar MLP on flatten(T).

    The same architecture serves edge count and betweenness, and is the
    shared core inside the reciprocity ratio.
    """

    def __init__(self, n_nodes: int = 100, row_width: int = 32, hidden: int = 256):
        super().__init__()
        self.row_linear = nn.Linear(n_nodes, row_width)
        self.mlp = nn.Sequential(
            nn.Linear(n_nodes * row_width, hidden),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Linear(hidden, 1),
        )

    def forward(self, A: torch.Tensor) -> torch.Tensor:
        squeeze = A.dim() == 2
        if squeeze:
            A = A.unsqueeze(0)
        t = torch.nn.functional.leaky_relu(self.row_linear(A), negative_slope=LEAKY_SLOPE)
        out = self.mlp(t.reshape(t.shape[0], -1)).squeeze(-1)
        return out.squeeze(0) if squeeze else out


class ReciprocityRatio(nn.Module):
    """Shared-parameter ratio model.

    The numerator input A_two = max(A - 1/2, 0) marks edge mass above
    half; the denominator input A_one = max((A + A^T - 1)/2, 0) marks
    reciprocal mass.  One core scores both; the output is the guarded
    ratio, with the denominator's magnitude floored at ``guard_eps``
    (the sample is flagged, not rejected).
    """

    def __init__(self, n_nodes: int = 100, row_width: int = 32, hidden: int = 256,
                 guard_eps: float = 1e-3):
        super().__init__()
        self.core = MatrixRegressor(n_nodes, row_width, hidden)
        self.guard_eps = guard_eps

    @staticmethod
    def transforms(A: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        a_two = torch.clamp(A - 0.5, min=0.0)
        a_one = torch.clamp((A + A.transpose(-1, -2) - 1.0) / 2.0, min=0.0)
        return a_two, a_one

    def forward_flagged(self, A: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        a_two, a_one = self.transforms(A)
        c_two = self.core(a_two)
        c_one = self.core(a_one)
        flagged = c_one.detach().abs() < self.guard_eps
        denom = torch.where(c_one >= 0, c_one + self.guard_eps, c_one - self.guard_eps)
        return c_two / denom, flagged

    def forward(self, A: torch.Tensor) -> torch.Tensor:
        return self.forward_flagged(A)[0]


class PaddingCountRegressor(nn.Module):
    """Per-node margin reduction sum_t max(X_NN - X_t, 0) over the four
    real classes, then a scalar MLP over the length-N reduction vector."""

    def __init__(self, n_nodes: int = 100, n_classes: int = 5, hidden: int = 256):
        super().__init__()
        self.n_classes = n_classes
        self.mlp = nn.Sequential(
            nn.Linear(n_nodes, hidden),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Linear(hidden, 1),
        )

    @staticmethod
    def reduction(X: torch.Tensor) -> torch.Tensor:
        nn_channel = X[..., -1:]
        real = X[..., :-1]
        return torch.clamp(nn_channel - real, min=0.0).sum(dim=-1)

    def forward(self, X: torch.Tensor) -> torch.Tensor:
        squeeze = X.dim() == 2
        if squeeze:
            X = X.unsqueeze(0)
        out = self.mlp(self.reduction(X)).squeeze(-1)
        return out.squeeze(0) if squeeze else out


@dataclass
class SurrogateSet:
    f_edge_count: MatrixRegressor
    f_betweenness: MatrixRegressor
    f_reciprocity: ReciprocityRatio
    f_non_neuronal: PaddingCountRegressor
    config: SurrogateConfig

    def named(self) -> dict[str, nn.Module]:
        return {
            "edge_count": self.f_edge_count,
            "betweenness": self.f_betweenness,
            "reciprocity": self.f_reciprocity,
            "non_neuronal": self.f_non_neuronal,
        }

    def double(self) -> "SurrogateSet":
        for m in self.named().values():
            m.double()
        return self

    def predict(self, feature: str, decoded) -> torch.Tensor:
        """Apply one surrogate to a decoder output (continuous inputs)."""
        if feature == "non_neuronal":
            return self.f_non_neuronal(decoded.node_scores)
        return self.named()[feature](decoded.edge_probs)


def make_surrogates(config: SurrogateConfig | None = None) -> SurrogateSet:
    cfg = config or SurrogateConfig()
    sset = SurrogateSet(
        f_edge_count=MatrixRegressor(cfg.n_nodes, cfg.row_width, cfg.hidden),
        f_betweenness=MatrixRegressor(cfg.n_nodes, cfg.row_width, cfg.hidden),
        f_reciprocity=ReciprocityRatio(cfg.n_nodes, cfg.row_width, cfg.hidden, cfg.guard_eps),
        f_non_neuronal=PaddingCountRegressor(cfg.n_nodes, cfg.n_classes, cfg.hidden),
        config=cfg,
    )
    for i, m in enumerate(sset.named().values()):
        init_uniform_fanin(m, cfg.init_seed + i)
    return sset


def save_surrogates(path: str | Path, sset: SurrogateSet, extra: dict | None = None) -> None:
    arrays = {}
    for name, module in sset.named().items():
        for pname, arr in state_dict_arrays(module).items():
            arrays[f"{name}.{pname}"] = arr
    write_tensor_archive(path, {"config": sset.config.to_dict(), "kind": "surrogates",
                                "extra": extra or {}}, arrays)


def load_surrogates(path: str | Path) -> tuple[SurrogateSet, dict]:
    header, arrays = read_tensor_archive(path)
    sset = make_surrogates(SurrogateConfig.from_dict(header["config"]))
    for name, module in sset.named().items():
        prefix = f"{name}."
        sub = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        load_state_arrays(module, sub)
    return sset, header


@dataclass
class SurrogateTrainConfig:
    n_draws: int = 1000
    holdout_frac: float = 0.2
    epochs: int = 600
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    min_reciprocity_pairs: int = 20
    # The ratio head optimizes a quotient, so its loss surface is rougher
    # than the plain regressors'; it gets a gentler, longer, clipped fit.
    ratio_lr: float = 3e-4
    ratio_epochs: int = 600
    ratio_grad_clip: float = 1.0

    def to_dict(self) -> dict:
        return self.__dict__.copy()

    @classmethod
    def from_dict(cls, d: dict) -> "SurrogateTrainConfig":
        return cls(**d)


def pearson_r(x: np.ndarray, y: np.ndarray) -> float | None:
    """Pearson correlation; None when either side has zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2 or np.std(x) == 0.0 or np.std(y) == 0.0:
        return None
    return float(np.corrcoef(x, y)[0, 1])


def decode_latents(decoder: GraphCodec, z: np.ndarray,
                   chunk: int = 128) -> tuple[torch.Tensor, torch.Tensor]:
    """Batch-decode latent draws; returns (edge_probs, node_scores) tensors."""
    dtype = next(decoder.parameters()).dtype
    probs, scores = [], []
    with torch.no_grad():
        for start in range(0, len(z), chunk):
            zt = torch.as_tensor(z[start:start + chunk], dtype=dtype)
            dg = decoder.decode_tensors(zt)
            probs.append(dg.edge_probs)
            scores.append(dg.node_scores)
    return torch.cat(probs), torch.cat(scores)


def ground_truth_features(probs: torch.Tensor, scores: torch.Tensor,
                          kappa: float) -> list[stats.FeatureVector]:
    """Exact statistics of each discretized decode."""
    out = []
    for i in range(len(probs)):
        sample = discretize(DecodedGraph(edge_probs=probs[i], node_scores=scores[i]), kappa)
        out.append(stats.feature_vector(sample))
    return out


def _fit_head(module: nn.Module, inputs: torch.Tensor, targets: torch.Tensor,
              cfg: SurrogateTrainConfig, seed: int, *,
              lr: float | None = None, epochs: int | None = None,
              grad_clip: float | None = None) -> None:
    # Start the output head at the target mean so early steps fit
    # structure instead of chasing the offset.
    last_linear = [m for m in module.modules() if isinstance(m, nn.Linear)][-1]
    with torch.no_grad():
        last_linear.bias.fill_(float(targets.mean()))
    opt = torch.optim.Adam(module.parameters(), lr=cfg.lr if lr is None else lr)
    rng = np.random.default_rng(seed)
    n = len(inputs)
    for _ in range(cfg.epochs if epochs is None else epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            pred = module(inputs[idx])
            loss = torch.mean((pred - targets[idx]) ** 2)
            opt.zero_grad()
            loss.backward()
            if grad_clip is not None:
                nn.utils.clip_grad_norm_(module.parameters(), grad_clip)
            opt.step()


def train_surrogates(decoder: GraphCodec, sset: SurrogateSet, cfg: SurrogateTrainConfig,
                     latent_sampler=None) -> tuple[SurrogateSet, dict]:
    """Fit all four surrogates on decoded prior draws.

    z ~ N(0, I) (or ``latent_sampler(n)``), decoded once; the continuous
    decoder outputs are the regression inputs, the exact statistics of
    the discretized decodes are the targets.  Draws with undefined
    reciprocity are excluded from the reciprocity regression only; that
    head is fit on the raw count ratio, not the x1000 report scale.
    Returns the trained set and a Pearson report (top level: holdout
    only; ``fit``: every pair).
    """
    d = decoder.config.latent_dim
    rng = np.random.default_rng(cfg.seed)
    z = latent_sampler(cfg.n_draws) if latent_sampler is not None else rng.standard_normal((cfg.n_draws, d))
    probs, scores = decode_latents(decoder, z)
    truths = ground_truth_features(probs, scores, decoder.config.threshold)

    dtype = next(decoder.parameters()).dtype
    y_edge = torch.tensor([f.edge_count for f in truths], dtype=dtype)
    y_bet = torch.tensor([f.betweenness_scaled for f in truths], dtype=dtype)
    y_nn = torch.tensor([f.non_neuronal_scaled for f in truths], dtype=dtype)
    rec_defined = np.array([f.reciprocity_defined() for f in truths])
    # The quotient head is invariant to rescaling its shared core, so it
    # cannot absorb a unit change the way a plain regressor can.  Fit it on
    # the raw count ratio: x1000 targets force a 1000:1 numerator/denominator
    # asymmetry that pins the denominator at the guard floor.
    y_rec = torch.tensor(
        [f.reciprocity_scaled / 1000.0 if f.reciprocity_defined() else 0.0 for f in truths],
        dtype=dtype)

    n = cfg.n_draws
    n_hold = max(1, int(round(n * cfg.holdout_frac)))
    train_idx = np.arange(0, n - n_hold)
    hold_idx = np.arange(n - n_hold, n)

    rec_train = train_idx[rec_defined[train_idx]]
    if len(rec_train) < cfg.min_reciprocity_pairs:
        raise InsufficientValidPairs(
            f"only {len(rec_train)} defined reciprocity pairs, need {cfg.min_reciprocity_pairs}")

    _fit_head(sset.f_edge_count, probs[train_idx], y_edge[train_idx], cfg, cfg.seed + 11)
    _fit_head(sset.f_betweenness, probs[train_idx], y_bet[train_idx], cfg, cfg.seed + 12)
    _fit_head(sset.f_reciprocity, probs[rec_train], y_rec[rec_train], cfg, cfg.seed + 13,
              lr=cfg.ratio_lr, epochs=cfg.ratio_epochs, grad_clip=cfg.ratio_grad_clip)
    _fit_head(sset.f_non_neuronal, scores[train_idx], y_nn[train_idx], cfg, cfg.seed + 14)

    rec_all = np.where(rec_defined)[0]
    with torch.no_grad():
        p_edge = sset.f_edge_count(probs).numpy()
        p_bet = sset.f_betweenness(probs).numpy()
        p_nn = sset.f_non_neuronal(scores).numpy()
        p_rec = sset.f_reciprocity(probs[rec_all]).numpy() if len(rec_all) else np.zeros(0)

    rec_hold = hold_idx[rec_defined[hold_idx]]
    rec_in_hold = np.isin(rec_all, rec_hold)
    report = {
        "edge_count_r": pearson_r(p_edge[hold_idx], y_edge[hold_idx].numpy()),
        "reciprocity_r": pearson_r(p_rec[rec_in_hold], y_rec[rec_hold].numpy()) if len(rec_hold) else None,
        "betweenness_r": pearson_r(p_bet[hold_idx], y_bet[hold_idx].numpy()),
        "non_neuronal_r": pearson_r(p_nn[hold_idx], y_nn[hold_idx].numpy()),
        # Fitted-vs-truth correlation over every drawn pair, holdout included.
        "fit": {
            "edge_count_r": pearson_r(p_edge, y_edge.numpy()),
            "reciprocity_r": pearson_r(p_rec, y_rec[rec_all].numpy()) if len(rec_all) else None,
            "betweenness_r": pearson_r(p_bet, y_bet.numpy()),
            "non_neuronal_r": pearson_r(p_nn, y_nn.numpy()),
        },
        "n_pairs": int(n_hold),
        "n_excluded_reciprocity": int(np.sum(~rec_defined)),
    }
    report["flags"] = sorted(
        name for name, value in report.items() if name.endswith("_r") and value is None
    )
    return sset, report
