"""Losses and the 1+2n alternating training schedule.

The schedule runs one edge-reconstruction pretrain (GAT heads, head
merge, and edge decoder only, with the compression/decompression module
bypassed by an identity bridge), then n repetitions of: compression
training with the edge modules frozen, followed by full fine-tuning of
every parameter.  The KL weight ramps linearly from 0 to 1 over the
first 20% of each phase that has a KL term.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import Dataset, SubgraphSample
from .errors import NonFiniteLoss
from .metrics import edge_accuracy, edge_auc, node_accuracy, node_macro_f1
from .model import (
    GraphCodec,
    LatentDistribution,
    one_hot_labels,
    reparameterize,
    save_checkpoint,
)

HISTORY_COLUMNS = ("phase", "epoch", "loss_total", "loss_edge", "loss_node",
                   "loss_kl", "val_edge_auc", "val_node_acc")


@dataclass
class TrainConfig:
    n: int = 1  # repetitions of (train_cd, finetune_full) after the pretrain
    epochs_pretrain: int = 200
    epochs_cd: int = 100
    epochs_full: int = 100
    lr_pretrain: float = 1e-3
    lr_cd: float = 1e-3
    lr_finetune: float = 1e-4
    batch_size: int = 32
    seed: int = 0
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)  # (edge, node, kl)
    kl_warmup_frac: float = 0.2

    def __post_init__(self):
        if self.n < 0:
            raise ValueError("n must be >= 0")
        if min(self.epochs_pretrain, self.epochs_cd, self.epochs_full) < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        self.loss_weights = tuple(self.loss_weights)

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        if "loss_weights" in d:
            d = {**d, "loss_weights": tuple(d["loss_weights"])}
        return cls(**d)


def kl_divergence(dist: LatentDistribution) -> torch.Tensor:
    """Closed-form KL(N(mu, sigma^2) || N(0, I)) summed over dimensions:
    sum_j 1/2 (mu_j^2 + sigma_j^2 - 1 - ln sigma_j^2)."""
    var = dist.sigma * dist.sigma
    return 0.5 * (dist.mu * dist.mu + var - 1.0 - torch.log(var)).sum(dim=-1)


def loss_edge(A: torch.Tensor, A_probs: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over all adjacency entries."""
    return torch.nn.functional.binary_cross_entropy(A_probs, A.to(A_probs.dtype))


def loss_cd(X_onehot: torch.Tensor, node_scores: torch.Tensor,
            dist: LatentDistribution) -> tuple[torch.Tensor, torch.Tensor]:
    """(mean squared error over node score entries, mean KL per sample)."""
    recon = torch.mean((node_scores - X_onehot.to(node_scores.dtype)) ** 2)
    kl = kl_divergence(dist).mean()
    return recon, kl


def loss_full(A: torch.Tensor, A_probs: torch.Tensor, labels: torch.Tensor,
              node_scores: torch.Tensor, dist: LatentDistribution,
              weights: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> torch.Tensor:
    """w_edge * BCE + w_node * softmax-cross-entropy + w_kl * KL.

    ``labels`` may be integer codes (B, N) or one-hot (B, N, C); one-hot
    input is converted by argmax."""
    if labels.dim() == node_scores.dim():
        labels = labels.argmax(dim=-1)
    w_edge, w_node, w_kl = weights
    total = A_probs.new_zeros(())
    if w_edge:
        total = total + w_edge * loss_edge(A, A_probs)
    if w_node:
        ce = torch.nn.functional.cross_entropy(
            node_scores.reshape(-1, node_scores.shape[-1]), labels.reshape(-1).long()
        )
        total = total + w_node * ce
    if w_kl:
        total = total + w_kl * kl_divergence(dist).mean()
    return total


def _stack_split(samples: list[SubgraphSample], dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    A = torch.as_tensor(np.stack([s.adjacency for s in samples]), dtype=dtype)
    labels = torch.as_tensor(np.stack([s.labels for s in samples]), dtype=torch.long)
    return A, labels


def evaluate_reconstruction(model: GraphCodec, samples: list[SubgraphSample]) -> dict:
    """Encode with eps = 0, decode, and average per-sample metrics.

    Samples whose AUC is undefined (single-class adjacency) are skipped
    in the AUC average only.
    """
    dtype = next(model.parameters()).dtype
    A, labels = _stack_split(samples, dtype)
    with torch.no_grad():
        dist = model.encode_tensors(A, labels)
        dg = model.decode_tensors(dist.mu)
    probs = dg.edge_probs.cpu().numpy()
    scores = dg.node_scores.cpu().numpy()
    kappa = model.config.threshold
    aucs, accs, n_accs, f1s = [], [], [], []
    for i, s in enumerate(samples):
        auc = edge_auc(s.adjacency, probs[i])
        if auc is not None:
            aucs.append(auc)
        accs.append(edge_accuracy(s.adjacency, probs[i], kappa))
        pred_labels = np.argmax(scores[i], axis=1)
        n_accs.append(node_accuracy(s.labels, pred_labels))
        f1s.append(node_macro_f1(s.labels, pred_labels))
    return {
        "edge_auc": float(np.mean(aucs)) if aucs else None,
        "edge_acc": float(np.mean(accs)),
        "node_acc": float(np.mean(n_accs)),
        "node_f1": float(np.mean(f1s)),
        "n_samples": len(samples),
    }


def _set_requires_grad(modules, flag: bool) -> None:
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


def phase_sequence(n: int) -> list[str]:
    return ["pretrain_edge"] + ["train_cd", "finetune_full"] * n


def train_1_2n(dataset: Dataset, model: GraphCodec, cfg: TrainConfig,
               out_dir: str | Path | None = None) -> tuple[GraphCodec, list[dict]]:
    """Run the full 1+2n schedule and return the model plus per-epoch history.

    History rows carry the phase name, raw loss components (KL before
    warm-up weighting), and validation edge AUC / node accuracy measured
    with eps = 0.  Raises NonFiniteLoss with the offending batch indices
    if any loss goes non-finite; when ``out_dir`` is set, a diagnostic
    checkpoint is dumped first.
    """
    if not dataset.train:
        raise ValueError("training split is empty")
    dtype = next(model.parameters()).dtype
    A_train, labels_train = _stack_split(dataset.train, dtype)
    val_samples = dataset.validation if dataset.validation else dataset.test
    x_onehot_train = one_hot_labels(labels_train, model.config.n_classes).to(dtype)

    shuffle_rng = np.random.default_rng(cfg.seed)
    eps_gen = torch.Generator().manual_seed(cfg.seed + 1)
    n_train = len(dataset.train)
    history: list[dict] = []
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    phase_params = {
        "pretrain_edge": dict(epochs=cfg.epochs_pretrain, lr=cfg.lr_pretrain),
        "train_cd": dict(epochs=cfg.epochs_cd, lr=cfg.lr_cd),
        "finetune_full": dict(epochs=cfg.epochs_full, lr=cfg.lr_finetune),
    }

    for phase_idx, phase in enumerate(phase_sequence(cfg.n)):
        epochs = phase_params[phase]["epochs"]
        lr = phase_params[phase]["lr"]

        _set_requires_grad([model], True)
        if phase == "pretrain_edge":
            trainable = [p for m in model.edge_modules() for p in m.parameters()]
        elif phase == "train_cd":
            _set_requires_grad(model.edge_modules(), False)
            trainable = [p for p in model.parameters() if p.requires_grad]
        else:
            trainable = list(model.parameters())
        opt = torch.optim.Adam(trainable, lr=lr)
        warmup = max(1, int(round(cfg.kl_warmup_frac * epochs)))

        for epoch in range(epochs):
            beta = 1.0 if phase == "pretrain_edge" else min(1.0, epoch / warmup)
            perm = shuffle_rng.permutation(n_train)
            sums = {"total": 0.0, "edge": 0.0, "node": 0.0, "kl": 0.0}
            n_batches = 0
            for start in range(0, n_train, cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                A = A_train[idx]
                labels = labels_train[idx]

                if phase == "pretrain_edge":
                    h_embed = model.edge_embedding(A)
                    probs = model.decode_edges_from_embedding(h_embed)
                    l_edge = loss_edge(A, probs)
                    total = l_edge
                    parts = (l_edge.item(), 0.0, 0.0)
                else:
                    dist = model.encode_tensors(A, labels)
                    eps = torch.randn(dist.mu.shape, generator=eps_gen, dtype=dtype)
                    z = reparameterize(dist, eps).z
                    dg = model.decode_tensors(z)
                    kl = kl_divergence(dist).mean()
                    if phase == "train_cd":
                        recon = torch.mean((dg.node_scores - x_onehot_train[idx]) ** 2)
                        total = recon + beta * kl
                        parts = (0.0, recon.item(), kl.item())
                    else:
                        w_edge, w_node, w_kl = cfg.loss_weights
                        l_edge = loss_edge(A, dg.edge_probs)
                        ce = torch.nn.functional.cross_entropy(
                            dg.node_scores.reshape(-1, model.config.n_classes),
                            labels.reshape(-1),
                        )
                        total = w_edge * l_edge + w_node * ce + w_kl * beta * kl
                        parts = (l_edge.item(), ce.item(), kl.item())

                if not torch.isfinite(total):
                    if out_path is not None:
                        save_checkpoint(out_path / "nonfinite_diag.ckpt", model,
                                        extra={"phase": phase, "epoch": epoch,
                                               "batch_indices": idx.tolist()})
                    raise NonFiniteLoss(phase, epoch, idx.tolist())

                opt.zero_grad()
                total.backward()
                opt.step()
                sums["total"] += total.item()
                sums["edge"] += parts[0]
                sums["node"] += parts[1]
                sums["kl"] += parts[2]
                n_batches += 1

            val = _validate_epoch(model, phase, val_samples)
            history.append({
                "phase": phase,
                "epoch": epoch,
                "loss_total": sums["total"] / n_batches,
                "loss_edge": sums["edge"] / n_batches,
                "loss_node": sums["node"] / n_batches,
                "loss_kl": sums["kl"] / n_batches,
                "val_edge_auc": val[0],
                "val_node_acc": val[1],
            })

        _set_requires_grad([model], True)
        if out_path is not None:
            save_checkpoint(out_path / f"checkpoint_{phase_idx:02d}_{phase}.ckpt", model,
                            extra={"phase": phase, "phase_idx": phase_idx,
                                   "train_config": cfg.to_dict()})

    return model, history


def _validate_epoch(model: GraphCodec, phase: str,
                    val_samples: list[SubgraphSample]) -> tuple[float | None, float | None]:
    """Edge AUC and node accuracy on the validation split with eps = 0.

    During edge pretraining the compression module is untrained, so the
    edge AUC is measured through the identity bridge instead.
    """
    if not val_samples:
        return None, None
    dtype = next(model.parameters()).dtype
    A, labels = _stack_split(val_samples, dtype)
    with torch.no_grad():
        if phase == "pretrain_edge":
            probs = model.decode_edges_from_embedding(model.edge_embedding(A))
            scores = None
        else:
            dist = model.encode_tensors(A, labels)
            dg = model.decode_tensors(dist.mu)
            probs = dg.edge_probs
            scores = dg.node_scores
    probs_np = probs.cpu().numpy()
    aucs = [a for i, s in enumerate(val_samples)
            if (a := edge_auc(s.adjacency, probs_np[i])) is not None]
    auc = float(np.mean(aucs)) if aucs else None
    acc = None
    if scores is not None:
        pred = scores.argmax(dim=-1).cpu().numpy()
        acc = float(np.mean([node_accuracy(s.labels, pred[i]) for i, s in enumerate(val_samples)]))
    return auc, acc


def write_history_csv(history: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([
                row["phase"], row["epoch"],
                f"{row['loss_total']:.8g}", f"{row['loss_edge']:.8g}",
                f"{row['loss_node']:.8g}", f"{row['loss_kl']:.8g}",
                "" if row["val_edge_auc"] is None else f"{row['val_edge_auc']:.6g}",
                "" if row["val_node_acc"] is None else f"{row['val_node_acc']:.6g}",
            ])


def read_history_csv(path: str | Path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append({
                "phase": rec["phase"],
                "epoch": int(rec["epoch"]),
                "loss_total": float(rec["loss_total"]),
                "loss_edge": float(rec["loss_edge"]),
                "loss_node": float(rec["loss_node"]),
                "loss_kl": float(rec["loss_kl"]),
                "val_edge_auc": float(rec["val_edge_auc"]) if rec["val_edge_auc"] else None,
                "val_node_acc": float(rec["val_node_acc"]) if rec["val_node_acc"] else None,
            })
    return rows
