"""Graph autoencoder: GAT encoder, probabilistic latent layer, decoder.

The encoder reads a 100-node directed adjacency matrix (which doubles
as the per-node feature matrix), runs K attention heads over it, merges
them into per-node edge embeddings H', concatenates one-hot node labels,
and maps the flattened result to a latent Gaussian (mu, sigma).  The
decoder inverts the path: z -> per-node embeddings -> edge probabilities
(per-node MLP + logistic) and raw node-class scores.

Flattening makes the model order-sensitive by construction: isomorphic
graphs under different node orderings generally map to different codes.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import N_NODES, SubgraphSample
from .errors import ShapeMismatch

LEAKY_SLOPE = 0.2

_CHECKPOINT_MAGIC = b"CCODEC01"


@dataclass
class ModelConfig:
    n_nodes: int = N_NODES
    n_classes: int = 5
    latent_dim: int = 32
    gat_heads: int = 4
    gat_out_dim: int = 16
    edge_embed_dim: int = 64  # F_H' after the head-merge linear
    enc_hidden: tuple[int, ...] = (512,)
    dec_hidden: tuple[int, ...] = (512,)
    edge_hidden: tuple[int, ...] = (256,)
    threshold: float = 0.5  # discretization kappa
    init_seed: int = 0

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.gat_heads < 1:
            raise ValueError("gat_heads must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        self.enc_hidden = tuple(self.enc_hidden)
        self.dec_hidden = tuple(self.dec_hidden)
        self.edge_hidden = tuple(self.edge_hidden)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LatentDistribution:
    mu: torch.Tensor  # (..., d)
    sigma: torch.Tensor  # (..., d), positive

    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.mu.shape)


@dataclass
class LatentCode:
    z: torch.Tensor  # (..., d)


@dataclass
class DecodedGraph:
    edge_probs: torch.Tensor  # (..., N, N) in (0, 1)
    node_scores: torch.Tensor  # (..., N, n_classes), raw


def reparameterize(dist: LatentDistribution, eps: torch.Tensor) -> LatentCode:
    """z = mu + eps * sigma, elementwise."""
    if eps.shape != dist.mu.shape:
        raise ShapeMismatch(f"eps shape {tuple(eps.shape)} != mu shape {tuple(dist.mu.shape)}")
    return LatentCode(z=dist.mu + eps * dist.sigma)


def one_hot_labels(labels: torch.Tensor, n_classes: int = 5) -> torch.Tensor:
    return torch.nn.functional.one_hot(labels.long(), num_classes=n_classes)


class GatHead(nn.Module):
    """Single graph-attention head.

    Attention logits e_ij = LeakyReLU(a^T [W h_i || W h_j]) are
    computed in split form (a = [a_src; a_dst]), masked to the
    neighborhood {j : A_ij = 1} plus the self edge, softmax-normalized
    per node, and aggregated with a LeakyReLU output activation.
    """

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.W = nn.Linear(in_dim, out_dim, bias=False)
        self.a_src = nn.Parameter(torch.empty(out_dim))
        self.a_dst = nn.Parameter(torch.empty(out_dim))

    def attention(self, A: torch.Tensor, H: torch.Tensor,
                  add_self_edges: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (alpha, Wh); alpha rows sum to 1 over the neighborhood."""
        if A.shape[-1] != H.shape[-2]:
            raise ShapeMismatch(f"A {tuple(A.shape)} does not align with H {tuple(H.shape)}")
        Wh = self.W(H)
        s = Wh @ self.a_src
        t = Wh @ self.a_dst
        logits = torch.nn.functional.leaky_relu(
            s.unsqueeze(-1) + t.unsqueeze(-2), negative_slope=LEAKY_SLOPE
        )
        mask = A > 0
        if add_self_edges:
            eye = torch.eye(A.shape[-1], dtype=torch.bool, device=A.device)
            mask = mask | eye
        logits = logits.masked_fill(~mask, float("-inf"))
        alpha = torch.softmax(logits, dim=-1)
        # Rows with empty neighborhoods would be all-NaN; they cannot occur
        # with self edges on, but keep the off switch safe for unit tests.
        alpha = torch.nan_to_num(alpha, nan=0.0)
        return alpha, Wh

    def forward(self, A: torch.Tensor, H: torch.Tensor,
                add_self_edges: bool = True) -> torch.Tensor:
        alpha, Wh = self.attention(A, H, add_self_edges=add_self_edges)
        return torch.nn.functional.leaky_relu(alpha @ Wh, negative_slope=LEAKY_SLOPE)


def _mlp(sizes: tuple[int, ...]) -> nn.Sequential:
    """Linear stack with LeakyReLU between layers, raw final output."""
    layers: list[nn.Module] = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2:
            layers.append(nn.LeakyReLU(LEAKY_SLOPE))
    return nn.Sequential(*layers)


def init_uniform_fanin(module: nn.Module, seed: int) -> None:
    """Uniform fan-in initialization, reproducible from the seed.

    Every linear layer's weight and bias are drawn U(-b, b) with
    b = 1/sqrt(fan_in); attention vectors count both halves of the
    concatenated [Wh_i || Wh_j] input.  Module traversal is sorted by
    name so the draw order is stable.
    """
    gen = torch.Generator().manual_seed(seed)

    def fill(p: torch.Tensor, fan_in: int) -> None:
        bound = 1.0 / math.sqrt(fan_in)
        with torch.no_grad():
            p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2.0 - 1.0)
                    .to(p.dtype) * bound)

    for _, mod in sorted(module.named_modules(), key=lambda kv: kv[0]):
        if isinstance(mod, nn.Linear):
            fill(mod.weight, mod.in_features)
            if mod.bias is not None:
                fill(mod.bias, mod.in_features)
        elif isinstance(mod, GatHead):
            fill(mod.a_src, 2 * mod.a_src.shape[0])
            fill(mod.a_dst, 2 * mod.a_dst.shape[0])


class GraphCodec(nn.Module):
    """Encoder + latent heads + decoder, all batch-first."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.heads = nn.ModuleList(
            GatHead(c.n_nodes, c.gat_out_dim) for _ in range(c.gat_heads)
        )
        self.head_merge = nn.Linear(c.gat_heads * c.gat_out_dim, c.edge_embed_dim)
        t_dim = c.n_nodes * (c.edge_embed_dim + c.n_classes)
        self.enc_mlp = _mlp((t_dim, *c.enc_hidden))
        enc_out = c.enc_hidden[-1] if c.enc_hidden else t_dim
        self.fc_mu = nn.Linear(enc_out, c.latent_dim)
        self.fc_logvar = nn.Linear(enc_out, c.latent_dim)
        self.dec_mlp = _mlp((c.latent_dim, *c.dec_hidden, t_dim))
        self.edge_decoder = _mlp((c.edge_embed_dim, *c.edge_hidden, c.n_nodes))
        self.reset_parameters(c.init_seed)

    def reset_parameters(self, seed: int) -> None:
        init_uniform_fanin(self, seed)
        self.config.init_seed = seed

    def edge_modules(self) -> list[nn.Module]:
        """The modules trained in the edge-pretrain phase and frozen in CD phases."""
        return [*self.heads, self.head_merge, self.edge_decoder]

    def edge_embedding(self, A: torch.Tensor) -> torch.Tensor:
        """H' = Linear(concat of GAT heads), with H = A as node features."""
        head_outs = [head(A, A) for head in self.heads]
        return self.head_merge(torch.cat(head_outs, dim=-1))

    def decode_edges_from_embedding(self, H_embed: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.edge_decoder(H_embed))

    def encode_tensors(self, A: torch.Tensor, labels: torch.Tensor) -> LatentDistribution:
        """A: (B, N, N) floats in {0,1}; labels: (B, N) ints in 0..4."""
        h_embed = self.edge_embedding(A)
        x_onehot = one_hot_labels(labels, self.config.n_classes).to(A.dtype)
        t = torch.cat([h_embed, x_onehot], dim=-1)
        flat = t.reshape(*t.shape[:-2], -1)
        l_prime = torch.nn.functional.leaky_relu(self.enc_mlp(flat), negative_slope=LEAKY_SLOPE)
        mu = self.fc_mu(l_prime)
        logvar = self.fc_logvar(l_prime)
        sigma = torch.exp(0.5 * logvar)
        return LatentDistribution(mu=mu, sigma=sigma)

    def decode_tensors(self, z: torch.Tensor) -> DecodedGraph:
        c = self.config
        t_hat = self.dec_mlp(z).reshape(*z.shape[:-1], c.n_nodes, c.edge_embed_dim + c.n_classes)
        h_hat = t_hat[..., : c.edge_embed_dim]
        node_scores = t_hat[..., c.edge_embed_dim:]
        edge_probs = self.decode_edges_from_embedding(h_hat)
        return DecodedGraph(edge_probs=edge_probs, node_scores=node_scores)

    def encode(self, sample: SubgraphSample) -> LatentDistribution:
        p = next(self.parameters())
        A = torch.as_tensor(sample.adjacency, dtype=p.dtype, device=p.device).unsqueeze(0)
        labels = torch.as_tensor(sample.labels, dtype=torch.long, device=p.device).unsqueeze(0)
        with torch.no_grad():
            dist = self.encode_tensors(A, labels)
        return LatentDistribution(mu=dist.mu.squeeze(0), sigma=dist.sigma.squeeze(0))

    def decode(self, z) -> DecodedGraph:
        p = next(self.parameters())
        zt = z.z if isinstance(z, LatentCode) else torch.as_tensor(z, dtype=p.dtype, device=p.device)
        squeeze = zt.dim() == 1
        if squeeze:
            zt = zt.unsqueeze(0)
        with torch.no_grad():
            dg = self.decode_tensors(zt)
        if squeeze:
            return DecodedGraph(edge_probs=dg.edge_probs.squeeze(0),
                                node_scores=dg.node_scores.squeeze(0))
        return dg


def discretize(dg: DecodedGraph, kappa: float | None = None,
               default_kappa: float = 0.5) -> SubgraphSample:
    """Threshold edge probabilities at kappa (>= keeps the edge, diagonal
    forced to zero afterward) and argmax node scores with the lowest
    index winning ties.  The padding row/column invariant is NOT
    enforced: generated graphs may wire label-4 nodes."""
    k = default_kappa if kappa is None else kappa
    if not 0.0 < k < 1.0:
        raise ValueError("kappa must lie in (0, 1)")
    probs = dg.edge_probs.detach().cpu().numpy() if isinstance(dg.edge_probs, torch.Tensor) else np.asarray(dg.edge_probs)
    scores = dg.node_scores.detach().cpu().numpy() if isinstance(dg.node_scores, torch.Tensor) else np.asarray(dg.node_scores)
    if probs.ndim != 2:
        raise ShapeMismatch("discretize expects a single graph, not a batch")
    adjacency = (probs >= k).astype(np.uint8)
    np.fill_diagonal(adjacency, 0)
    labels = np.argmax(scores, axis=1).astype(np.int64)
    return SubgraphSample(labels=labels, adjacency=adjacency, origin=None)


_NAME_DTYPES = {"float32": np.float32, "float64": np.float64, "int64": np.int64}


def write_tensor_archive(path: str | Path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Single-file archive: magic, length-prefixed header JSON extended
    with a tensor manifest (name, shape, dtype, byte offset), then the
    raw little-endian tensor bytes in manifest order."""
    blobs: list[bytes] = []
    manifest = []
    offset = 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr).tobytes()
        manifest.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": str(arr.dtype),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header_bytes = json.dumps({**header, "manifest": manifest}).encode()
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        for raw in blobs:
            fh.write(raw)


def read_tensor_archive(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CHECKPOINT_MAGIC))
        if magic != _CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a tensor archive")
        header_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(header_len))
        payload = fh.read()
    arrays = {}
    for entry in header["manifest"]:
        dt = _NAME_DTYPES[entry["dtype"]]
        arr = np.frombuffer(payload, dtype=dt, count=int(np.prod(entry["shape"])),
                            offset=entry["offset"]).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
    return header, arrays


def state_dict_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {name: p.detach().cpu().numpy() for name, p in module.state_dict().items()}


def load_state_arrays(module: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    if any(a.dtype == np.float64 for a in arrays.values()):
        module.double()
    module.load_state_dict({name: torch.from_numpy(a) for name, a in arrays.items()})


def save_checkpoint(path: str | Path, model: GraphCodec, extra: dict | None = None) -> None:
    """Model checkpoint: config JSON + named parameter tensors, one archive."""
    write_tensor_archive(path, {"config": model.config.to_dict(), "extra": extra or {}},
                         state_dict_arrays(model))


def load_checkpoint(path: str | Path) -> tuple[GraphCodec, dict]:
    header, arrays = read_tensor_archive(path)
    model = GraphCodec(ModelConfig.from_dict(header["config"]))
    load_state_arrays(model, arrays)
    return model, header
