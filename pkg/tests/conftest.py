import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from connectome_codec.data import ConnectomeTable, NeuronRecord, build_dataset
from connectome_codec.model import GraphCodec, ModelConfig

torch.set_num_threads(1)

settings.register_profile(
    "suite",
    max_examples=25,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("suite")


def tiny_model_config(**overrides) -> ModelConfig:
    """6-node config kept small enough for finite-difference sweeps."""
    base = dict(n_nodes=6, n_classes=5, latent_dim=4, gat_heads=2, gat_out_dim=3,
                edge_embed_dim=4, enc_hidden=(8,), dec_hidden=(8,), edge_hidden=(8,),
                threshold=0.5, init_seed=0)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model() -> GraphCodec:
    model = GraphCodec(tiny_model_config())
    model.reset_parameters(0)
    return model


def small_table(n_neurons: int = 600, seed: int = 11) -> ConnectomeTable:
    """Synthetic table dense enough that cylinder sampling succeeds."""
    rng = np.random.default_rng(seed)
    pos = rng.uniform([0, 0, 0], [60.0, 120.0, 30.0], size=(n_neurons, 3))
    pos = pos[np.argsort(pos[:, 1], kind="stable")]
    labels = rng.integers(0, 4, size=n_neurons)
    neurons = [NeuronRecord(id=i, position=tuple(map(float, pos[i])), nt_label=int(labels[i]))
               for i in range(n_neurons)]
    edges = []
    for _ in range(4 * n_neurons):
        i, j = rng.integers(0, n_neurons, size=2)
        if i != j:
            edges.append((int(i), int(j)))
    edge_arr = np.array(sorted(set(edges)), dtype=np.int64)
    return ConnectomeTable(neurons=neurons, edges=edge_arr)


@pytest.fixture(scope="session")
def shared_small_dataset():
    return build_dataset(small_table(), n_samples=20, seed=5)


def tiny_graph_dataset(n_train: int = 16, seed: int = 3):
    """Handmade 6-node samples with a banded edge pattern the tiny
    model can learn quickly."""
    from connectome_codec.data import Dataset, SubgraphSample

    rng = np.random.default_rng(seed)

    def draw():
        n = 6
        A = np.zeros((n, n), dtype=np.uint8)
        for i in range(n):
            for j in range(n):
                if i != j:
                    p = 0.85 if abs(i - j) == 1 else 0.05
                    A[i, j] = rng.random() < p
        labels = rng.choice(5, size=n, p=[0.1, 0.6, 0.1, 0.1, 0.1])
        A[:, labels == 4] = 0
        A[labels == 4, :] = 0
        return SubgraphSample(labels=labels.astype(np.int64), adjacency=A)

    return Dataset(
        train=[draw() for _ in range(n_train)],
        test=[draw() for _ in range(2)],
        validation=[draw() for _ in range(2)],
        split_seed=seed,
    )
