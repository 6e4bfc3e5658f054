"""Connectome loading, synthesis, and cylindrical subgraph sampling.

A connectome is a table of spatially embedded neurons (one of four
neurotransmitter types) plus a directed synapse edge list.  Fixed-size
training samples are cut out of it with an adaptive cylinder: pick a
random center in the XZ plane, grow or shrink the radius by bisection
until the infinite Y-aligned cylinder encloses 81..100 neurons, then pad
the induced subgraph with isolated non-neuronal nodes up to 100.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DanglingEdge,
    ExhaustedRetries,
    InvalidMix,
    MalformedRow,
    TooManyNodes,
    UnknownLabel,
    UnsatisfiableCenter,
)

N_NODES = 100
MIN_REAL = 81
MAX_REAL = 100

NT_LABELS = ("GABA", "GLUT", "ACH", "SER")
PADDING_LABEL = 4  # "NonNeuronal", reserved for padding nodes
LABEL_NAMES = NT_LABELS + ("NonNeuronal",)

_LABEL_CODE = {name: i for i, name in enumerate(NT_LABELS)}

# Bisection control for the adaptive radius search.
MAX_BISECT_ITERS = 64
RADIUS_REL_TOL = 1e-6
CENTER_RETRY_BUDGET = 1000


@dataclass(frozen=True)
class NeuronRecord:
    id: int
    position: tuple[float, float, float]  # (x, y, z) in nanometers
    nt_label: int  # 0..3, see NT_LABELS


@dataclass
class ConnectomeTable:
    """Validated neuron table plus deduplicated directed edge list.

    ``edges`` is stored as an (m, 2) int64 array of (pre_id, post_id);
    list-of-pairs input is accepted and normalized.
    """

    neurons: list[NeuronRecord]
    edges: np.ndarray

    def __post_init__(self):
        ids = np.array([n.id for n in self.neurons], dtype=np.int64)
        if len(np.unique(ids)) != len(ids):
            raise MalformedRow("duplicate neuron ids in table")
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.edges = edges
        if edges.size:
            if np.any(edges[:, 0] == edges[:, 1]):
                raise MalformedRow("self-loop in edge list")
            if len(np.unique(edges, axis=0)) != len(edges):
                raise MalformedRow("duplicate directed edges in table")
            if not np.all(np.isin(edges, ids)):
                raise DanglingEdge("edge references unknown neuron id")

    def positions(self) -> np.ndarray:
        cached = self.__dict__.get("_pos")
        if cached is None:
            cached = np.array([n.position for n in self.neurons], dtype=np.float64)
            self.__dict__["_pos"] = cached
        return cached

    def labels_array(self) -> np.ndarray:
        cached = self.__dict__.get("_lab")
        if cached is None:
            cached = np.array([n.nt_label for n in self.neurons], dtype=np.int64)
            self.__dict__["_lab"] = cached
        return cached

    def edge_indices(self) -> np.ndarray:
        """Edges as (m, 2) indices into ``neurons`` (cached)."""
        cached = self.__dict__.get("_eidx")
        if cached is None:
            ids = np.array([n.id for n in self.neurons], dtype=np.int64)
            order = np.argsort(ids)
            cached = order[np.searchsorted(ids[order], self.edges)]
            self.__dict__["_eidx"] = cached
        return cached

    def label_counts(self) -> dict[str, int]:
        counts = np.bincount(self.labels_array(), minlength=4)
        return {name: int(counts[i]) for i, name in enumerate(NT_LABELS)}


@dataclass
class SubgraphSample:
    """Padded 100-node directed subgraph.

    Rows of ``adjacency`` are presynaptic, columns postsynaptic.  Real
    nodes occupy the leading indices in their sampled order; the tail is
    padding with label 4 and zero adjacency row and column.
    """

    labels: np.ndarray  # (100,) int64, codes 0..4
    adjacency: np.ndarray  # (100, 100) uint8
    origin: tuple[float, float, float] | None = None  # (center_x, center_z, radius)

    def n_real(self) -> int:
        return int(np.count_nonzero(self.labels != PADDING_LABEL))

    def validate(self) -> None:
        if self.labels.shape != (N_NODES,) or self.adjacency.shape != (N_NODES, N_NODES):
            raise TooManyNodes("sample arrays must be fixed at 100 nodes")
        if np.any(np.diag(self.adjacency)):
            raise MalformedRow("adjacency diagonal must be zero")
        pad = self.labels == PADDING_LABEL
        if np.any(self.adjacency[pad, :]) or np.any(self.adjacency[:, pad]):
            raise MalformedRow("padding nodes must have zero adjacency row and column")

    def to_json_obj(self) -> dict:
        obj = {
            "labels": self.labels.tolist(),
            "adjacency_rows": ["".join("1" if v else "0" for v in row) for row in self.adjacency],
        }
        if self.origin is not None:
            cx, cz, r = self.origin
            obj["origin"] = {"center_x": cx, "center_z": cz, "radius": r}
        return obj

    @classmethod
    def from_json_obj(cls, obj: dict) -> "SubgraphSample":
        labels = np.asarray(obj["labels"], dtype=np.int64)
        adjacency = np.array(
            [[1 if c == "1" else 0 for c in row] for row in obj["adjacency_rows"]],
            dtype=np.uint8,
        )
        origin = None
        if obj.get("origin") is not None:
            o = obj["origin"]
            origin = (o["center_x"], o["center_z"], o["radius"])
        return cls(labels=labels, adjacency=adjacency, origin=origin)


@dataclass
class Dataset:
    train: list[SubgraphSample]
    test: list[SubgraphSample]
    validation: list[SubgraphSample]
    split_seed: int = 0

    def splits(self) -> dict[str, list[SubgraphSample]]:
        return {"train": self.train, "test": self.test, "val": self.validation}

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, samples in self.splits().items():
            payload = [s.to_json_obj() for s in samples]
            (out / f"{name}.json").write_text(json.dumps(payload))
        manifest = {
            "split_seed": self.split_seed,
            "counts": {name: len(s) for name, s in self.splits().items()},
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, in_dir: str | Path) -> "Dataset":
        src = Path(in_dir)
        manifest = json.loads((src / "manifest.json").read_text())
        splits = {}
        for name in ("train", "test", "val"):
            payload = json.loads((src / f"{name}.json").read_text())
            splits[name] = [SubgraphSample.from_json_obj(o) for o in payload]
        return cls(
            train=splits["train"],
            test=splits["test"],
            validation=splits["val"],
            split_seed=manifest["split_seed"],
        )


def load_connectome(neuron_file: str | Path, edge_file: str | Path) -> ConnectomeTable:
    """Load a connectome from two CSVs.

    Neuron file columns: ``id,x,y,z,nt_label`` with nt_label one of
    GABA/GLUT/ACH/SER (case-insensitive).  Edge file columns:
    ``pre_id,post_id``.  Self-loops are dropped; duplicate directed
    edges collapse to one.
    """
    neurons: list[NeuronRecord] = []
    with open(neuron_file, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip().lower() for c in header] != ["id", "x", "y", "z", "nt_label"]:
            raise MalformedRow(f"bad neuron file header: {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise MalformedRow(f"{neuron_file}:{lineno}: expected 5 columns, got {len(row)}")
            try:
                nid = int(row[0])
                pos = (float(row[1]), float(row[2]), float(row[3]))
            except ValueError as exc:
                raise MalformedRow(f"{neuron_file}:{lineno}: {exc}") from exc
            label = row[4].strip().upper()
            if label not in _LABEL_CODE:
                raise UnknownLabel(f"{neuron_file}:{lineno}: unknown nt label {row[4]!r}")
            neurons.append(NeuronRecord(id=nid, position=pos, nt_label=_LABEL_CODE[label]))

    known_ids = {n.id for n in neurons}
    edges: set[tuple[int, int]] = set()
    with open(edge_file, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip().lower() for c in header] != ["pre_id", "post_id"]:
            raise MalformedRow(f"bad edge file header: {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise MalformedRow(f"{edge_file}:{lineno}: expected 2 columns, got {len(row)}")
            try:
                pre, post = int(row[0]), int(row[1])
            except ValueError as exc:
                raise MalformedRow(f"{edge_file}:{lineno}: {exc}") from exc
            if pre not in known_ids or post not in known_ids:
                raise DanglingEdge(f"{edge_file}:{lineno}: edge ({pre}, {post}) has an unknown endpoint")
            if pre == post:
                continue
            edges.add((pre, post))

    edge_arr = np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)
    return ConnectomeTable(neurons=neurons, edges=edge_arr)


def synth_connectome(
    n_neurons: int,
    box: Sequence[Sequence[float]],
    label_mix: Sequence[float],
    edge_prob_scale: float,
    length_scale: float,
    seed: int,
) -> ConnectomeTable:
    """Generate a synthetic spatially embedded connectome.

    Positions are uniform in ``box`` (((x0,x1),(y0,y1),(z0,z1))), labels
    multinomial over ``label_mix``, and each ordered pair (i, j), i != j,
    carries an edge with probability
    ``edge_prob_scale * exp(-dist(i, j) / length_scale)``.

    Neuron ids are assigned in ascending y order, mirroring the spatial
    chunking of real connectome exports, so nearby ids tend to be
    spatial neighbours.
    """
    if n_neurons < 1:
        raise ValueError("n_neurons must be >= 1")
    mix = np.asarray(label_mix, dtype=np.float64)
    if mix.shape != (4,) or abs(mix.sum() - 1.0) > 1e-9 or np.any(mix < 0):
        raise InvalidMix(f"label mix must be 4 nonnegative proportions summing to 1, got {label_mix}")

    rng = np.random.default_rng(seed)
    box_arr = np.asarray(box, dtype=np.float64)
    lo, hi = box_arr[:, 0], box_arr[:, 1]
    pos = lo + rng.random((n_neurons, 3)) * (hi - lo)
    pos = pos[np.argsort(pos[:, 1], kind="stable")]
    labels = rng.choice(4, size=n_neurons, p=mix)

    neurons = [
        NeuronRecord(id=i, position=tuple(pos[i]), nt_label=int(labels[i]))
        for i in range(n_neurons)
    ]

    pre_parts: list[np.ndarray] = []
    post_parts: list[np.ndarray] = []
    if edge_prob_scale > 0.0:
        # Row blocks keep the pairwise distance matrix small.
        block = max(1, int(2_000_000 // max(n_neurons, 1)))
        for start in range(0, n_neurons, block):
            stop = min(start + block, n_neurons)
            d = np.linalg.norm(pos[start:stop, None, :] - pos[None, :, :], axis=2)
            p = edge_prob_scale * np.exp(-d / length_scale)
            hit = rng.random(p.shape) < p
            rows, cols = np.nonzero(hit)
            rows = rows + start
            keep = rows != cols
            pre_parts.append(rows[keep])
            post_parts.append(cols[keep])

    if pre_parts:
        edges = np.stack([np.concatenate(pre_parts), np.concatenate(post_parts)], axis=1)
    else:
        edges = np.zeros((0, 2), dtype=np.int64)
    return ConnectomeTable(neurons=neurons, edges=edges)


def pad_subgraph(real_labels: Sequence[int], real_edges, origin=None) -> SubgraphSample:
    """Pad a real subgraph (labels + local-index edge pairs) to 100 nodes."""
    n_real = len(real_labels)
    if n_real > N_NODES:
        raise TooManyNodes(f"{n_real} real nodes exceed the fixed size {N_NODES}")
    labels = np.full(N_NODES, PADDING_LABEL, dtype=np.int64)
    labels[:n_real] = np.asarray(real_labels, dtype=np.int64)
    adjacency = np.zeros((N_NODES, N_NODES), dtype=np.uint8)
    edges = np.asarray(real_edges, dtype=np.int64).reshape(-1, 2)
    if edges.size:
        edges = edges[edges[:, 0] != edges[:, 1]]
        adjacency[edges[:, 0], edges[:, 1]] = 1
    return SubgraphSample(labels=labels, adjacency=adjacency, origin=origin)


def _count_within(dist2: np.ndarray, radius: float) -> int:
    return int(np.count_nonzero(dist2 <= radius * radius))


def _search_radius(dist2: np.ndarray, diag: float) -> float:
    """Bisect for a radius enclosing MIN_REAL..MAX_REAL neurons.

    Raises UnsatisfiableCenter when the count jumps over the window
    (density plateau) or the table is globally too small.
    """
    hi = diag
    c_hi = _count_within(dist2, hi)
    if c_hi < MIN_REAL:
        raise UnsatisfiableCenter("table has too few neurons in reach")
    if c_hi <= MAX_REAL:
        return hi
    lo = 0.0
    for _ in range(MAX_BISECT_ITERS):
        if hi - lo < RADIUS_REL_TOL * diag:
            break
        mid = 0.5 * (lo + hi)
        c = _count_within(dist2, mid)
        if c < MIN_REAL:
            lo = mid
        elif c > MAX_REAL:
            hi = mid
        else:
            return mid
    raise UnsatisfiableCenter("no radius hits the target count window at this center")


def sample_cylinder(table: ConnectomeTable, rng: np.random.Generator,
                    retry_budget: int = CENTER_RETRY_BUDGET) -> SubgraphSample:
    """Draw one padded sample via adaptive cylindrical sampling.

    The cylinder is infinite along Y; membership is XZ-plane distance to
    a uniform-random center within the XZ bounding box of the neurons.
    The radius is bisected over [0, bounding-box diagonal] until the
    enclosed count lands in 81..100.  Centers that cannot satisfy the
    window are resampled, up to ``retry_budget`` attempts.
    """
    if not table.neurons:
        raise ExhaustedRetries("empty table")
    pos = table.positions()
    labels = table.labels_array()
    eidx = table.edge_indices()
    xz = pos[:, [0, 2]]
    lo, hi = xz.min(axis=0), xz.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    if diag == 0.0:
        diag = 1.0  # all neurons coincide in XZ; any positive radius captures them

    for _ in range(retry_budget):
        center = lo + rng.random(2) * (hi - lo)
        dist2 = np.sum((xz - center) ** 2, axis=1)
        try:
            radius = _search_radius(dist2, diag)
        except UnsatisfiableCenter:
            continue
        member_idx = np.flatnonzero(dist2 <= radius * radius)
        local = np.full(len(pos), -1, dtype=np.int64)
        local[member_idx] = np.arange(len(member_idx))
        if eidx.size:
            le = local[eidx]
            real_edges = le[(le[:, 0] >= 0) & (le[:, 1] >= 0)]
        else:
            real_edges = np.zeros((0, 2), dtype=np.int64)
        return pad_subgraph(labels[member_idx], real_edges,
                            origin=(float(center[0]), float(center[1]), radius))

    raise ExhaustedRetries(f"no acceptable center in {retry_budget} attempts")


def _split_sizes(n: int) -> tuple[int, int, int]:
    n_train = int(n * 8) // 10
    n_test = n // 10
    return n_train, n_test, n - n_train - n_test


def build_dataset(table: ConnectomeTable, n_samples: int = 500, seed: int = 0) -> Dataset:
    """Draw ``n_samples`` cylinder samples and split them 8:1:1.

    Each sample uses an independently derived sub-seed, so draws are
    order-independent and could run in parallel without changing output.
    """
    samples = []
    for i in range(n_samples):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        samples.append(sample_cylinder(table, rng))

    shuffle_rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(n_samples,)))
    order = shuffle_rng.permutation(n_samples)
    shuffled = [samples[k] for k in order]
    n_train, n_test, _ = _split_sizes(n_samples)
    return Dataset(
        train=shuffled[:n_train],
        test=shuffled[n_train:n_train + n_test],
        validation=shuffled[n_train + n_test:],
        split_seed=seed,
    )
