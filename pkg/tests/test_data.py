"""Ingestion, synthesis, cylinder sampling, padding, and splits."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from connectome_codec.data import (
    MAX_REAL,
    MIN_REAL,
    ConnectomeTable,
    Dataset,
    NeuronRecord,
    SubgraphSample,
    _split_sizes,
    build_dataset,
    load_connectome,
    pad_subgraph,
    sample_cylinder,
    synth_connectome,
)
from connectome_codec.errors import (
    DanglingEdge,
    ExhaustedRetries,
    InvalidMix,
    MalformedRow,
    TooManyNodes,
    UnknownLabel,
)
from conftest import small_table
from oracles import count_in_radius_xz


def write_csvs(tmp_path, neuron_rows, edge_rows):
    nf = tmp_path / "neurons.csv"
    ef = tmp_path / "edges.csv"
    nf.write_text("id,x,y,z,nt_label\n" + "\n".join(neuron_rows) + "\n")
    ef.write_text("pre_id,post_id\n" + ("\n".join(edge_rows) + "\n" if edge_rows else ""))
    return nf, ef


class TestLoadConnectome:
    def test_minimal_two_neurons_one_edge(self, tmp_path):
        nf, ef = write_csvs(tmp_path, ["1,0,0,0,GABA", "2,1,1,1,glut"], ["1,2"])
        table = load_connectome(nf, ef)
        assert len(table.neurons) == 2
        assert table.edges.tolist() == [[1, 2]]

    def test_dangling_edge_rejected(self, tmp_path):
        nf, ef = write_csvs(tmp_path, ["1,0,0,0,GABA"], ["1,99"])
        with pytest.raises(DanglingEdge, match="99"):
            load_connectome(nf, ef)

    def test_unknown_label(self, tmp_path):
        nf, ef = write_csvs(tmp_path, ["1,0,0,0,DOPAMINE"], [])
        with pytest.raises(UnknownLabel):
            load_connectome(nf, ef)

    def test_malformed_row_reports_line(self, tmp_path):
        nf, ef = write_csvs(tmp_path, ["1,0,0,0,GABA", "2,oops,0,0,GLUT"], [])
        with pytest.raises(MalformedRow, match=":3"):
            load_connectome(nf, ef)

    def test_label_counts_match_recount(self, tmp_path):
        # oracle: tally the nt_label column with plain string ops
        rng = np.random.default_rng(0)
        names = ["GABA", "GLUT", "ACH", "SER"]
        rows = [f"{i},{i}.0,0,0,{names[rng.integers(0, 4)]}" for i in range(200)]
        nf, ef = write_csvs(tmp_path, rows, [])
        expected = {name: 0 for name in names}
        for line in nf.read_text().splitlines()[1:]:
            expected[line.rsplit(",", 1)[1]] += 1
        table = load_connectome(nf, ef)
        assert table.label_counts() == expected

    def test_self_loops_and_duplicates_collapse(self, tmp_path):
        nf, ef = write_csvs(tmp_path, ["1,0,0,0,GABA", "2,1,0,0,SER"],
                            ["1,2", "1,2", "2,2"])
        table = load_connectome(nf, ef)
        assert table.edges.tolist() == [[1, 2]]


class TestSynthConnectome:
    BOX = [[0.0, 50.0], [0.0, 50.0], [0.0, 20.0]]

    def test_zero_scale_gives_zero_edges(self):
        t = synth_connectome(50, self.BOX, [0.25, 0.25, 0.25, 0.25], 0.0, 10.0, seed=1)
        assert len(t.edges) == 0

    def test_determinism(self):
        a = synth_connectome(80, self.BOX, [0.25, 0.25, 0.25, 0.25], 0.4, 10.0, seed=9)
        b = synth_connectome(80, self.BOX, [0.25, 0.25, 0.25, 0.25], 0.4, 10.0, seed=9)
        assert a.neurons == b.neurons
        assert np.array_equal(a.edges, b.edges)

    def test_bad_mix(self):
        with pytest.raises(InvalidMix):
            synth_connectome(10, self.BOX, [0.3, 0.3, 0.3, 0.3], 0.1, 5.0, seed=0)

    def test_label_counts_within_binomial_bound(self):
        # oracle: 4-sigma binomial bound, sigma = sqrt(n p (1-p))
        n = 10000
        t = synth_connectome(n, self.BOX, [0.25, 0.25, 0.25, 0.25], 0.0, 10.0, seed=3)
        labels = t.labels_array()
        bound = 4.0 * np.sqrt(n * 0.25 * 0.75)
        for c in range(4):
            assert abs(int((labels == c).sum()) - 2500) < bound

    def test_ids_sorted_by_y(self):
        t = synth_connectome(200, self.BOX, [0.25, 0.25, 0.25, 0.25], 0.0, 10.0, seed=5)
        ys = [n.position[1] for n in t.neurons]
        assert ys == sorted(ys)

    def test_positions_inside_box(self):
        t = synth_connectome(300, self.BOX, [1.0, 0.0, 0.0, 0.0], 0.0, 10.0, seed=2)
        pos = t.positions()
        for axis, (lo, hi) in enumerate(self.BOX):
            assert pos[:, axis].min() >= lo and pos[:, axis].max() <= hi


class TestPadSubgraph:
    def test_full_sample_no_padding(self):
        s = pad_subgraph([0] * 100, [(0, 1)])
        assert s.n_real() == 100
        assert (s.labels == 4).sum() == 0

    def test_81_real_19_padding(self):
        s = pad_subgraph([1] * 81, [(0, 1), (5, 3)])
        assert (s.labels == 4).sum() == 19
        assert s.adjacency[81:, :].sum() == 0
        assert s.adjacency[:, 81:].sum() == 0

    def test_empty_input(self):
        s = pad_subgraph([], [])
        assert (s.labels == 4).all()
        assert s.adjacency.sum() == 0

    def test_too_many_nodes(self):
        with pytest.raises(TooManyNodes):
            pad_subgraph([0] * 101, [])

    @given(st.integers(min_value=0, max_value=100), st.integers(min_value=0, max_value=10_000))
    def test_padding_invariant(self, n_real, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 4, size=n_real).tolist()
        edges = []
        if n_real >= 2:
            for _ in range(min(40, n_real)):
                i, j = rng.integers(0, n_real, size=2)
                if i != j:
                    edges.append((int(i), int(j)))
        s = pad_subgraph(labels, edges)
        s.validate()
        pad = s.labels == 4
        # label 4 <=> zero row and zero column
        degree = s.adjacency.sum(axis=0) + s.adjacency.sum(axis=1)
        assert (degree[pad] == 0).all()
        assert np.count_nonzero(pad) == 100 - n_real


class TestSampleCylinder:
    def test_table_below_81_exhausts(self):
        rng = np.random.default_rng(0)
        t = small_table(n_neurons=80)
        with pytest.raises(ExhaustedRetries):
            sample_cylinder(t, rng)

    def test_whole_table_capture(self):
        # 90 neurons inside radius 1: every accepted draw takes them all
        rng = np.random.default_rng(1)
        base = np.random.default_rng(7).uniform(-1, 1, size=(90, 3)) * 0.3
        neurons = [NeuronRecord(id=i, position=tuple(map(float, base[i])), nt_label=0)
                   for i in range(90)]
        t = ConnectomeTable(neurons=neurons, edges=np.zeros((0, 2), dtype=np.int64))
        s = sample_cylinder(t, rng)
        assert s.n_real() == 90
        assert (s.labels == 4).sum() == 10

    def test_draw_counts_and_radius_against_linear_scan(self):
        t = small_table(n_neurons=2000, seed=3)
        pos = t.positions()
        rng = np.random.default_rng(21)
        for _ in range(20):
            s = sample_cylinder(t, rng)
            assert MIN_REAL <= s.n_real() <= MAX_REAL
            cx, cz, radius = s.origin
            # oracle: brute-force membership recount at the returned radius
            assert count_in_radius_xz(pos, cx, cz, radius) == s.n_real()

    def test_real_nodes_keep_table_order(self):
        # real slots carry the members' labels in ascending table order
        t = small_table(n_neurons=1500, seed=13)
        s = sample_cylinder(t, np.random.default_rng(2))
        pos = t.positions()
        cx, cz, radius = s.origin
        member = np.flatnonzero((pos[:, 0] - cx) ** 2 + (pos[:, 2] - cz) ** 2 <= radius ** 2)
        expected = t.labels_array()[member]
        assert np.array_equal(s.labels[: len(member)], expected)


class TestDatasetBuild:
    def test_split_sizes_exact(self):
        assert _split_sizes(500) == (400, 50, 50)
        assert _split_sizes(10) == (8, 1, 1)

    def test_build_and_determinism(self, shared_small_dataset):
        ds = shared_small_dataset
        assert {k: len(v) for k, v in ds.splits().items()} == {"train": 16, "test": 2, "val": 2}
        ds2 = build_dataset(small_table(), n_samples=20, seed=5)
        for a, b in zip(ds.train + ds.test + ds.validation,
                        ds2.train + ds2.test + ds2.validation):
            assert np.array_equal(a.labels, b.labels)
            assert np.array_equal(a.adjacency, b.adjacency)

    def test_all_samples_within_bounds(self, shared_small_dataset):
        for s in (shared_small_dataset.train + shared_small_dataset.test
                  + shared_small_dataset.validation):
            assert MIN_REAL <= s.n_real() <= MAX_REAL
            s.validate()

    def test_save_load_roundtrip(self, shared_small_dataset, tmp_path):
        shared_small_dataset.save(tmp_path / "ds")
        loaded = Dataset.load(tmp_path / "ds")
        assert len(loaded.train) == len(shared_small_dataset.train)
        for a, b in zip(loaded.train, shared_small_dataset.train):
            assert np.array_equal(a.labels, b.labels)
            assert np.array_equal(a.adjacency, b.adjacency)
        manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
        assert manifest["counts"] == {"train": 16, "test": 2, "val": 2}

    def test_sample_json_rows_are_bit_strings(self, shared_small_dataset):
        obj = shared_small_dataset.train[0].to_json_obj()
        assert len(obj["adjacency_rows"]) == 100
        assert all(len(r) == 100 and set(r) <= {"0", "1"} for r in obj["adjacency_rows"])
        back = SubgraphSample.from_json_obj(obj)
        assert np.array_equal(back.adjacency, shared_small_dataset.train[0].adjacency)


class TestTableValidation:
    def test_rejects_duplicate_edges(self):
        neurons = [NeuronRecord(id=i, position=(0.0, 0.0, 0.0), nt_label=0) for i in range(3)]
        with pytest.raises(MalformedRow):
            ConnectomeTable(neurons=neurons, edges=np.array([[0, 1], [0, 1]]))

    def test_rejects_self_loop(self):
        neurons = [NeuronRecord(id=i, position=(0.0, 0.0, 0.0), nt_label=0) for i in range(2)]
        with pytest.raises(MalformedRow):
            ConnectomeTable(neurons=neurons, edges=np.array([[1, 1]]))

    def test_rejects_unknown_endpoint(self):
        neurons = [NeuronRecord(id=i, position=(0.0, 0.0, 0.0), nt_label=0) for i in range(2)]
        with pytest.raises(DanglingEdge):
            ConnectomeTable(neurons=neurons, edges=np.array([[0, 5]]))
