import json

import numpy as np
import pytest

from ddisearch import encoder as enc
from ddisearch import tape as T
from ddisearch.graph import RelGraph, Triple


def make_params(rng, graph, dim=4, layers=2):
    return enc.SupernetParams.init(rng, graph.num_nodes, graph.num_base_relations,
                                   dim, layers)


def random_graph(rng, num_nodes=12, num_edges=30, num_rels=2):
    triples = {(int(rng.integers(num_nodes)), int(rng.integers(num_rels)),
                int(rng.integers(num_nodes))) for _ in range(num_edges)}
    triples = {t for t in triples if t[0] != t[2]}
    return RelGraph([Triple(*t) for t in triples], num_nodes, num_rels)


def encode_node(graph, genotype, params, node, layer):
    tensors = {k: T.Tensor(v) for k, v in sorted(params.arrays.items())}
    layers = enc.encode(graph, genotype, tensors)
    return layers[layer].data[node]


def subgraph_params(params, keep):
    arrays = {k: v.copy() for k, v in params.arrays.items()}
    arrays["node_emb"] = arrays["node_emb"][sorted(keep)]
    return enc.SupernetParams(arrays, params.num_layers, params.dim)


class TestGenotype:
    def test_json_roundtrip(self):
        g = enc.Genotype([enc.LayerChoice("CORR", "MAX", "MLP", "TANH"),
                          enc.LayerChoice("SUB", "SUM", "CONCAT", "IDENTITY")])
        assert enc.Genotype.from_json(g.to_json()) == g
        names = json.loads(g.to_json())[0]
        assert names == {"mes": "CORR", "agg": "MAX", "com": "MLP", "act": "TANH"}

    def test_invalid_operator(self):
        with pytest.raises(ValueError):
            enc.LayerChoice("FOO", "SUM", "MLP", "RELU")


class TestSamplePath:
    def test_uniformity(self):
        rng = np.random.default_rng(0)
        counts = {op: 0 for op in enc.MES_OPS}
        n = 10_000
        for _ in range(n):
            g = enc.sample_path(rng, 2)
            counts[g[0].mes] += 1
        expected = n / len(enc.MES_OPS)
        sigma = np.sqrt(n * 0.25 * 0.75)
        for op, c in counts.items():
            assert abs(c - expected) < 3 * sigma, (op, c)

    def test_constraint_pins_slot(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            g = enc.sample_path(rng, 3, constraints={(0, "mes"): "CORR"})
            assert g[0].mes == "CORR"

    def test_contradictory_constraint(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ValueError):
            enc.sample_path(rng, 2, constraints={(0, "mes"): "SUM"})
        with pytest.raises(ValueError):
            enc.sample_path(rng, 2, constraints={(5, "mes"): "SUB"})

    def test_seed_reproducibility(self):
        seq1 = [enc.sample_path(np.random.default_rng(7), 3) for _ in range(5)]
        seq2 = [enc.sample_path(np.random.default_rng(7), 3) for _ in range(5)]
        assert seq1 == seq2


class TestEncode:
    def test_star_graph_sub_sum_hand_case(self):
        # center node 0 with 3 leaves; messages flow leaf -> center
        triples = [Triple(i, 0, 0) for i in (1, 2, 3)]
        graph = RelGraph(triples, 4, 1)
        rng = np.random.default_rng(3)
        params = make_params(rng, graph, dim=2, layers=1)
        genotype = enc.Genotype([enc.LayerChoice("SUB", "SUM", "CONCAT", "IDENTITY")])
        tensors = {k: T.Tensor(v) for k, v in sorted(params.arrays.items())}
        layers = enc.encode(graph, genotype, tensors)
        h = params.arrays["node_emb"]
        rel = params.arrays["rel_emb_0"]
        # center message: sum over leaves of (h_leaf - h_r0) plus self-loop term
        msg = sum(h[i] - rel[0] for i in (1, 2, 3)) + (h[0] - rel[graph.self_loop_relation])
        expected = np.concatenate([h[0], msg]) @ params.arrays["w_concat_0"]
        assert np.max(np.abs(layers[1].data[0] - expected)) < 1e-12

    def test_single_node_self_loop_only(self):
        graph = RelGraph([], 1, 1)
        rng = np.random.default_rng(4)
        params = make_params(rng, graph, dim=4, layers=1)
        genotype = enc.Genotype([enc.LayerChoice("MULT", "SUM", "CONCAT", "IDENTITY")])
        tensors = {k: T.Tensor(v) for k, v in sorted(params.arrays.items())}
        layers = enc.encode(graph, genotype, tensors)
        h = params.arrays["node_emb"][0]
        msg = h * params.arrays["rel_emb_0"][graph.self_loop_relation]
        expected = np.concatenate([h, msg]) @ params.arrays["w_concat_0"]
        assert np.allclose(layers[1].data[0], expected)

    @pytest.mark.parametrize("mes", enc.MES_OPS)
    def test_receptive_field(self, mes):
        rng = np.random.default_rng(5)
        graph = random_graph(rng)
        params = make_params(rng, graph, dim=4, layers=2)
        genotype = enc.Genotype([
            enc.LayerChoice(mes, "MEAN", "MLP", "TANH"),
            enc.LayerChoice(mes, "MAX", "CONCAT", "RELU")])
        for u in range(0, graph.num_nodes, 3):
            for ell in (1, 2):
                keep = graph.khop(u, ell)
                sub, mapping = graph.induced_subgraph(keep)
                sub_params = subgraph_params(params, keep)
                full = encode_node(graph, enc.Genotype(genotype[:ell]),
                                   params, u, ell)
                local = encode_node(sub, enc.Genotype(genotype[:ell]),
                                    sub_params, mapping[u], ell)
                assert np.max(np.abs(full - local)) < 1e-9

    def test_mult_identity_relation(self):
        rng = np.random.default_rng(6)
        graph = random_graph(rng)
        params = make_params(rng, graph, dim=4, layers=1)
        params.arrays["rel_emb_0"][:] = 1.0
        genotype = enc.Genotype([enc.LayerChoice("MULT", "SUM", "CONCAT", "IDENTITY")])
        tensors = {k: T.Tensor(v) for k, v in sorted(params.arrays.items())}
        layers = enc.encode(graph, genotype, tensors)
        # with h_r = 1 the MULT message is h_v itself: compare against SUB h_r = 0
        params2 = enc.SupernetParams({k: v.copy() for k, v in params.arrays.items()},
                                     1, 4)
        params2.arrays["rel_emb_0"][:] = 0.0
        genotype2 = enc.Genotype([enc.LayerChoice("SUB", "SUM", "CONCAT", "IDENTITY")])
        tensors2 = {k: T.Tensor(v) for k, v in sorted(params2.arrays.items())}
        layers2 = enc.encode(graph, genotype2, tensors2)
        assert np.allclose(layers[1].data, layers2[1].data)

    def test_edge_exclusion_blocks_message(self):
        triples = [Triple(0, 0, 1), Triple(2, 1, 1)]
        graph = RelGraph(triples, 3, 2)
        rng = np.random.default_rng(7)
        params = make_params(rng, graph, dim=4, layers=1)
        genotype = enc.Genotype([enc.LayerChoice("SUB", "SUM", "CONCAT", "IDENTITY")])

        def h1_of_node1(rel0_value):
            p = enc.SupernetParams({k: v.copy() for k, v in params.arrays.items()},
                                   1, 4)
            p.arrays["rel_emb_0"][0] = rel0_value
            tensors = {k: T.Tensor(v) for k, v in sorted(p.arrays.items())}
            return enc.encode(graph, genotype, tensors,
                              exclude=[Triple(0, 0, 1)])[1].data[1]

        # excluded edge's relation embedding must not influence node 1
        assert np.allclose(h1_of_node1(np.zeros(4)), h1_of_node1(np.ones(4)))

    def test_unused_branch_weights_do_not_affect_forward(self):
        rng = np.random.default_rng(8)
        graph = random_graph(rng)
        params = make_params(rng, graph, dim=4, layers=1)
        genotype = enc.Genotype([enc.LayerChoice("SUB", "SUM", "MLP", "TANH")])
        tensors = {k: T.Tensor(v) for k, v in sorted(params.arrays.items())}
        out1 = enc.encode(graph, genotype, tensors)[1].data
        params.arrays["w_concat_0"][:] = 999.0  # inactive COM branch
        params.arrays["phase_0"][:] = 1.234     # inactive MES branch
        tensors = {k: T.Tensor(v) for k, v in sorted(params.arrays.items())}
        out2 = enc.encode(graph, genotype, tensors)[1].data
        assert np.array_equal(out1, out2)

    def test_determinism_bitwise(self):
        rng = np.random.default_rng(9)
        graph = random_graph(rng)
        params = make_params(rng, graph, dim=6, layers=2)
        genotype = enc.Genotype([enc.LayerChoice("CORR", "MAX", "MLP", "RELU"),
                                 enc.LayerChoice("ROTATE", "MEAN", "CONCAT", "TANH")])

        def run():
            tensors = {k: T.Tensor(v) for k, v in sorted(params.arrays.items())}
            return enc.encode(graph, genotype, tensors)[2].data.tobytes()

        assert run() == run()

    def test_odd_dim_with_rotate_rejected(self):
        rng = np.random.default_rng(10)
        with pytest.raises(ValueError):
            enc.SupernetParams.init(rng, 4, 2, dim=5, num_layers=1)


class TestPredict:
    def test_zero_input_zero_logits(self):
        rng = np.random.default_rng(11)
        graph = random_graph(rng)
        params = make_params(rng, graph, dim=4, layers=1)
        tensors = {k: T.Tensor(v) for k, v in sorted(params.arrays.items())}
        out = enc.predict(T.Tensor(np.zeros((3, 8))), tensors)
        assert np.allclose(out.data, 0.0)

    def test_single_entry_isolates_coordinate(self):
        w = np.zeros((8, 3))
        w[5, 1] = 2.0
        z = np.arange(8.0).reshape(1, 8)
        out = T.matmul(T.Tensor(z), T.Tensor(w)).data
        assert np.allclose(out, [[0.0, 10.0, 0.0]])

    def test_loop_oracle(self):
        rng = np.random.default_rng(12)
        z = rng.normal(size=(4, 8))
        w = rng.normal(size=(8, 5))
        out = T.matmul(T.Tensor(z), T.Tensor(w)).data
        expected = np.array([[sum(z[i, k] * w[k, j] for k in range(8))
                              for j in range(5)] for i in range(4)])
        assert np.max(np.abs(out - expected)) < 1e-12

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(13)
        graph = random_graph(rng)
        params = make_params(rng, graph, dim=4, layers=1)
        tensors = {k: T.Tensor(v) for k, v in sorted(params.arrays.items())}
        with pytest.raises(T.ShapeError):
            enc.predict(T.Tensor(np.zeros((3, 5))), tensors)


class TestTaskLoss:
    def test_uniform_logits_closed_form(self):
        loss = enc.task_loss(T.Tensor(np.zeros((6, 4))), [0, 1, 2, 3, 0, 1],
                             "multi_class")
        assert np.allclose(loss.item(), np.log(4))

    def test_multilabel_oracle(self):
        rng = np.random.default_rng(14)
        logits = rng.normal(size=(6, 3))
        rels = rng.integers(0, 3, size=6)
        labels = rng.integers(0, 2, size=6).astype(float)
        loss = enc.task_loss(T.Tensor(logits), rels, "multi_label", labels)
        picked = logits[np.arange(6), rels]
        expected = np.mean(np.logaddexp(0, picked) - labels * picked)
        assert abs(loss.item() - expected) < 1e-10

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            enc.task_loss(T.Tensor(np.zeros((2, 3))), [0, 5], "multi_class")


class TestParamsIO:
    def test_save_load_roundtrip(self, tmp_path):
        rng = np.random.default_rng(15)
        params = enc.SupernetParams.init(rng, 6, 2, 4, 2)
        path = tmp_path / "p.params"
        params.save(path, meta={"tag": "x"})
        loaded, meta = enc.SupernetParams.load(path)
        assert meta["tag"] == "x"
        for k in params.arrays:
            assert np.array_equal(params.arrays[k], loaded.arrays[k])

    def test_save_is_deterministic(self, tmp_path):
        rng = np.random.default_rng(16)
        params = enc.SupernetParams.init(rng, 6, 2, 4, 2)
        p1, p2 = tmp_path / "a", tmp_path / "b"
        params.save(p1)
        params.save(p2)
        assert p1.read_bytes() == p2.read_bytes()
