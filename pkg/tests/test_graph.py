import numpy as np
import pytest

from mmkgr.graph import (Dataset, DatasetSplit, KnowledgeGraph, ParseError, Triplet, Vocab,
                         batch_actions, build_graph, load_dataset, load_triplets, save_dataset,
                         valid_actions)


def small_graph(add_inverses=True):
    # 0 -r0-> 1, 0 -r1-> 2, 1 -r0-> 2
    return build_graph([(0, 0, 1), (0, 1, 2), (1, 0, 2)], 3, 2, add_inverses=add_inverses)


def test_relation_ids_and_no_op():
    g = small_graph()
    assert g.relation_count == 5 and g.no_op == 4
    assert g.inverse(0) == 2 and g.inverse(3) == 1 and g.inverse(g.no_op) == g.no_op
    assert g.has_edge(1, 2, 0) and g.has_edge(2, 3, 0)
    plain = small_graph(add_inverses=False)
    assert plain.relation_count == 3 and plain.no_op == 2
    with pytest.raises(ValueError):
        plain.inverse(0)


def test_out_of_range_triplet_rejected():
    with pytest.raises(ValueError, match="out-of-range"):
        build_graph([(0, 5, 1)], 3, 2)


def test_valid_actions_lists_edges_then_stop():
    g = small_graph()
    acts = valid_actions(g, 0)
    assert acts.pairs() == [(0, 1), (1, 2), (g.no_op, 0)]
    # a dead end keeps only the STOP self-loop
    dead = small_graph(add_inverses=False)
    assert valid_actions(dead, 2).pairs() == [(dead.no_op, 2)]


def test_query_edge_masked_at_source_only():
    g = small_graph()
    q = Triplet(0, 0, 1)
    assert (0, 1) not in valid_actions(g, 0, query=q, mask_direct=True).pairs()
    assert (0, 1) in valid_actions(g, 0, query=q, mask_direct=False).pairs()
    # standing elsewhere nothing is masked
    assert valid_actions(g, 1, query=q, mask_direct=True).pairs() == valid_actions(g, 1).pairs()


def test_truncation_keeps_highest_degree_tails():
    edges = [(0, 0, t) for t in range(1, 6)] + [(3, 0, 1), (3, 0, 2), (5, 0, 1)]
    g = build_graph(edges, 6, 1, add_inverses=False)
    acts = valid_actions(g, 0, max_actions=2)
    assert acts.pairs() == [(0, 3), (0, 5), (g.no_op, 0)]
    assert len(valid_actions(g, 0, max_actions=50)) == 6


def test_batch_actions_offsets():
    g = small_graph()
    rels, ents, offsets = batch_actions(g, np.array([0, 2, 0]))
    assert offsets.tolist() == [0, 3, 6, 9]
    assert ents[offsets[1]:offsets[2]].tolist() == [1, 0, 2]
    assert rels[offsets[2] - 1] == g.no_op


def test_vocab_round_trip(tmp_path):
    v = Vocab(["b", "a", "b", "c"])
    assert v.names == ["b", "a", "c"] and v["c"] == 2 and "a" in v and len(v) == 3
    v.dump(tmp_path / "v.tsv")
    assert Vocab.load(tmp_path / "v.tsv").names == v.names
    (tmp_path / "bad.tsv").write_text("a\t0\nb\t2\n")
    with pytest.raises(ParseError):
        Vocab.load(tmp_path / "bad.tsv")


def test_load_triplets_reports_line(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("a\tr\tb\n\nb\tr\n")
    with pytest.raises(ParseError, match="line 3"):
        load_triplets(p, Vocab(), Vocab())
    (tmp_path / "e.txt").write_text("\n")
    with pytest.raises(ParseError, match="no triplets"):
        load_triplets(tmp_path / "e.txt", Vocab(), Vocab())


def test_split_overlap_rejected_and_deduped():
    s = DatasetSplit([(0, 0, 1), (0, 0, 1)], [(1, 0, 2)], [])
    assert s.train == [Triplet(0, 0, 1)]
    with pytest.raises(ValueError, match="overlap"):
        DatasetSplit([(0, 0, 1)], [(0, 0, 1)], [])


def test_dataset_save_load_round_trip(tmp_path):
    ents, rels = Vocab(["x", "y", "z"]), Vocab(["p", "q"])
    ds = Dataset(ents, rels, DatasetSplit([(0, 0, 1), (1, 1, 2)], [(0, 1, 2)], [(2, 0, 0)],
                                          query_relations=[1]))
    ds.build()
    save_dataset(tmp_path, ds)
    back = load_dataset(tmp_path)
    assert back.entities.names == ents.names and back.relations.names == rels.names
    assert back.split.train == ds.split.train and back.split.test == ds.split.test
    assert back.split.query_relations == [1]
    assert back.relation_name(3) == "q_inv" and back.relation_name(back.graph.no_op) == "NO_OP"
    np.testing.assert_array_equal(back.graph.adj_ent, ds.graph.adj_ent)
