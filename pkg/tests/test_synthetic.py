import numpy as np
import pytest

from mmkgr.synthetic import InfeasibleSpec, SyntheticSpec, generate_synthetic_mkg


def compose(graph, start, body):
    frontier = {start}
    for r in body:
        frontier = {t for e in frontier for rr, t in graph.neighbors(e) if rr == r}
    return frontier


@pytest.mark.parametrize("rules", [((0, 1, 2),), ((0, 1, 2, 3),), ((0, 1, 2), (3, 4, 5))])
def test_rules_compose_to_exactly_the_answer(rules):
    spec = SyntheticSpec(entity_count=120, relation_count=8, rules=rules, seed=3, instances=30,
                         distractor_ratio=0.3)
    mkg = generate_synthetic_mkg(spec)
    g, split = mkg.graph, mkg.split
    by_rel = {r[0]: r[1:] for r in rules}
    queries = [q for q in split.train + split.valid + split.test if q.relation in by_rel]
    for h, r, t in queries:
        assert compose(g, h, by_rel[r]) == {t}
    # no entity outside the query heads completes a rule body
    heads = {(q.head, q.relation) for q in queries}
    for rule in rules:
        for e in range(g.entity_count):
            if (e, rule[0]) not in heads:
                assert compose(g, e, rule[1:]) == set()


def test_held_out_queries_need_composition():
    mkg = generate_synthetic_mkg(SyntheticSpec(seed=0))
    g = mkg.graph
    for q in mkg.split.test + mkg.split.valid:
        assert not g.has_edge(*q)
    for q in mkg.split.train:
        if q.relation == 0:
            assert g.has_edge(*q)
    assert mkg.split.query_relations == [0]
    assert len(mkg.split.test) > 0 and len(mkg.split.valid) > 0


def test_branching_reached():
    mkg = generate_synthetic_mkg(SyntheticSpec(entity_count=100, branching=5, seed=1))
    g = mkg.graph
    base = np.bincount(np.repeat(np.arange(g.entity_count), np.diff(g.indptr))[
        g.adj_rel < g.base_relation_count], minlength=g.entity_count)
    assert base.min() >= 5


def test_modality_signal_is_separable():
    mkg = generate_synthetic_mkg(SyntheticSpec(seed=0, modality="both"))
    sig = mkg.signal_entities
    for vec in (mkg.features.text, mkg.features.image):
        # projection on the mean difference separates the two groups
        d = vec[sig].mean(0) - vec[~sig].mean(0)
        proj = vec @ d
        thr = (proj[sig].mean() + proj[~sig].mean()) / 2
        acc = np.mean((proj > thr) == sig)
        assert acc > 0.9
    none = generate_synthetic_mkg(SyntheticSpec(seed=0, modality="none"))
    text_only = generate_synthetic_mkg(SyntheticSpec(seed=0, modality="text"))
    np.testing.assert_array_equal(text_only.features.image, none.features.image)
    assert not np.array_equal(text_only.features.text, none.features.text)


def test_decoys_are_structural_twins_without_signal():
    mkg = generate_synthetic_mkg(SyntheticSpec(seed=0, decoy_ratio=1.0))
    g = mkg.graph
    assert len(mkg.decoys) > 0
    for q, d in mkg.decoys.items():
        ends = compose(g, q.head, (1, 2))
        assert ends == {q.tail, d}
        assert not mkg.signal_entities[d] and mkg.signal_entities[q.tail]


def test_deterministic_per_seed():
    a = generate_synthetic_mkg(SyntheticSpec(seed=5))
    b = generate_synthetic_mkg(SyntheticSpec(seed=5))
    c = generate_synthetic_mkg(SyntheticSpec(seed=6))
    assert a.split.train == b.split.train and a.split.test == b.split.test
    assert a.features.text.tobytes() == b.features.text.tobytes()
    assert a.split.train != c.split.train


@pytest.mark.parametrize("kwargs", [
    dict(modality="video"), dict(rules=((0, 0, 1),)), dict(rules=((0, 9, 1),)),
    dict(branching=1), dict(rules=((0,),)), dict(entity_count=10, instances=50),
])
def test_infeasible_specs(kwargs):
    with pytest.raises(InfeasibleSpec):
        generate_synthetic_mkg(SyntheticSpec(**kwargs))
