"""Planted-rule multi-modal graphs for desk-scale experiments.

Each rule ``(r_q, r_1, ..., r_L)`` is instantiated as a chain
``x -r_1-> y_1 -> ... -r_L-> z`` plus the labelled query ``(x, r_q, z)``.
Train queries keep their ``r_q`` edge in the graph; valid/test queries are
answerable only by composing the chain.  Optional decoys add a second
``r_L`` edge from the last bridge so that structure alone cannot pick ``z``.
"""
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .features import ModalFeatures
from .graph import Dataset, DatasetSplit, Triplet, Vocab

MODALITY_MODES = ("none", "text", "image", "both")


class InfeasibleSpec(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    entity_count: int = 200
    relation_count: int = 8
    branching: int = 5
    rules: tuple = ((0, 1, 2),)
    instances: int = 0                 # per rule; 0 picks a size from entity_count
    distractor_ratio: float = 0.0      # share of distractor edges that reuse rule-body relations
    decoy_ratio: float = 0.0           # share of instances with a structural twin of the answer
    modality: str = "both"
    d_t: int = 16
    d_i: int = 16
    signal_strength: float = 3.0
    noise_mean: float = 0.0
    valid_fraction: float = 0.1
    test_fraction: float = 0.2
    seed: int = 0

    def validate(self):
        if self.modality not in MODALITY_MODES:
            raise InfeasibleSpec(f"modality must be one of {MODALITY_MODES}, got {self.modality!r}")
        if self.entity_count < 4 or self.relation_count < 1:
            raise InfeasibleSpec("need at least 4 entities and 1 relation")
        used = set()
        for rule in self.rules:
            if len(rule) < 2 or len(rule) > 4:
                raise InfeasibleSpec(f"rule {rule} must have a head and 1-3 body relations")
            if rule[0] in rule[1:]:
                raise InfeasibleSpec(f"rule {rule}: query relation reused in the body")
            if any(not 0 <= r < self.relation_count for r in rule):
                raise InfeasibleSpec(f"rule {rule} references an unknown relation")
            used.update(rule)
        rule_outdeg = 2 if self.decoy_ratio > 0 else 1
        if self.branching < rule_outdeg + 1:
            raise InfeasibleSpec(f"branching {self.branching} leaves no room for distractors "
                                 f"(rule edges already use {rule_outdeg} per node)")
        if not 0 <= self.distractor_ratio <= 1 or not 0 <= self.decoy_ratio <= 1:
            raise InfeasibleSpec("ratios must lie in [0, 1]")


class SyntheticMKG(NamedTuple):
    dataset: Dataset
    features: ModalFeatures
    signal_entities: np.ndarray     # bool mask of entities carrying the modality signal
    decoys: dict                    # query (x, r_q, z) -> decoy entity

    @property
    def graph(self):
        return self.dataset.graph

    @property
    def split(self):
        return self.dataset.split


def generate_synthetic_mkg(spec, add_inverses=True):
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5EED]))
    E = spec.entity_count
    entities = Vocab(f"e{i:04d}" for i in range(E))
    rel_names = []
    query_rels, body_rels = set(), set()
    for i, rule in enumerate(spec.rules):
        query_rels.add(rule[0])
        body_rels.update(rule[1:])
    for r in range(spec.relation_count):
        if r in query_rels:
            rel_names.append(f"q{r}")
        elif r in body_rels:
            rel_names.append(f"b{r}")
        else:
            rel_names.append(f"n{r}")
    relations = Vocab(rel_names)
    noise_rels = [r for r in range(spec.relation_count) if r not in query_rels and r not in body_rels]

    edges = set()
    queries = []
    signal = np.zeros(E, bool)
    decoys = {}
    taken_bridges = set()
    for rule in spec.rules:
        L = len(rule) - 1
        with_decoys = spec.decoy_ratio > 0
        # bridges are unique so their body-relation in-edges come from one
        # instance only; with decoys the answer and its twin are fresh as well,
        # so neither carries structure the other lacks
        fresh = (L - 1) + (2 if with_decoys else 0)
        n_inst = spec.instances or max(1, int(E * 0.75) // max(fresh, 1))
        free = np.array([e for e in range(E) if e not in taken_bridges])
        need = n_inst * fresh
        if need > len(free):
            raise InfeasibleSpec(f"{n_inst} instances of a {L}-hop rule need {need} fresh "
                                 f"entities, only {len(free)} available")
        pool = rng.permutation(free)[:need].reshape(n_inst, fresh)
        heads = rng.permutation(E)
        if with_decoys:
            # answers and twins never start a chain, so they stay structurally alike
            ends = set(pool[:, L - 1:].ravel().tolist())
            heads = np.array([h for h in heads if int(h) not in ends])
        used_heads = set()
        n_decoy = int(round(spec.decoy_ratio * n_inst))
        for i in range(n_inst):
            bridges = pool[i, :L - 1].tolist()
            x = next((int(h) for h in heads if int(h) not in used_heads and int(h) not in pool[i]),
                     None)
            if x is None:
                raise InfeasibleSpec("ran out of head entities")
            used_heads.add(x)
            if with_decoys:
                z = int(pool[i, L - 1])
            else:
                z = x
                while z == x or z in bridges:
                    z = int(rng.integers(E))
            chain = bridges + [z]
            nodes = [x] + chain
            for r, a, b in zip(rule[1:], nodes[:-1], nodes[1:]):
                edges.add((a, r, b))
            signal[chain] = True
            taken_bridges.update(pool[i].tolist())
            queries.append(Triplet(x, rule[0], z))
            if i < n_decoy:
                # the twin hangs off the last hop like the answer but carries no signal
                d = int(pool[i, L])
                edges.add((nodes[-2], rule[-1], d))
                decoys[queries[-1]] = d

    order = rng.permutation(len(queries))
    n_test = int(round(spec.test_fraction * len(queries)))
    n_valid = int(round(spec.valid_fraction * len(queries)))
    test = [queries[i] for i in order[:n_test]]
    valid = [queries[i] for i in order[n_test:n_test + n_valid]]
    train_q = [queries[i] for i in order[n_test + n_valid:]]
    held_out = set(test) | set(valid)
    for q in train_q:
        edges.add(tuple(q))

    _add_distractors(edges, spec, rng, noise_rels, held_out)
    train = sorted(Triplet(*e) for e in edges)
    split = DatasetSplit(train, valid, test, query_relations=sorted(query_rels))
    ds = Dataset(entities, relations, split)
    ds.build(add_inverses)

    text = rng.normal(spec.noise_mean, 1.0, (E, spec.d_t))
    image = rng.normal(spec.noise_mean, 1.0, (E, spec.d_i))
    if spec.modality in ("text", "both"):
        u = _unit(rng, spec.d_t)
        text[signal] += spec.signal_strength * u
    if spec.modality in ("image", "both"):
        u = _unit(rng, spec.d_i)
        image[signal] += spec.signal_strength * u
    return SyntheticMKG(ds, ModalFeatures(text, image), signal, decoys)


def _unit(rng, d):
    v = rng.normal(size=d)
    return v / np.linalg.norm(v)


def _add_distractors(edges, spec, rng, noise_rels, held_out):
    """Top every entity up to ``branching`` out-edges without completing any rule."""
    E = spec.entity_count
    out_deg = np.zeros(E, dtype=np.int64)
    for a, _, _ in edges:
        out_deg[a] += 1
    nexts, prevs = {}, {}
    for rule in spec.rules:
        body = rule[1:]
        for i, r in enumerate(body):
            nexts.setdefault(r, set())
            prevs.setdefault(r, set())
            if i + 1 < len(body):
                nexts[r].add(body[i + 1])
            if i > 0:
                prevs[r].add(body[i - 1])
    body_rels = sorted(nexts)
    out_rels = {}
    in_rels = {}
    for a, r, b in edges:
        out_rels.setdefault(a, set()).add(r)
        in_rels.setdefault(b, set()).add(r)
    blocked = {(q.head, q.tail) for q in held_out}
    for a in rng.permutation(E):
        a = int(a)
        tries = 0
        while out_deg[a] < spec.branching and tries < 50 * spec.branching:
            tries += 1
            b = int(rng.integers(E))
            if b == a or (a, b) in blocked:
                continue
            use_body = body_rels and (not noise_rels or rng.random() < spec.distractor_ratio)
            if use_body:
                r = int(body_rels[rng.integers(len(body_rels))])
                # an edge a -r-> b must not link up with a neighbouring body relation
                if nexts[r] & out_rels.get(b, set()) or prevs[r] & in_rels.get(a, set()):
                    continue
                if r in out_rels.get(a, set()):
                    continue
            else:
                r = int(noise_rels[rng.integers(len(noise_rels))])
            if (a, r, b) in edges:
                continue
            edges.add((a, r, b))
            out_rels.setdefault(a, set()).add(r)
            in_rels.setdefault(b, set()).add(r)
            out_deg[a] += 1
        if out_deg[a] < spec.branching:
            raise InfeasibleSpec(f"could not place distractors around entity {a}")
