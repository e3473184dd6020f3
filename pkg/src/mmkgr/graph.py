"""Knowledge-graph storage, TSV ingestion and per-step action spaces."""
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels

NO_OP_NAME = "NO_OP"
INVERSE_SUFFIX = "_inv"


class ParseError(ValueError):
    pass


class Triplet(NamedTuple):
    head: int
    relation: int
    tail: int


class Vocab:
    """Name <-> dense id mapping in first-seen order."""

    def __init__(self, names=()):
        self._ids = {}
        self.names = []
        for n in names:
            self.add(n)

    def add(self, name):
        i = self._ids.get(name)
        if i is None:
            i = len(self.names)
            self._ids[name] = i
            self.names.append(name)
        return i

    def __getitem__(self, name):
        return self._ids[name]

    def __contains__(self, name):
        return name in self._ids

    def __len__(self):
        return len(self.names)

    def dump(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for i, n in enumerate(self.names):
                fh.write(f"{n}\t{i}\n")

    @classmethod
    def load(cls, path):
        rows = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise ParseError(f"{path}:{lineno}: expected 'name<TAB>id'")
                rows.append((int(parts[1]), parts[0]))
        rows.sort()
        if [i for i, _ in rows] != list(range(len(rows))):
            raise ParseError(f"{path}: ids are not dense 0..n-1")
        return cls(n for _, n in rows)


def load_triplets(path, entities, relations):
    """Parse a ``head<TAB>relation<TAB>tail`` file, growing the vocabularies."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(parts):
                raise ParseError(f"{path}: line {lineno}: expected 3 tab-separated fields, "
                                 f"got {len(parts)}")
            h, r, t = parts
            out.append(Triplet(entities.add(h), relations.add(r), entities.add(t)))
    if not out:
        raise ParseError(f"{path}: no triplets")
    return out


def write_triplets(path, triplets, entities, relations):
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in triplets:
            fh.write(f"{entities.names[h]}\t{relations.names[r]}\t{entities.names[t]}\n")


@dataclass
class DatasetSplit:
    train: list
    valid: list
    test: list
    # relations the agent is trained and evaluated on; None means all of them
    query_relations: object = None

    def __post_init__(self):
        self.train = _dedupe(self.train)
        self.valid = _dedupe(self.valid)
        self.test = _dedupe(self.test)
        tr, va, te = set(self.train), set(self.valid), set(self.test)
        if tr & va or tr & te or va & te:
            raise ValueError("dataset splits overlap")

    def all_triplets(self):
        return self.train + self.valid + self.test


def _dedupe(triplets):
    seen, out = set(), []
    for t in triplets:
        t = Triplet(*map(int, t))
        if t not in seen:
            seen.add(t)
            out.append(t)
    return out


class KnowledgeGraph:
    """Immutable adjacency over (relation, tail) pairs in CSR form.

    Relation ids: ``0..R-1`` are the base relations, ``R..2R-1`` their
    inverses when enabled, and the last id is the reserved ``NO_OP`` used by
    the STOP self-loop.
    """

    def __init__(self, entity_count, base_relation_count, triplets, add_inverses=True):
        self.entity_count = int(entity_count)
        self.base_relation_count = int(base_relation_count)
        self.add_inverses = bool(add_inverses)
        R = self.base_relation_count
        self.relation_count = 2 * R + 1 if add_inverses else R + 1
        self.no_op = self.relation_count - 1
        edges = set()
        for h, r, t in triplets:
            if not (0 <= h < entity_count and 0 <= t < entity_count and 0 <= r < R):
                raise ValueError(f"triplet {(h, r, t)} has out-of-range ids")
            edges.add((h, r, t))
            if add_inverses:
                edges.add((t, r + R, h))
        arr = np.array(sorted(edges), dtype=np.int64).reshape(-1, 3)
        counts = np.bincount(arr[:, 0], minlength=entity_count)
        self.indptr = np.zeros(entity_count + 1, dtype=np.int64)
        np.cumsum(counts, out=self.indptr[1:])
        self.adj_rel = np.ascontiguousarray(arr[:, 1])
        self.adj_ent = np.ascontiguousarray(arr[:, 2])
        self._edge_set = edges
        self._truncated = {}

    def inverse(self, r):
        if r == self.no_op:
            return r
        if not self.add_inverses:
            raise ValueError("graph has no inverse relations")
        R = self.base_relation_count
        return r + R if r < R else r - R

    def has_edge(self, h, r, t):
        return (h, r, t) in self._edge_set

    def out_degree(self, e):
        return int(self.indptr[e + 1] - self.indptr[e])

    def neighbors(self, e):
        lo, hi = self.indptr[e], self.indptr[e + 1]
        return list(zip(self.adj_rel[lo:hi].tolist(), self.adj_ent[lo:hi].tolist()))

    def truncated(self, max_actions):
        """CSR view keeping, per entity, the ``max_actions`` edges whose tails
        have the highest out-degree (ties by entity id), re-sorted by
        (relation, tail)."""
        if max_actions is None or max_actions >= int(np.diff(self.indptr).max(initial=0)):
            return self.indptr, self.adj_rel, self.adj_ent
        if max_actions in self._truncated:
            return self._truncated[max_actions]
        deg = np.diff(self.indptr)
        ptr = [0]
        rels, ents = [], []
        for e in range(self.entity_count):
            lo, hi = self.indptr[e], self.indptr[e + 1]
            r, t = self.adj_rel[lo:hi], self.adj_ent[lo:hi]
            if len(r) > max_actions:
                order = np.lexsort((r, t, -deg[t]))[:max_actions]
                keep = np.sort(order)
                r, t = r[keep], t[keep]
            rels.append(r)
            ents.append(t)
            ptr.append(ptr[-1] + len(r))
        view = (np.array(ptr, dtype=np.int64),
                np.ascontiguousarray(np.concatenate(rels)).astype(np.int64),
                np.ascontiguousarray(np.concatenate(ents)).astype(np.int64))
        self._truncated[max_actions] = view
        return view


def build_graph(triplets, entity_count, relation_count, add_inverses=True):
    return KnowledgeGraph(entity_count, relation_count, triplets, add_inverses=add_inverses)


class ActionSpace(NamedTuple):
    relations: np.ndarray
    entities: np.ndarray

    def __len__(self):
        return len(self.relations)

    def pairs(self):
        return list(zip(self.relations.tolist(), self.entities.tolist()))


def valid_actions(graph, e_t, max_actions=None, query=None, step=0, mask_direct=False):
    """Outgoing edges of ``e_t`` plus the trailing STOP self-loop.

    With ``mask_direct`` set, the query's own edge ``(e_s, r_q, e_d)`` is
    removed whenever the walk stands on ``e_s``; at ``step == 0`` that is
    always the case.
    """
    if query is None:
        rels, ents, _ = batch_actions(graph, np.array([e_t]), max_actions)
    else:
        rels, ents, _ = batch_actions(graph, np.array([e_t]), max_actions,
                                      np.array([query.head]), np.array([query.relation]),
                                      np.array([query.tail]), np.array([bool(mask_direct)]))
    return ActionSpace(rels, ents)


def batch_actions(graph, current, max_actions=None, q_head=None, q_rel=None, q_tail=None,
                  mask=None):
    """Concatenated action spaces for a batch of entities -> (rels, ents, offsets)."""
    current = np.ascontiguousarray(current, dtype=np.int64)
    n = len(current)
    if q_rel is None:
        q_head = q_rel = q_tail = np.full(n, -1, dtype=np.int64)
    if mask is None:
        mask = np.zeros(n, dtype=np.bool_)
    indptr, adj_rel, adj_ent = graph.truncated(max_actions)
    return kernels.gather_actions(indptr, adj_rel, adj_ent, current,
                                  np.ascontiguousarray(q_head, dtype=np.int64),
                                  np.ascontiguousarray(q_rel, dtype=np.int64),
                                  np.ascontiguousarray(q_tail, dtype=np.int64),
                                  np.ascontiguousarray(mask, dtype=np.bool_), graph.no_op)


@dataclass
class Dataset:
    """Vocabularies, splits and the train graph."""
    entities: Vocab
    relations: Vocab
    split: DatasetSplit
    graph: KnowledgeGraph = field(default=None)

    @property
    def entity_count(self):
        return len(self.entities)

    @property
    def relation_count(self):
        return len(self.relations)

    def build(self, add_inverses=True):
        self.graph = build_graph(self.split.train, len(self.entities), len(self.relations),
                                 add_inverses=add_inverses)
        return self.graph

    def relation_name(self, r):
        R = len(self.relations)
        if self.graph is not None and r == self.graph.no_op:
            return NO_OP_NAME
        if r >= R:
            return self.relations.names[r - R] + INVERSE_SUFFIX
        return self.relations.names[r]


def load_dataset(directory, add_inverses=True):
    """Read ``train.txt``/``valid.txt``/``test.txt`` from a dataset directory.

    If ``entities.tsv``/``relations.tsv`` exist they fix the id order.
    """
    import os
    ent_path = os.path.join(directory, "entities.tsv")
    rel_path = os.path.join(directory, "relations.tsv")
    entities = Vocab.load(ent_path) if os.path.exists(ent_path) else Vocab()
    relations = Vocab.load(rel_path) if os.path.exists(rel_path) else Vocab()
    parts = {}
    for name in ("train", "valid", "test"):
        parts[name] = load_triplets(os.path.join(directory, f"{name}.txt"), entities, relations)
    qpath = os.path.join(directory, "query_relations.txt")
    query_relations = None
    if os.path.exists(qpath):
        with open(qpath, encoding="utf-8") as fh:
            query_relations = sorted(relations[l.strip()] for l in fh if l.strip())
    ds = Dataset(entities, relations, DatasetSplit(parts["train"], parts["valid"], parts["test"],
                                                   query_relations))
    ds.build(add_inverses)
    return ds


def save_dataset(directory, ds):
    import os
    os.makedirs(directory, exist_ok=True)
    ds.entities.dump(os.path.join(directory, "entities.tsv"))
    ds.relations.dump(os.path.join(directory, "relations.tsv"))
    for name in ("train", "valid", "test"):
        write_triplets(os.path.join(directory, f"{name}.txt"), getattr(ds.split, name),
                       ds.entities, ds.relations)
    if ds.split.query_relations is not None:
        with open(os.path.join(directory, "query_relations.txt"), "w", encoding="utf-8") as fh:
            for r in ds.split.query_relations:
                fh.write(ds.relations.names[r] + "\n")
