"""Shaped terminal reward: destination, distance and path diversity terms."""
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import kernels
from .numerics import Adam, Parameter, load_tensors, save_tensors, sigmoid


# ------------------------------------------------------------------- scorer

class TripletScorer:
    """Interface: ``score(heads, relations, tails) -> probabilities in (0, 1)``."""

    def score(self, heads, relations, tails):  # pragma: no cover - interface
        raise NotImplementedError


class BilinearScorer(TripletScorer):
    """sigma(<e_s * r, e>) with diagonal relation matrices."""

    def __init__(self, entity, relation):
        self.entity = np.asarray(entity, dtype=np.float64)
        self.relation = np.asarray(relation, dtype=np.float64)

    def raw(self, heads, relations, tails):
        return np.sum(self.entity[heads] * self.relation[relations] * self.entity[tails], axis=-1)

    def score(self, heads, relations, tails):
        return sigmoid(np.atleast_1d(self.raw(heads, relations, tails)).astype(np.float64))

    def save(self, path):
        save_tensors(path, {"scorer.entity": self.entity, "scorer.relation": self.relation})

    @classmethod
    def load(cls, path):
        t = load_tensors(path)
        return cls(t["scorer.entity"], t["scorer.relation"])

    @classmethod
    def untrained(cls, entity_count, relation_count, dim=32, seed=0, scale=0.1):
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, scale, (entity_count, dim)),
                   rng.normal(0.0, scale, (relation_count, dim)))


def train_scorer(graph, dim=32, negatives=4, epochs=50, lr=0.05, seed=0, batch_size=512,
                 l2=1e-4):
    """Binary cross-entropy on graph edges against tail-corrupted negatives."""
    heads = np.repeat(np.arange(graph.entity_count), np.diff(graph.indptr))
    rels, tails = graph.adj_rel, graph.adj_ent
    n = len(heads)
    if n == 0:
        raise ValueError("cannot train the scorer on an empty train set")
    rng = np.random.default_rng(seed)
    ent = Parameter("scorer.entity", rng.normal(0.0, 0.1, (graph.entity_count, dim)))
    rel = Parameter("scorer.relation", rng.normal(0.0, 0.1, (graph.relation_count, dim)))
    opt = Adam([ent, rel], lr=lr)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for lo in range(0, n, batch_size):
            b = order[lo:lo + batch_size]
            k = len(b)
            batches += 1
            h = np.concatenate([heads[b], np.repeat(heads[b], negatives)])
            r = np.concatenate([rels[b], np.repeat(rels[b], negatives)])
            t = np.concatenate([tails[b], rng.integers(0, graph.entity_count, k * negatives)])
            y = np.concatenate([np.ones(k), np.zeros(k * negatives)])
            w = np.concatenate([np.full(k, 1.0), np.full(k * negatives, 1.0 / negatives)]) / k
            eh, er, et = ent.value[h], rel.value[r], ent.value[t]
            s = np.sum(eh * er * et, axis=1)
            p = sigmoid(s)
            total += float(-np.sum(w * (y * np.log(p + 1e-12) + (1 - y) * np.log(1 - p + 1e-12))))
            gs = (w * (p - y))[:, None]
            kernels.scatter_add_rows(ent.grad, h, gs * er * et)
            kernels.scatter_add_rows(ent.grad, t, gs * eh * er)
            kernels.scatter_add_rows(rel.grad, r, gs * eh * et)
            ent.grad += l2 * ent.value
            rel.grad += l2 * rel.value
            opt.step()
        losses.append(total / batches)
    scorer = BilinearScorer(ent.value.copy(), rel.value.copy())
    scorer.losses = losses
    return scorer


# ---------------------------------------------------------------- components

@dataclass(frozen=True)
class RewardWeights:
    destination: float = 0.1
    distance: float = 0.8
    diversity: float = 0.1

    def __post_init__(self):
        w = (self.destination, self.distance, self.diversity)
        if min(w) < 0:
            raise ValueError(f"reward weights must be non-negative, got {w}")
        if abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"reward weights must sum to 1, got {w} (sum {sum(w)})")

    def as_tuple(self):
        return (self.destination, self.distance, self.diversity)


def destination_reward(e_T, query, scorer):
    """1 on the target, otherwise the scorer's probability for (e_s, r_q, e_T)."""
    e_s, r_q, e_d = query
    if e_T == e_d:
        return 1.0
    return float(scorer.score(np.array([e_s]), np.array([r_q]), np.array([e_T]))[0])


def distance_reward(k, threshold=3):
    """1/k up to ``threshold`` hops, -1/k**2 beyond; 0 for an all-STOP path."""
    if k <= 0:
        return 0.0
    return 1.0 / k if k <= threshold else -1.0 / (k * k)


def diversity_reward(p, memory, bandwidth=3.0):
    """-(1/V) sum_i exp(-||p - p_i|| / (2 u^2)) over the V stored paths."""
    if memory is None or len(memory) == 0:
        return 0.0
    stored = np.asarray(memory)
    dist = np.linalg.norm(stored - np.asarray(p)[None, :], axis=1)
    return -float(np.mean(np.exp(-dist / (2.0 * bandwidth ** 2))))


def total_reward(dest, dist, div, weights):
    l1, l2, l3 = weights.as_tuple() if isinstance(weights, RewardWeights) else weights
    return l1 * dest + l2 * dist + l3 * div


def path_embedding(relations, relation_table, no_op=None):
    """Mean embedding of the non-STOP relations; zeros for an all-STOP path."""
    rels = [r for r in relations if r != no_op]
    if not rels:
        return np.zeros(relation_table.shape[1])
    return np.mean(relation_table[rels], axis=0)


class PathMemory:
    """FIFO of successful path embeddings per (e_s, r_q)."""

    def __init__(self, capacity=100):
        self.capacity = capacity
        self._store = {}

    def get(self, key):
        return self._store.get(key, ())

    def count(self, key):
        return len(self._store.get(key, ()))

    def update(self, key, p, succeeded):
        if not succeeded:
            return
        buf = self._store.setdefault(key, deque(maxlen=self.capacity))
        buf.append(np.array(p, dtype=np.float64))

    def snapshot(self, key):
        return [v.copy() for v in self._store.get(key, ())]

    def __len__(self):
        return len(self._store)


def update_memory(memory, key, p, succeeded):
    memory.update(key, p, succeeded)
