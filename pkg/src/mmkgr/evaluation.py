"""Beam-search inference, ranking metrics and the per-hop breakdown.

Ranking is filtered: other known-true answers of a query are dropped before
the rank of the target is read off.  An answer the beam never reaches gets
rank infinity (reciprocal rank 0).
"""
import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .agent import greedy, run_episodes
from .env import EpisodeState
from .features import HistoryState
from .numerics import Tape

HITS_AT = (1, 5, 10)


@dataclass(frozen=True)
class BeamConfig:
    width: int = 100

    def __post_init__(self):
        if self.width < 1:
            raise ValueError(f"beam width must be >= 1, got {self.width}")


@dataclass
class BeamResult:
    """Final beams of one query plus the per-entity ranking they induce."""
    query: tuple
    paths: list           # [(relations, entities, probability)], best first
    scores: dict          # entity -> best path probability
    mass: dict            # entity -> summed probability of the final beams ending there
    best_paths: dict      # entity -> (relations, entities)

    def ranking(self):
        """Entities by descending best-path probability, ties by entity id."""
        return sorted(self.scores, key=lambda e: (-self.scores[e], e))


def _take(tp, state, idx):
    """Row-select a batched episode state (beam bookkeeping)."""
    h = HistoryState(tp.const(state.history.h.value[idx]), tp.const(state.history.c.value[idx]),
                     state.history.t)
    return EpisodeState(
        entities=state.entities[idx], sources=state.sources[idx],
        query_relations=state.query_relations[idx], targets=state.targets[idx], history=h,
        t=state.t, mask_direct=state.mask_direct[idx], hops=state.hops[idx],
        relation_path=[p[idx] for p in state.relation_path],
        entity_path=[p[idx] for p in state.entity_path])


def beam_search(model, env, queries, width=100):
    """Batched beam search; returns one :class:`BeamResult` per query row.

    Every step keeps, per query, the ``width`` partial paths with the highest
    cumulative log-probability (stable order on ties, so width 1 is the
    greedy rollout).
    """
    queries = np.asarray(queries, dtype=np.int64).reshape(-1, 3)
    Q = len(queries)
    if Q == 0:
        return []
    tp = Tape(record=False)
    state = env.reset(tp, queries, mask_direct=False)
    owner = np.arange(Q)                 # query index of each beam row
    score = np.zeros(Q)                  # cumulative log-probability
    for _ in range(env.config.T):
        actions = env.actions(state)
        lp = model.step_log_probs(tp, state, actions).value[:, 0]
        sizes = np.diff(actions.offsets)
        parent = np.repeat(np.arange(len(owner)), sizes)
        cand = score[parent] + lp
        cand_owner = owner[parent]
        # per query: stable descending sort on score, keep the first `width`
        order = np.lexsort((np.arange(len(cand)), -cand, cand_owner))
        grouped = cand_owner[order]
        starts = np.searchsorted(grouped, np.arange(Q))
        rank_in_group = np.arange(len(order)) - starts[grouped]
        keep = order[rank_in_group < width]
        rows = parent[keep]
        tp = Tape(record=False)
        state = env.step(tp, _take(tp, state, rows), _slice_actions(actions, rows, keep),
                         np.arange(len(keep)))
        owner = cand_owner[keep]
        score = cand[keep]
    rel_path = np.stack(state.relation_path, axis=1)
    ent_path = np.stack(state.entity_path, axis=1)
    out = []
    for qi in range(Q):
        rows = np.flatnonzero(owner == qi)
        rows = rows[np.lexsort((rows, -score[rows]))]
        paths, scores, mass, best = [], {}, {}, {}
        for r in rows:
            p = float(np.exp(score[r]))
            e = int(state.entities[r])
            path = (rel_path[r].tolist(), ent_path[r].tolist())
            paths.append((path[0], path[1], p))
            mass[e] = mass.get(e, 0.0) + p
            if e not in scores:
                scores[e] = p
                best[e] = path
        out.append(BeamResult(tuple(int(v) for v in queries[qi]), paths, scores, mass, best))
    return out


class _Chosen:
    """Action batch whose i-th segment is the single chosen action of beam i."""

    def __init__(self, relations, entities):
        self.relations = relations
        self.entities = entities
        self.offsets = np.arange(len(relations) + 1, dtype=np.int64)


def _slice_actions(actions, rows, keep):
    return _Chosen(actions.relations[keep], actions.entities[keep])


# ------------------------------------------------------------------ oracle

def enumerate_paths(model, env, query):
    """Every length-T action sequence with its probability, by plain recursion.

    Slow and exact; the reference the beam search is tested against.
    """
    query = np.asarray(query, dtype=np.int64).reshape(1, 3)
    out = []

    def walk(state, prob, rels, ents):
        if state.t == env.config.T:
            out.append((rels, ents, prob))
            return
        tp = Tape(record=False)
        actions = env.actions(state)
        p = np.exp(model.step_log_probs(tp, state, actions).value[:, 0])
        for i in range(len(p)):
            nxt = env.step_local(tp, state, actions, [i])
            walk(nxt, prob * p[i], rels + [int(actions.relations[i])],
                 ents + [int(actions.entities[i])])

    walk(env.reset(Tape(record=False), query), 1.0, [], [])
    return out


def exhaustive_ranking(paths):
    """Entity ranking by best path probability from an enumerated path list."""
    best = {}
    for _, ents, p in paths:
        e = ents[-1]
        best[e] = max(best.get(e, 0.0), p)
    return sorted(best, key=lambda e: (-best[e], e)), best


# ----------------------------------------------------------------- metrics

def filtered_rank(scores, target, known):
    """1-based rank of ``target`` after removing the other ``known`` answers.

    Entities tied with the target rank ahead of it when their id is smaller.
    Returns ``inf`` when the target was never reached.
    """
    if target not in scores:
        return math.inf
    s = scores[target]
    ahead = 0
    for e, v in scores.items():
        if e == target or e in known:
            continue
        if v > s or (v == s and e < target):
            ahead += 1
    return ahead + 1


def ranking_metrics(ranks, hits_at=HITS_AT):
    """MRR and Hits@N in percent from a list of (possibly infinite) ranks."""
    ranks = np.asarray(ranks, dtype=np.float64)
    if len(ranks) == 0:
        return {"mrr": 0.0, **{f"hits@{n}": 0.0 for n in hits_at}, "count": 0}
    out = {"mrr": float(100.0 * np.mean(1.0 / ranks))}
    for n in hits_at:
        out[f"hits@{n}"] = float(100.0 * np.mean(ranks <= n))
    out["count"] = int(len(ranks))
    return out


def average_precision(ranked, relevant):
    """AP of a ranked candidate list against a set of relevant items."""
    relevant = set(relevant)
    if not relevant:
        return 0.0
    hits, total = 0, 0.0
    for i, r in enumerate(ranked, 1):
        if r in relevant:
            hits += 1
            total += hits / i
    return total / len(relevant)


def known_answers(triplets, graph=None):
    """(head, relation) -> set of tails over the given triplets, plus the
    inverse direction when the graph carries inverse relations."""
    known = {}
    for h, r, t in triplets:
        known.setdefault((int(h), int(r)), set()).add(int(t))
        if graph is not None and graph.add_inverses:
            known.setdefault((int(t), int(r) + graph.base_relation_count), set()).add(int(h))
    return known


@dataclass
class MetricsReport:
    mrr: float = 0.0
    hits: dict = field(default_factory=dict)          # "hits@N" -> percent
    sections: dict = field(default_factory=dict)      # "tail"/"head" -> ranking metrics
    map_overall: float = None
    map_per_relation: dict = field(default_factory=dict)
    per_hop: dict = field(default_factory=dict)       # k -> percent of successes
    query_count: int = 0

    def rows(self):
        """Flat (metric, value) pairs, one per reported number."""
        out = [("mrr", self.mrr)]
        out += sorted(self.hits.items(), key=lambda kv: int(kv[0].split("@")[1]))
        for sec, vals in sorted(self.sections.items()):
            for k, v in vals.items():
                out.append((f"{sec}.{k}", v))
        if self.map_overall is not None:
            out.append(("map", self.map_overall))
        for rel, v in sorted(self.map_per_relation.items()):
            out.append((f"map.{rel}", v))
        for k, v in sorted(self.per_hop.items(), key=lambda kv: int(kv[0])):
            out.append((f"hop.{k}", v))
        out.append(("query_count", self.query_count))
        return out

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in self.rows():
            w.writerow([k, repr(float(v)) if isinstance(v, float) else v])
        return buf.getvalue()

    def save(self, stem):
        with open(stem + ".json", "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")
        with open(stem + ".csv", "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())


def entity_link_prediction(model, env, queries, known, width=100, chunk=256, head_queries=True):
    """Filtered MRR / Hits@N for tail queries and, when the graph has inverse
    relations, for the inverse-relation head queries.

    ``known`` maps (head, relation) -> set of true tails (see :func:`known_answers`).
    Returns (report, per-query ranks).
    """
    g = env.graph
    queries = np.asarray(queries, dtype=np.int64).reshape(-1, 3)
    sets = {"tail": queries}
    if head_queries and g.add_inverses and len(queries):
        sets["head"] = np.stack([queries[:, 2], queries[:, 1] + g.base_relation_count,
                                 queries[:, 0]], axis=1)
    report = MetricsReport()
    all_ranks, per_set = [], {}
    for name, qs in sets.items():
        ranks = []
        for lo in range(0, len(qs), chunk):
            for res in beam_search(model, env, qs[lo:lo + chunk], width):
                h, r, t = res.query
                others = known.get((h, r), set()) - {t}
                ranks.append(filtered_rank(res.scores, t, others))
        per_set[name] = ranks
        report.sections[name] = ranking_metrics(ranks)
        all_ranks += ranks
    both = ranking_metrics(all_ranks)
    report.mrr = both["mrr"]
    report.hits = {k: v for k, v in both.items() if k.startswith("hits@")}
    report.query_count = both["count"]
    return report, per_set


def relation_link_prediction(model, env, queries, known_triplets, candidates, width=100,
                             relation_names=None):
    """MAP for (e_s, ?, e_d) queries.

    Every candidate relation ``r`` is scored by the probability mass the
    beam search for (e_s, r, ?) puts on e_d; candidates are ranked by that
    mass (ties by relation id) and scored by average precision against the
    relations known to link the pair.  Returns (overall MAP, per-relation MAP),
    both in percent.
    """
    queries = np.asarray(queries, dtype=np.int64).reshape(-1, 3)
    candidates = [int(r) for r in candidates]
    truth = {}
    for h, r, t in known_triplets:
        truth.setdefault((int(h), int(t)), set()).add(int(r))
    pairs = sorted({(int(h), int(t)) for h, _, t in queries})
    index = {p: i for i, p in enumerate(pairs)}
    probe = np.array([(h, r, t) for h, t in pairs for r in candidates], dtype=np.int64)
    results = beam_search(model, env, probe, width) if len(probe) else []
    mass = np.zeros((len(pairs), len(candidates)))
    for k, res in enumerate(results):
        i, j = divmod(k, len(candidates))
        mass[i, j] = res.mass.get(pairs[i][1], 0.0)
    per_rel, aps = {}, []
    for h, r, t in queries:
        i = index[(int(h), int(t))]
        order = sorted(range(len(candidates)), key=lambda j: (-mass[i, j], candidates[j]))
        ranked = [candidates[j] for j in order]
        ap = average_precision(ranked, truth.get((int(h), int(t)), set()) & set(candidates))
        aps.append(ap)
        name = relation_names(int(r)) if relation_names else int(r)
        per_rel.setdefault(name, []).append(ap)
    overall = float(100.0 * np.mean(aps)) if aps else 0.0
    return overall, {k: float(100.0 * np.mean(v)) for k, v in per_rel.items()}


def per_hop_breakdown(model, env, queries, chunk=512):
    """Share (percent) of greedy successes by path length k = 1..T."""
    queries = np.asarray(queries, dtype=np.int64).reshape(-1, 3)
    counts = np.zeros(env.config.T + 1, dtype=np.int64)
    for lo in range(0, len(queries), chunk):
        batch = run_episodes(Tape(record=False), model, env, queries[lo:lo + chunk], greedy)
        counts += np.bincount(batch.hops[batch.success], minlength=env.config.T + 1)
    total = counts.sum()
    return {k: (float(100.0 * counts[k] / total) if total else 0.0)
            for k in range(1, env.config.T + 1)}


def evaluate(model, env, dataset, split="test", width=100, relation_prediction=True,
             head_queries=True):
    """Entity and relation link prediction plus the hop breakdown on one split."""
    ds = dataset
    qrels = None if ds.split.query_relations is None else set(ds.split.query_relations)
    triplets = [t for t in getattr(ds.split, split) if qrels is None or t[1] in qrels]
    queries = np.array(triplets, dtype=np.int64).reshape(-1, 3)
    every = ds.split.all_triplets()
    known = known_answers(every, env.graph)
    report, _ = entity_link_prediction(model, env, queries, known, width,
                                       head_queries=head_queries)
    if relation_prediction and len(queries):
        cands = sorted(qrels) if qrels is not None else list(range(env.graph.base_relation_count))
        report.map_overall, report.map_per_relation = relation_link_prediction(
            model, env, queries, every, cands, width, ds.relation_name)
    report.per_hop = per_hop_breakdown(model, env, queries)
    return report
