"""Fixed-horizon walk over the graph: states, action spaces and transitions.

States are batched: one :class:`EpisodeState` carries ``B`` independent
episodes that advance in lock-step.  A single episode is a batch of one.
"""
from dataclasses import dataclass, field

import numpy as np

from .graph import batch_actions


@dataclass(frozen=True)
class EpisodeConfig:
    T: int = 4
    max_actions: int = 200

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")


@dataclass
class ActionBatch:
    relations: np.ndarray
    entities: np.ndarray
    offsets: np.ndarray

    def segment(self, b):
        lo, hi = self.offsets[b], self.offsets[b + 1]
        return self.relations[lo:hi], self.entities[lo:hi]

    @property
    def sizes(self):
        return np.diff(self.offsets)


@dataclass
class EpisodeState:
    entities: np.ndarray        # e_t per episode
    sources: np.ndarray
    query_relations: np.ndarray
    targets: np.ndarray         # e_d; hidden from the policy
    history: object             # features.HistoryState
    t: int = 0
    mask_direct: np.ndarray = None
    hops: np.ndarray = None
    relation_path: list = field(default_factory=list)
    entity_path: list = field(default_factory=list)

    @property
    def size(self):
        return len(self.entities)


class Environment:
    def __init__(self, graph, bank, config=EpisodeConfig()):
        self.graph = graph
        self.bank = bank
        self.config = config

    def reset(self, tp, queries, mask_direct=False):
        q = np.asarray(queries, dtype=np.int64).reshape(-1, 3)
        g = self.graph
        if ((q[:, [0, 2]] < 0) | (q[:, [0, 2]] >= g.entity_count)).any() or \
                ((q[:, 1] < 0) | (q[:, 1] >= g.relation_count)).any():
            raise ValueError("query contains out-of-range ids")
        n = len(q)
        mask = np.broadcast_to(np.asarray(mask_direct, dtype=bool), (n,)).copy()
        return EpisodeState(
            entities=q[:, 0].copy(), sources=q[:, 0].copy(), query_relations=q[:, 1].copy(),
            targets=q[:, 2].copy(), history=self.bank.reset_history(tp, q[:, 0], g.no_op),
            t=0, mask_direct=mask, hops=np.zeros(n, dtype=np.int64))

    def actions(self, state):
        rels, ents, offsets = batch_actions(self.graph, state.entities, self.config.max_actions,
                                            state.sources, state.query_relations, state.targets,
                                            state.mask_direct)
        return ActionBatch(rels, ents, offsets)

    def step(self, tp, state, actions, choice):
        """Advance every episode by the chosen global action rows."""
        if state.t >= self.config.T:
            raise ValueError(f"episode already terminal at t={state.t} (T={self.config.T})")
        choice = np.asarray(choice, dtype=np.int64)
        lo, hi = actions.offsets[:-1], actions.offsets[1:]
        if choice.shape != (state.size,) or ((choice < lo) | (choice >= hi)).any():
            raise ValueError("chosen action is not in the current action space")
        rel = actions.relations[choice]
        ent = actions.entities[choice]
        history = self.bank.encode_history(tp, state.history, rel, ent)
        return EpisodeState(
            entities=ent, sources=state.sources, query_relations=state.query_relations,
            targets=state.targets, history=history, t=state.t + 1,
            mask_direct=state.mask_direct, hops=state.hops + (rel != self.graph.no_op),
            relation_path=state.relation_path + [rel], entity_path=state.entity_path + [ent])

    def step_local(self, tp, state, actions, local):
        """Like :meth:`step` with per-episode indices into each action space."""
        local = np.asarray(local, dtype=np.int64).reshape(-1)
        if ((local < 0) | (local >= actions.sizes)).any():
            raise ValueError("chosen action is not in the current action space")
        return self.step(tp, state, actions, actions.offsets[:-1] + local)

    def is_terminal(self, state):
        return state.t >= self.config.T, state.hops.copy()
