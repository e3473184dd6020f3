"""Policy network, rollouts and REINFORCE training."""
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import fusion, kernels
from .env import Environment
from .numerics import Parameter, Tape, clip_grad_norm, make_optimizer
from .reward import (PathMemory, destination_reward, distance_reward, diversity_reward,
                     path_embedding, total_reward)
from .variants import Wiring

log = logging.getLogger(__name__)


class PolicyNetwork:
    def __init__(self, d_s, j, rng):
        # maps ReLU(z) rows into the [r; e] action-embedding space
        self.w_2 = Parameter("policy.w_2", rng.normal(0.0, 1.0 / np.sqrt(j), (j, 2 * d_s)))
        # structural-only wiring: Y -> j before the same head
        self.w_y = Parameter("policy.w_y", rng.normal(0.0, 1.0 / np.sqrt(3 * d_s), (3 * d_s, j)))

    def parameters(self):
        return [self.w_2, self.w_y]


class MMKGRModel:
    """Feature bank + gate-attention fusion + policy head under one wiring."""

    def __init__(self, bank, fusion_params, policy, wiring=Wiring(), pooled_z=False):
        self.bank = bank
        self.fusion = fusion_params
        self.policy = policy
        self.wiring = wiring
        self.pooled_z = pooled_z
        self.trace = []

    def parameters(self):
        ps = self.bank.parameters() + self.policy.parameters()
        if not self.wiring.structural_only:
            ps += self.fusion.parameters()
        return ps

    def all_parameters(self):
        return self.bank.parameters() + self.fusion.parameters() + self.policy.parameters()

    def step_log_probs(self, tp, state, actions):
        """Log pi(a | s) for every row of a batched action space, as [n x 1]."""
        seg = kernels.segment_ids(actions.offsets)
        cand = actions.entities
        w = self.wiring
        h_rows = tp.gather_rows(state.history.h, seg)
        y = self.bank.structural_rows(tp, h_rows, cand, state.query_relations[seg])
        if w.structural_only:
            z = tp.matmul(y, self.policy.w_y)
            self.trace.append("structural_projection")
        else:
            x = self.bank.aux_rows(tp, cand, w.use_text, w.use_image)
            feats = fusion.fuse(tp, y, x, self.fusion, w.fusion_mode)
            self.trace.extend(feats.trace)
            z = feats.z
            if self.pooled_z:
                z = tp.segment_mean_broadcast(z, actions.offsets)
        a_rows = self.bank.action_rows(tp, actions.relations, cand)
        return action_log_probs(tp, a_rows, z, self.policy.w_2, actions.offsets)


def action_log_probs(tp, a_rows, z, w_2, offsets):
    logits = tp.row_dot(a_rows, tp.matmul(tp.relu(z), w_2))
    return tp.segment_log_softmax(logits, offsets)


def action_distribution(tp, a_rows, z, w_2):
    """softmax_i <A_i, ReLU(z_i) W_2> for a single action space."""
    offsets = np.array([0, a_rows.value.shape[0]], dtype=np.int64)
    return np.exp(action_log_probs(tp, a_rows, z, w_2, offsets).value[:, 0])


# ------------------------------------------------------------------ choosers

def sampler(rng, action_dropout=0.0):
    """Sample from pi.  With ``action_dropout`` each action is hidden from the
    draw with that probability (the whole segment stays if all are hidden);
    the caller still scores the pick under the undropped pi."""
    def choose(t, logp, offsets):
        u = rng.random(len(offsets) - 1)
        if action_dropout <= 0:
            return kernels.segment_sample(logp, offsets, u)
        keep = rng.random(len(logp)) >= action_dropout
        seg = kernels.segment_ids(offsets)
        alive = np.add.reduceat(keep.astype(np.int64), offsets[:-1]) > 0
        keep |= ~alive[seg]
        masked = np.where(keep, logp, -np.inf)
        return kernels.segment_sample(kernels.segment_log_softmax(masked, offsets), offsets, u)
    return choose


def greedy(t, logp, offsets):
    return kernels.segment_argmax(logp, offsets)


def forced(local_actions):
    """Replay fixed per-step local action indices, shape [B x T]."""
    local = np.asarray(local_actions, dtype=np.int64).reshape(-1, np.shape(local_actions)[-1])

    def choose(t, logp, offsets):
        return offsets[:-1] + local[:, t]
    return choose


def uniform_sampler(rng):
    def choose(t, logp, offsets):
        sizes = np.diff(offsets)
        return offsets[:-1] + np.minimum((rng.random(len(sizes)) * sizes).astype(np.int64),
                                         sizes - 1)
    return choose


# ------------------------------------------------------------------ rollouts

@dataclass
class RolloutBatch:
    queries: np.ndarray
    local_actions: np.ndarray       # [B x T]
    step_log_probs: np.ndarray      # [B x T], log-probs at sampling time
    relation_path: np.ndarray       # [B x T]
    entity_path: np.ndarray         # [B x T]
    hops: np.ndarray
    final: np.ndarray
    logp_sum: object = None         # tape Var [B x 1]
    entropy: object = None          # tape Var [1 x 1], summed over steps and episodes
    components: dict = field(default_factory=dict)
    rewards: np.ndarray = None

    @property
    def success(self):
        return self.final == self.queries[:, 2]

    def record(self, b):
        return RolloutRecord(
            query=tuple(int(v) for v in self.queries[b]),
            actions=self.local_actions[b].tolist(),
            log_probs=self.step_log_probs[b].tolist(),
            relations=self.relation_path[b].tolist(),
            entities=self.entity_path[b].tolist(),
            k=int(self.hops[b]), e_T=int(self.final[b]),
            components={k: float(v[b]) for k, v in self.components.items()},
            reward=None if self.rewards is None else float(self.rewards[b]))


@dataclass
class RolloutRecord:
    query: tuple
    actions: list
    log_probs: list
    relations: list
    entities: list
    k: int
    e_T: int
    components: dict
    reward: float = None


def run_episodes(tp, model, env, queries, chooser, mask_direct=False, with_entropy=False):
    """Unroll ``T`` steps for a batch of queries, choosing actions with ``chooser``."""
    state = env.reset(tp, queries, mask_direct=mask_direct)
    B, T = state.size, env.config.T
    local = np.zeros((B, T), dtype=np.int64)
    step_lp = np.zeros((B, T))
    logp_sum = entropy = None
    for t in range(T):
        actions = env.actions(state)
        lp = model.step_log_probs(tp, state, actions)
        if with_entropy:
            h = tp.scale(tp.sum_all(tp.hadamard(tp.exp(lp), lp)), -1.0)
            entropy = h if entropy is None else tp.add(entropy, h)
        rows = chooser(t, np.ascontiguousarray(lp.value[:, 0]), actions.offsets)
        chosen = tp.gather_rows(lp, rows)
        logp_sum = chosen if logp_sum is None else tp.add(logp_sum, chosen)
        local[:, t] = rows - actions.offsets[:-1]
        step_lp[:, t] = chosen.value[:, 0]
        state = env.step(tp, state, actions, rows)
    return RolloutBatch(
        queries=np.asarray(queries, dtype=np.int64).reshape(-1, 3), local_actions=local,
        step_log_probs=step_lp, relation_path=np.stack(state.relation_path, axis=1),
        entity_path=np.stack(state.entity_path, axis=1), hops=state.hops,
        final=state.entities, logp_sum=logp_sum, entropy=entropy)


# ------------------------------------------------------------------- rewards

class RewardFunction:
    """Computes terminal rewards for a rollout batch and maintains path memory."""

    def __init__(self, scorer, wiring=Wiring(), bandwidth=3.0, threshold=3,
                 memory_capacity=100, distance_on_success=True):
        self.scorer = scorer
        self.wiring = wiring
        self.bandwidth = bandwidth
        self.threshold = threshold
        self.distance_on_success = distance_on_success
        self.memory = PathMemory(memory_capacity)

    def __call__(self, batch, relation_table, no_op, update_memory=True):
        q = batch.queries
        succ = batch.success
        B = len(q)
        dest = np.ones(B)
        miss = ~succ
        if miss.any():
            dest[miss] = self.scorer.score(q[miss, 0], q[miss, 1], batch.final[miss])
        dist = np.array([distance_reward(int(k), self.threshold) for k in batch.hops])
        if self.distance_on_success:
            dist = np.where(succ, dist, 0.0)
        paths = [path_embedding(batch.relation_path[b], relation_table, no_op) for b in range(B)]
        keys = [(int(q[b, 0]), int(q[b, 1])) for b in range(B)]
        snapshots = {k: self.memory.snapshot(k) for k in set(keys)}
        div = np.array([diversity_reward(paths[b], snapshots[keys[b]], self.bandwidth)
                        for b in range(B)])
        if self.wiring.zero_one:
            total = succ.astype(np.float64)
        else:
            total = np.array([total_reward(dest[b], dist[b], div[b], self.wiring.weights)
                              for b in range(B)])
        if update_memory:
            for b in range(B):
                self.memory.update(keys[b], paths[b], bool(succ[b]))
        batch.components = {"destination": dest, "distance": dist, "diversity": div}
        batch.rewards = total
        return total


# ----------------------------------------------------------------- REINFORCE

def reinforce_update(tp, batch, baseline, optimizer, entropy_coef=0.0, max_grad_norm=0.0):
    """One policy-gradient step on the batch.

    Minimises ``-(1/B) sum_b (R_b - baseline) sum_t log pi(a_t | s_t)``
    (minus an optional entropy bonus) and applies the optimizer.
    """
    adv = batch.rewards - baseline
    B = len(adv)
    loss = tp.weighted_sum(batch.logp_sum, -adv / B)
    if batch.entropy is not None and entropy_coef:
        loss = tp.add(loss, tp.scale(batch.entropy, -entropy_coef / B))
    value = float(loss.value.item())
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite REINFORCE loss: {value}; rewards={batch.rewards}, "
                                 f"baseline={baseline}")
    optimizer.zero_grad()
    tp.backward(loss)
    grad_norm = clip_grad_norm(optimizer.params, max_grad_norm)
    if not np.isfinite(grad_norm):
        raise FloatingPointError("non-finite gradient in REINFORCE update")
    optimizer.step()
    return {"loss": value, "grad_norm": grad_norm, "mean_advantage": float(adv.mean())}


# ------------------------------------------------------------------ training

BASELINES = ("ema", "rloo")


def leave_one_out_baseline(rewards, rollouts):
    """Per-episode baseline from the other rollouts of the same query.

    Rows come in groups of ``rollouts`` consecutive episodes per query.
    """
    g = np.asarray(rewards, dtype=np.float64).reshape(-1, rollouts)
    return ((g.sum(axis=1, keepdims=True) - g) / (rollouts - 1)).reshape(-1)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    lr: float = 1e-3
    optimizer: str = "adam"
    baseline_decay: float = 0.95
    entropy_coef: float = 0.0
    seed: int = 0
    train_inverse_queries: bool = True
    distance_on_success: bool = True
    distance_threshold: int = 3
    bandwidth: float = 3.0
    memory_capacity: int = 100
    valid_limit: int = 0
    rollouts: int = 1               # sampled episodes per query in a batch
    max_grad_norm: float = 5.0      # 0 disables clipping
    action_dropout: float = 0.0
    baseline: str = "ema"           # or "rloo": mean reward of the query's other rollouts
    lr_scale: dict = field(default_factory=dict)   # parameter-name prefix -> lr multiplier
    weight_decay: float = 0.0       # decoupled, Adam only

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.rollouts < 1:
            raise ValueError("epochs, batch_size and rollouts must be >= 1")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}, got {self.baseline!r}")
        if self.baseline == "rloo" and self.rollouts < 2:
            raise ValueError("the leave-one-out baseline needs rollouts >= 2")


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_valid_hits1: float
    best_params: dict
    baseline: float
    rng_state: dict
    reward_fn: RewardFunction


def query_array(triplets, query_relations=None, graph=None, inverse=False):
    rows = [t for t in triplets if query_relations is None or t[1] in query_relations]
    q = np.array(rows, dtype=np.int64).reshape(-1, 3)
    if inverse and graph is not None and graph.add_inverses and len(q):
        inv = np.stack([q[:, 2], q[:, 1] + graph.base_relation_count, q[:, 0]], axis=1)
        q = np.concatenate([q, inv])
    return q


def greedy_success(model, env, queries, chunk=512):
    hits = []
    for lo in range(0, len(queries), chunk):
        tp = Tape(record=False)
        batch = run_episodes(tp, model, env, queries[lo:lo + chunk], greedy)
        hits.append(batch.success)
    return np.concatenate(hits) if hits else np.zeros(0, bool)


def train(model, env, dataset, scorer, config=TrainConfig(), valid_queries=None,
          epoch_callback=None):
    """REINFORCE over shuffled training queries; keeps the best-validation parameters."""
    split = dataset.split
    qrels = None if split.query_relations is None else set(split.query_relations)
    train_q = query_array(split.train, qrels, env.graph, config.train_inverse_queries)
    if len(train_q) == 0:
        raise ValueError("no training queries")
    if valid_queries is None:
        valid_queries = query_array(split.valid, qrels)
    if config.valid_limit:
        valid_queries = valid_queries[:config.valid_limit]
    rng = np.random.default_rng(config.seed)
    opt = make_optimizer(config.optimizer, model.parameters(), config.lr, config.lr_scale,
                         config.weight_decay)
    reward_fn = RewardFunction(scorer, model.wiring, config.bandwidth, config.distance_threshold,
                               config.memory_capacity, config.distance_on_success)
    choose = sampler(rng, config.action_dropout)
    baseline = None
    history = []
    best = (-1.0, -1, None)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_q))
        rewards, succ = [], []
        for lo in range(0, len(order), config.batch_size):
            q = np.repeat(train_q[order[lo:lo + config.batch_size]], config.rollouts, axis=0)
            tp = Tape()
            batch = run_episodes(tp, model, env, q, choose, mask_direct=True,
                                 with_entropy=config.entropy_coef > 0)
            r = reward_fn(batch, model.bank.relation.value, env.graph.no_op)
            if config.baseline == "rloo":
                b = leave_one_out_baseline(r, config.rollouts)
            else:
                b = float(r.mean()) if baseline is None else baseline
            reinforce_update(tp, batch, b, opt, config.entropy_coef, config.max_grad_norm)
            d = config.baseline_decay
            baseline = float(r.mean()) if baseline is None else d * baseline + (1 - d) * float(r.mean())
            rewards.append(r)
            succ.append(batch.success)
        rewards = np.concatenate(rewards)
        succ = np.concatenate(succ)
        valid_hits = float(greedy_success(model, env, valid_queries).mean()) if len(valid_queries) else 0.0
        row = {"epoch": epoch, "mean_reward": float(rewards.mean()),
               "success_rate": float(succ.mean()), "valid_hits1": valid_hits,
               "baseline": baseline, "seconds": time.perf_counter() - t0}
        history.append(row)
        log.info("epoch %d reward %.4f success %.3f valid@1 %.3f", epoch, row["mean_reward"],
                 row["success_rate"], valid_hits)
        if valid_hits >= best[0]:
            best = (valid_hits, epoch, {p.name: p.value.copy() for p in model.all_parameters()})
        if epoch_callback is not None:
            epoch_callback(row)
    return TrainResult(history, best[1], best[0], best[2], baseline,
                       rng.bit_generator.state, reward_fn)


def load_best(model, result):
    for p in model.all_parameters():
        p.value[...] = result.best_params[p.name]
