"""Structural embeddings, auxiliary modality vectors and the path-history encoder."""
import logging
from dataclasses import dataclass

import numpy as np

from . import kernels
from .numerics import LSTMParams, Parameter, Var, lstm_step, load_tensors, save_tensors

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ TransE

@dataclass
class StructuralTable:
    entity: np.ndarray      # [entity_count x d_s]
    relation: np.ndarray    # [relation_count x d_s], last row is NO_OP
    losses: list = None

    @property
    def dim(self):
        return self.entity.shape[1]


def transe_distance(ent, rel, heads, rels, tails):
    return np.linalg.norm(ent[heads] + rel[rels] - ent[tails], axis=1)


def _normalize_rows(a):
    n = np.linalg.norm(a, axis=1, keepdims=True)
    return a / np.maximum(n, 1e-12)


def pretrain_transe(graph, dim=200, epochs=50, margin=1.0, lr=0.01, seed=0, batch_size=256):
    """Margin-ranking TransE over the graph's (inverse-augmented) edges.

    Negatives corrupt the head or the tail uniformly at random.  Entity rows
    are L2-normalised at the start of every epoch.
    """
    heads = np.repeat(np.arange(graph.entity_count), np.diff(graph.indptr))
    rels, tails = graph.adj_rel, graph.adj_ent
    n = len(heads)
    if n == 0:
        raise ValueError("cannot pretrain TransE on an empty train set")
    rng = np.random.default_rng(seed)
    bound = 6.0 / np.sqrt(dim)
    ent = rng.uniform(-bound, bound, (graph.entity_count, dim))
    rel = _normalize_rows(rng.uniform(-bound, bound, (graph.relation_count, dim)))
    losses = []
    for _ in range(epochs):
        ent = _normalize_rows(ent)
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, batch_size):
            b = order[lo:lo + batch_size]
            h, r, t = heads[b], rels[b], tails[b]
            corrupt = rng.integers(0, graph.entity_count, len(b))
            swap_head = rng.random(len(b)) < 0.5
            hn = np.where(swap_head, corrupt, h)
            tn = np.where(swap_head, t, corrupt)
            dp = ent[h] + rel[r] - ent[t]
            dn = ent[hn] + rel[r] - ent[tn]
            np_, nn_ = np.linalg.norm(dp, axis=1), np.linalg.norm(dn, axis=1)
            viol = margin + np_ - nn_
            active = viol > 0
            total += float(viol[active].sum())
            if not active.any():
                continue
            gp = dp[active] / np.maximum(np_[active], 1e-12)[:, None]
            gn = dn[active] / np.maximum(nn_[active], 1e-12)[:, None]
            g_ent = np.zeros_like(ent)
            g_rel = np.zeros_like(rel)
            kernels.scatter_add_rows(g_ent, h[active], gp)
            kernels.scatter_add_rows(g_ent, t[active], -gp)
            kernels.scatter_add_rows(g_ent, hn[active], -gn)
            kernels.scatter_add_rows(g_ent, tn[active], gn)
            kernels.scatter_add_rows(g_rel, r[active], gp - gn)
            ent -= lr * g_ent
            rel -= lr * g_rel
        losses.append(total / n)
    return StructuralTable(_normalize_rows(ent), rel, losses)


def random_table(entity_count, relation_count, dim, seed=0):
    rng = np.random.default_rng(seed)
    return StructuralTable(_normalize_rows(rng.normal(size=(entity_count, dim))),
                           _normalize_rows(rng.normal(size=(relation_count, dim))), [])


# ------------------------------------------------------------ modality store

@dataclass
class ModalFeatures:
    """Raw per-entity vectors as ingested (before any learned projection)."""
    text: np.ndarray
    image: np.ndarray
    text_missing: np.ndarray = None
    image_missing: np.ndarray = None

    def __post_init__(self):
        n = self.text.shape[0]
        if self.text_missing is None:
            self.text_missing = np.zeros(n, bool)
        if self.image_missing is None:
            self.image_missing = np.zeros(self.image.shape[0], bool)

    def store(self, d_x, rng):
        return ModalStore(self.text, self.image, d_x, rng, self.text_missing, self.image_missing)


class ModalStore:
    """Per-entity text and image vectors plus their learned projections."""

    def __init__(self, text, image, d_x, rng, text_missing=None, image_missing=None):
        if d_x % 2:
            raise ValueError(f"d_x must be even, got {d_x}")
        self.text = np.ascontiguousarray(text, dtype=np.float64)
        self.image = np.ascontiguousarray(image, dtype=np.float64)
        if self.text.shape[0] != self.image.shape[0]:
            raise ValueError("text and image stores disagree on entity count")
        n = self.text.shape[0]
        self.text_missing = np.zeros(n, bool) if text_missing is None else np.asarray(text_missing, bool)
        self.image_missing = np.zeros(n, bool) if image_missing is None else np.asarray(image_missing, bool)
        half = d_x // 2
        self.d_x = d_x
        self.w_t = Parameter("modal.w_t", rng.normal(0.0, 1.0 / np.sqrt(max(self.d_t, 1)), (self.d_t, half)))
        self.w_i = Parameter("modal.w_i", rng.normal(0.0, 1.0 / np.sqrt(max(self.d_i, 1)), (self.d_i, half)))

    @property
    def d_t(self):
        return self.text.shape[1]

    @property
    def d_i(self):
        return self.image.shape[1]

    def parameters(self):
        return [self.w_t, self.w_i]


def read_feature_file(path, entities, dim=None):
    """Parse ``name v1 ... vd`` lines -> (vectors [E x d], missing flags)."""
    rows = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            name, vals = parts[0], parts[1:]
            if name not in entities:
                raise ValueError(f"{path}:{lineno}: unknown entity {name!r}")
            if dim is None:
                dim = len(vals)
            if len(vals) != dim:
                raise ValueError(f"{path}:{lineno}: expected {dim} values, got {len(vals)}")
            rows[entities[name]] = np.array(vals, dtype=np.float64)
    if dim is None:
        raise ValueError(f"{path}: no feature rows and no dimension given")
    out = np.zeros((len(entities), dim))
    missing = np.ones(len(entities), bool)
    for i, v in rows.items():
        out[i] = v
        missing[i] = False
    if missing.any():
        log.info("%s: %d of %d entities have no vector", path, int(missing.sum()), len(entities))
    return out, missing


def write_feature_file(path, vectors, entities, missing=None):
    with open(path, "w", encoding="utf-8") as fh:
        for i, name in enumerate(entities.names):
            if missing is not None and missing[i]:
                continue
            fh.write(name + " " + " ".join(repr(float(x)) for x in vectors[i]) + "\n")


def write_feature_binary(path, vectors, missing):
    save_tensors(path, {"vectors": vectors, "missing": missing.astype(np.float64)})


def read_feature_binary(path):
    t = load_tensors(path)
    return t["vectors"], t["missing"].astype(bool)


# ------------------------------------------------------------------ history

@dataclass
class HistoryState:
    h: Var
    c: Var
    t: int = 0


class FeatureBank:
    """Trainable structural tables, modal projections and the history LSTM."""

    def __init__(self, table, modal, rng):
        d = table.dim
        self.d_s = d
        self.entity = Parameter("struct.entity", table.entity)
        self.relation = Parameter("struct.relation", table.relation)
        self.modal = modal
        self.w_in = Parameter("history.w_in", rng.normal(0.0, 1.0 / np.sqrt(2 * d), (2 * d, d)))
        self.lstm = LSTMParams("history.lstm", d, d, rng)

    def parameters(self):
        return [self.entity, self.relation, self.w_in, *self.lstm.parameters(),
                *self.modal.parameters()]

    def encode_history(self, tp, state, r_taken, e_reached):
        """One LSTM step on ``[emb(r); emb(e)]`` projected to ``d_s``."""
        x = tp.concat_cols(tp.gather_rows(self.relation, r_taken),
                           tp.gather_rows(self.entity, e_reached))
        h, c = lstm_step(tp, tp.matmul(x, self.w_in), (state.h, state.c), self.lstm)
        return HistoryState(h, c, state.t + 1)

    def reset_history(self, tp, sources, no_op):
        """h_0 from one step on ``(NO_OP, e_s)`` starting at the zero state."""
        n = len(sources)
        zero = HistoryState(tp.const(np.zeros((n, self.d_s))), tp.const(np.zeros((n, self.d_s))), -1)
        return self.encode_history(tp, zero, np.full(n, no_op, dtype=np.int64), sources)

    def structural_rows(self, tp, history_rows, candidates, query_relations):
        """Y: row i = [emb(e_i); h; emb(r_q)], so d_y = 3 d_s."""
        return tp.concat_cols(tp.gather_rows(self.entity, candidates), history_rows,
                              tp.gather_rows(self.relation, query_relations))

    def aux_rows(self, tp, candidates, use_text=True, use_image=True):
        """X: row i = [f_t(e_i) W_t ; f_i(e_i) W_i]; a disabled half is a detached zero block."""
        half = self.modal.d_x // 2
        m = len(candidates)
        if use_text:
            xt = tp.matmul(tp.const(self.modal.text[candidates]), self.modal.w_t)
        else:
            xt = tp.const(np.zeros((m, half)))
        if use_image:
            xi = tp.matmul(tp.const(self.modal.image[candidates]), self.modal.w_i)
        else:
            xi = tp.const(np.zeros((m, half)))
        return tp.concat_cols(xt, xi)

    def action_rows(self, tp, relations, entities):
        """A_t rows [emb(r); emb(e)]."""
        return tp.concat_cols(tp.gather_rows(self.relation, relations),
                              tp.gather_rows(self.entity, entities))
