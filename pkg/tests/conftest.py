import numpy as np
import pytest

from mmkgr.agent import MMKGRModel, PolicyNetwork, forced, run_episodes
from mmkgr.env import Environment, EpisodeConfig
from mmkgr.features import FeatureBank, ModalStore, random_table
from mmkgr.fusion import FusionParameters
from mmkgr.graph import build_graph
from mmkgr.numerics import Tape
from mmkgr.variants import apply_ablation

# 3 entities, 2 relations, no inverses: small enough to enumerate every walk
TOY_TRIPLETS = [(0, 0, 1), (0, 1, 2), (1, 0, 2), (2, 1, 0), (1, 1, 1)]


def make_model(graph, variant="FULL", seed=0, d_s=4, d_x=4, d=3, j=3, T=2, pooled_z=False):
    rng = np.random.default_rng(seed)
    table = random_table(graph.entity_count, graph.relation_count, d_s, seed=seed)
    modal = ModalStore(rng.normal(size=(graph.entity_count, 3)),
                       rng.normal(size=(graph.entity_count, 2)), d_x, rng)
    bank = FeatureBank(table, modal, rng)
    fp = FusionParameters(d_x, 3 * d_s, d, j, rng, y_std=0.5)
    # the ones init makes every attention weight exactly 1; randomise so all
    # fusion parameters carry gradient, but keep a > 0 so ReLU(z) is not all zero
    fp.w_gl.value[...] = 0.5 + np.abs(rng.normal(0.0, 1.0, fp.w_gl.value.shape))
    model = MMKGRModel(bank, fp, PolicyNetwork(d_s, j, rng), apply_ablation(variant),
                       pooled_z=pooled_z)
    return model, Environment(graph, bank, EpisodeConfig(T=T, max_actions=50))


def toy(variant="FULL", seed=0, T=2):
    return make_model(build_graph(TOY_TRIPLETS, 3, 2, add_inverses=False), variant, seed, T=T)


def local_sequences(model, env, query):
    """Every sequence of per-step local action indices for one query."""
    out = []

    def walk(state, prefix):
        if state.t == env.config.T:
            out.append(prefix)
            return
        tp = Tape(record=False)
        actions = env.actions(state)
        for i in range(int(actions.sizes[0])):
            walk(env.step_local(tp, state, actions, [i]), prefix + [i])

    walk(env.reset(Tape(record=False), np.asarray(query).reshape(1, 3)), [])
    return out


def all_walks(model, env, queries):
    """(queries, local actions) with one row per possible walk of every query."""
    q_rows, acts = [], []
    for q in queries:
        for seq in local_sequences(model, env, q):
            q_rows.append(q)
            acts.append(seq)
    return np.array(q_rows, dtype=np.int64), np.array(acts, dtype=np.int64)


def replay(tp, model, env, q_rows, acts):
    return run_episodes(tp, model, env, q_rows, forced(acts))


@pytest.fixture
def toy_setup():
    return toy()


# ---------------------------------------------------------------- acceptance

ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
