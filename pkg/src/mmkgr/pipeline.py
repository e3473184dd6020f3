"""Glue from a :class:`RunConfig` to data, pretrained tables, a model and a run."""
import logging
import os
from dataclasses import dataclass

import numpy as np

from .agent import MMKGRModel, PolicyNetwork, TrainConfig, train
from .env import Environment, EpisodeConfig
from .features import FeatureBank, ModalFeatures, StructuralTable, pretrain_transe, read_feature_file
from .fusion import FusionParameters
from .graph import load_dataset
from .numerics import load_tensors, save_tensors
from .reward import BilinearScorer, train_scorer
from .synthetic import generate_synthetic_mkg
from .variants import apply_ablation

log = logging.getLogger(__name__)


@dataclass
class Inputs:
    dataset: object          # graph.Dataset
    features: ModalFeatures
    synthetic: object = None  # synthetic.SyntheticMKG when generated


def load_inputs(cfg):
    if not cfg.dataset:
        mkg = generate_synthetic_mkg(cfg.synthetic_spec(), add_inverses=cfg.add_inverses)
        return Inputs(mkg.dataset, mkg.features, mkg)
    ds = load_dataset(cfg.dataset, add_inverses=cfg.add_inverses)
    text, text_missing = read_feature_file(cfg.text_features, ds.entities)
    image, image_missing = read_feature_file(cfg.image_features, ds.entities)
    return Inputs(ds, ModalFeatures(text, image, text_missing, image_missing))


def pretrain(cfg, inputs):
    """TransE table for the policy plus the frozen triplet scorer for reward shaping."""
    g = inputs.dataset.graph
    table = pretrain_transe(g, dim=cfg.d_s, epochs=cfg.transe_epochs, margin=cfg.transe_margin,
                            lr=cfg.transe_lr, seed=cfg.sub_seed("pretrain"))
    scorer = train_scorer(g, dim=cfg.scorer_dim, negatives=cfg.scorer_negatives,
                          epochs=cfg.scorer_epochs, lr=cfg.scorer_lr, seed=cfg.sub_seed("scorer"))
    log.info("pretrain: transe loss %.4f -> %.4f, scorer loss %.4f -> %.4f",
             table.losses[0], table.losses[-1], scorer.losses[0], scorer.losses[-1])
    return table, scorer


def save_pretrained(directory, table, scorer):
    os.makedirs(directory, exist_ok=True)
    save_tensors(os.path.join(directory, "transe"), {"entity": table.entity,
                                                     "relation": table.relation})
    scorer.save(os.path.join(directory, "scorer"))


def load_pretrained(directory):
    t = load_tensors(os.path.join(directory, "transe"))
    return (StructuralTable(t["entity"], t["relation"], []),
            BilinearScorer.load(os.path.join(directory, "scorer")))


def build_model(cfg, inputs, table):
    rng = cfg.rng("init")
    wiring = apply_ablation(cfg.variant, cfg.weights)
    bank = FeatureBank(table, inputs.features.store(cfg.d_x, rng), rng)
    fp = FusionParameters(cfg.d_x, 3 * cfg.d_s, cfg.d, cfg.j, rng, y_std=cfg.fusion_y_std)
    model = MMKGRModel(bank, fp, PolicyNetwork(cfg.d_s, cfg.j, rng), wiring,
                       pooled_z=cfg.pooled_z)
    env = Environment(inputs.dataset.graph, bank, EpisodeConfig(T=cfg.T,
                                                                max_actions=cfg.max_actions))
    return model, env


def train_config(cfg):
    return TrainConfig(
        epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, optimizer=cfg.optimizer,
        baseline_decay=cfg.baseline_decay, baseline=cfg.baseline,
        entropy_coef=cfg.entropy_coef, seed=cfg.sub_seed("rollout"),
        train_inverse_queries=cfg.train_inverse_queries,
        distance_on_success=cfg.distance_on_success, distance_threshold=cfg.distance_threshold,
        bandwidth=cfg.bandwidth, memory_capacity=cfg.memory_capacity,
        valid_limit=cfg.valid_limit, rollouts=cfg.rollouts, max_grad_norm=cfg.max_grad_norm,
        lr_scale=dict(cfg.lr_scale), weight_decay=cfg.weight_decay,
        action_dropout=cfg.action_dropout)


def run(cfg, inputs=None, pretrained=None, epoch_callback=None):
    """Pretrain (unless given), build and train; returns (model, env, inputs, result)."""
    inputs = inputs if inputs is not None else load_inputs(cfg)
    table, scorer = pretrained if pretrained is not None else pretrain(cfg, inputs)
    model, env = build_model(cfg, inputs, table)
    result = train(model, env, inputs.dataset, scorer, train_config(cfg),
                   epoch_callback=epoch_callback)
    return model, env, inputs, result


def uniform_hits1(env, queries, seed=0, trials=1):
    """Hits@1 of a uniformly random walk: the chance floor for the planted rule."""
    from .agent import run_episodes, uniform_sampler
    from .numerics import Tape
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(trials):
        batch = run_episodes(Tape(record=False), _UniformModel(), env, queries,
                             uniform_sampler(rng))
        out.append(batch.success.mean())
    return float(np.mean(out))


class _UniformModel:
    """Stands in for a policy: every action gets the same log-probability."""

    def step_log_probs(self, tp, state, actions):
        sizes = actions.sizes
        lp = -np.log(np.repeat(sizes, sizes).astype(np.float64))
        return tp.const(lp[:, None])
