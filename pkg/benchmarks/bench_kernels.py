#!/usr/bin/env python3
"""Numba kernels against their numpy fallbacks.

Per kernel: best-of-``repeat`` wall time on a realistic segmented batch
(B episodes, ragged action spaces), after one warm-up call so numba's
compile time is excluded.  With ``--rollouts`` the script also times a full
batched rollout in two subprocesses, one per ``MMKGR_NO_NUMBA`` setting.

    python benchmarks/bench_kernels.py --batch 512 --degree 40
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from mmkgr import kernels
from mmkgr.graph import build_graph


def make_inputs(batch, degree, entities, seed):
    rng = np.random.default_rng(seed)
    sizes = rng.integers(1, 2 * degree, batch)
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    n = int(offsets[-1])
    x = rng.normal(size=n)
    logp = kernels.numpy_impl.segment_log_softmax(x, offsets)
    triplets = {(int(h), int(r), int(t)) for h, r, t in
                zip(rng.integers(entities, size=entities * degree), rng.integers(8, size=entities * degree),
                    rng.integers(entities, size=entities * degree))}
    g = build_graph(sorted(triplets), entities, 8)
    current = rng.integers(entities, size=batch).astype(np.int64)
    q = rng.integers(entities, size=(3, batch)).astype(np.int64)
    q[1] = rng.integers(g.relation_count - 1, size=batch)
    mask = np.ones(batch, dtype=np.bool_)
    return {
        "segment_log_softmax": (x, offsets),
        "segment_log_softmax_grad": (rng.normal(size=n), logp, offsets),
        "segment_sum_rows": (rng.normal(size=(n, 16)), offsets),
        "segment_argmax": (x, offsets),
        "segment_sample": (logp, offsets, rng.random(batch)),
        "scatter_add_rows": (np.zeros((entities, 16)), rng.integers(entities, size=n),
                             rng.normal(size=(n, 16))),
        "gather_actions": (g.indptr, g.adj_rel, g.adj_ent, current, q[0], q[1], q[2], mask,
                           g.no_op),
    }


def bench(fn, args, repeat, number):
    fn(*args)                                       # warm-up / compile
    return min(timeit.repeat(lambda: fn(*args), repeat=repeat, number=number)) / number


ROLLOUT = """
import time, numpy as np
from mmkgr.config import RunConfig, apply_overrides
from mmkgr import pipeline
from mmkgr.agent import run_episodes, sampler, query_array
from mmkgr.features import random_table
from mmkgr.numerics import Tape
cfg = apply_overrides(RunConfig(), ["synthetic.entity_count={entities}", "d_s=32", "d_x=32",
                                    "d=32", "j=32"])
inputs = pipeline.load_inputs(cfg)
g = inputs.dataset.graph
model, env = pipeline.build_model(cfg, inputs, random_table(g.entity_count, g.relation_count, 32))
q = np.repeat(query_array(inputs.dataset.split.train), 4, axis=0)[:{batch}]
best = float("inf")
for _ in range({repeat}):
    t = time.perf_counter()
    tp = Tape()
    b = run_episodes(tp, model, env, q, sampler(np.random.default_rng(0)))
    tp.backward(tp.sum_all(b.logp_sum))
    best = min(best, time.perf_counter() - t)
print(best)
"""


def rollout_time(no_numba, batch, entities, repeat):
    env = dict(os.environ, MMKGR_NO_NUMBA="1" if no_numba else "0")
    code = ROLLOUT.format(batch=batch, entities=entities, repeat=repeat)
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=512, help="episodes per batch")
    ap.add_argument("--degree", type=int, default=40, help="mean action-space size")
    ap.add_argument("--entities", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--rollouts", action="store_true",
                    help="also time a forward+backward rollout per backend")
    args = ap.parse_args()

    inputs = make_inputs(args.batch, args.degree, args.entities, args.seed)
    print(f"batch={args.batch} degree~{args.degree} entities={args.entities}")
    print(f"{'kernel':28s} {'numba (us)':>12s} {'numpy (us)':>12s} {'speed-up':>9s}")
    for name, call_args in inputs.items():
        nb = bench(getattr(kernels.numba_impl, name), call_args, args.repeat, args.number)
        npy = bench(getattr(kernels.numpy_impl, name), call_args, args.repeat, args.number)
        print(f"{name:28s} {nb * 1e6:12.1f} {npy * 1e6:12.1f} {npy / nb:8.1f}x")
    if args.rollouts:
        ents = min(args.entities, 400)
        t_nb = rollout_time(False, args.batch, ents, args.repeat)
        t_np = rollout_time(True, args.batch, ents, args.repeat)
        print(f"{'rollout T=4 fwd+bwd':28s} {t_nb * 1e6:12.1f} {t_np * 1e6:12.1f} "
              f"{t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
