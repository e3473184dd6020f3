"""Command-line entry points: synth, pretrain, train, eval, ablate and rerun.

Every command writes into a fresh run directory under the output root
(``MMKGR_RUN_DIR`` overrides ``output_dir``) and records a ``manifest.json``
with the full config, the seed, ``git describe`` and SHA-256 hashes of the
artifacts, so ``rerun`` can repeat it from the manifest alone.
"""
import argparse
import csv
import hashlib
import json
import logging
import os
import subprocess
import sys

import numpy as np

from . import __version__, kernels, pipeline
from .agent import load_best
from .config import ConfigError, SEED_STAGES, apply_overrides, from_dict, load_config
from .evaluation import evaluate
from .features import write_feature_file
from .graph import save_dataset
from .numerics import load_parameters, save_parameters

log = logging.getLogger("mmkgr")

METRICS_FILE = "metrics"
HISTORY_FILE = "history.csv"
# epoch timings vary between runs, so they live apart from the compared metrics
TIMING_FILE = "timing.csv"


# ------------------------------------------------------------------ run dirs

def output_root(cfg):
    return os.environ.get("MMKGR_RUN_DIR") or cfg.output_dir


def new_run_dir(cfg, command):
    """``<root>/<command>-<variant>-<config hash>-s<seed>``; never reuses a directory."""
    base = os.path.join(output_root(cfg), f"{command}-{cfg.variant}-{cfg.digest()}-s{cfg.seed}")
    path, n = base, 1
    while os.path.exists(path):
        n += 1
        path = f"{base}.{n}"
    os.makedirs(path)
    return path


def git_describe():
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(run_dir, command, cfg, extra=None):
    artifacts = {}
    for root, _, files in os.walk(run_dir):
        for name in sorted(files):
            if name == "manifest.json":
                continue
            path = os.path.join(root, name)
            artifacts[os.path.relpath(path, run_dir)] = sha256_file(path)
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "sub_seeds": {s: cfg.sub_seed(s) for s in SEED_STAGES},
        "git_describe": git_describe(),
        "version": __version__,
        "backend": kernels.BACKEND,
        "artifacts": dict(sorted(artifacts.items())),
    }
    manifest.update(extra or {})
    with open(os.path.join(run_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def read_manifest(path):
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# ------------------------------------------------------------------ commands

def cmd_synth(cfg, args):
    if cfg.dataset:
        raise ConfigError("dataset: synth generates data; leave dataset empty")
    run_dir = new_run_dir(cfg, "synth")
    inputs = pipeline.load_inputs(cfg)
    data_dir = os.path.join(run_dir, "data")
    save_dataset(data_dir, inputs.dataset)
    ents = inputs.dataset.entities
    write_feature_file(os.path.join(data_dir, "text.txt"), inputs.features.text, ents)
    write_feature_file(os.path.join(data_dir, "image.txt"), inputs.features.image, ents)
    write_manifest(run_dir, "synth", cfg)
    print(run_dir)
    return 0


def cmd_pretrain(cfg, args):
    run_dir = new_run_dir(cfg, "pretrain")
    inputs = pipeline.load_inputs(cfg)
    table, scorer = pipeline.pretrain(cfg, inputs)
    pipeline.save_pretrained(run_dir, table, scorer)
    write_manifest(run_dir, "pretrain", cfg)
    print(run_dir)
    return 0


def _train_into(cfg, run_dir, pretrained_dir=None):
    inputs = pipeline.load_inputs(cfg)
    if pretrained_dir:
        pretrained = pipeline.load_pretrained(pretrained_dir)
    else:
        pretrained = pipeline.pretrain(cfg, inputs)
    # the run directory is self-contained for eval
    pipeline.save_pretrained(run_dir, *pretrained)
    model, env, inputs, result = pipeline.run(cfg, inputs, pretrained)
    load_best(model, result)
    save_parameters(os.path.join(run_dir, "agent"), model.all_parameters())
    state = {"best_epoch": result.best_epoch, "epochs": len(result.history),
             "best_valid_hits1": result.best_valid_hits1, "baseline": result.baseline,
             "rng_state": result.rng_state}
    with open(os.path.join(run_dir, "train_state.json"), "w", encoding="utf-8") as fh:
        json.dump(state, fh, indent=2, sort_keys=True, default=int)
        fh.write("\n")
    _write_history(run_dir, result.history)
    report = evaluate(model, env, inputs.dataset, cfg.eval_split, cfg.beam_width,
                      cfg.relation_prediction)
    report.save(os.path.join(run_dir, METRICS_FILE))
    return report, result


def _write_history(run_dir, history):
    cols = ["epoch", "mean_reward", "success_rate", "valid_hits1", "baseline"]
    with open(os.path.join(run_dir, HISTORY_FILE), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in history:
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])
    with open(os.path.join(run_dir, TIMING_FILE), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "seconds"])
        for row in history:
            w.writerow([row["epoch"], f"{row['seconds']:.4f}"])


def cmd_train(cfg, args):
    run_dir = new_run_dir(cfg, "train")
    report, result = _train_into(cfg, run_dir, args.pretrained)
    extra = {"pretrained": args.pretrained} if args.pretrained else None
    write_manifest(run_dir, "train", cfg, extra)
    print(f"{run_dir}: best epoch {result.best_epoch}, {cfg.eval_split} MRR {report.mrr:.2f} "
          f"Hits@1 {report.hits.get('hits@1', 0.0):.2f}")
    return 0


EVAL_KNOBS = ("eval_split", "beam_width", "relation_prediction", "output_dir")


def cmd_eval(cfg, args):
    ckpt = args.checkpoint
    if not ckpt or not os.path.exists(os.path.join(ckpt, "agent.bin")):
        raise FileNotFoundError(f"no agent checkpoint in {ckpt!r} (expected agent.bin/agent.json)")
    # the trained model fixes data and architecture; only evaluation knobs may change
    overrides = getattr(args, "override_list", [])
    fixed = [o for o in overrides if o.split("=", 1)[0] not in EVAL_KNOBS]
    if fixed:
        raise ConfigError(f"eval: only {', '.join(EVAL_KNOBS)} can be overridden, got {fixed}")
    cfg = apply_overrides(from_dict(read_manifest(ckpt)["config"]), overrides).validate()
    inputs = pipeline.load_inputs(cfg)
    table, _ = pipeline.load_pretrained(ckpt)
    model, env = pipeline.build_model(cfg, inputs, table)
    load_parameters(os.path.join(ckpt, "agent"), model.all_parameters())
    run_dir = new_run_dir(cfg, "eval")
    report = evaluate(model, env, inputs.dataset, cfg.eval_split, cfg.beam_width,
                      cfg.relation_prediction)
    report.save(os.path.join(run_dir, METRICS_FILE))
    write_manifest(run_dir, "eval", cfg, {"checkpoint": os.path.abspath(ckpt)})
    print(f"{run_dir}: MRR {report.mrr:.2f} Hits@1 {report.hits.get('hits@1', 0.0):.2f}")
    return 0


ABLATE_COLUMNS = ["variant", "seed", "mrr", "hits@1", "hits@5", "hits@10", "map",
                  "final_valid_hits1", "best_valid_hits1", "reward_var_last20"]


def ablation_row(variant, seed, report, history):
    rewards = np.array([r["mean_reward"] for r in history])
    return {
        "variant": variant, "seed": seed, "mrr": report.mrr,
        "hits@1": report.hits.get("hits@1", 0.0), "hits@5": report.hits.get("hits@5", 0.0),
        "hits@10": report.hits.get("hits@10", 0.0),
        "map": report.map_overall if report.map_overall is not None else "",
        "final_valid_hits1": history[-1]["valid_hits1"],
        "best_valid_hits1": max(r["valid_hits1"] for r in history),
        "reward_var_last20": float(np.var(rewards[-20:])),
    }


def cmd_ablate(cfg, args):
    variants = [v.strip().upper() for v in args.variants.split(",") if v.strip()]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    run_dir = new_run_dir(cfg, "ablate")
    rows = []
    for seed in seeds:
        for v in variants:
            sub = from_dict(cfg.to_dict())
            sub.variant, sub.seed = v, seed
            sub.validate()
            vdir = os.path.join(run_dir, f"{v}-s{seed}")
            os.makedirs(vdir)
            report, result = _train_into(sub, vdir)
            rows.append(ablation_row(v, seed, report, result.history))
            log.info("ablate %s seed %d: Hits@1 %.2f", v, seed, rows[-1]["hits@1"])
    with open(os.path.join(run_dir, "comparison.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, ABLATE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    write_manifest(run_dir, "ablate", cfg, {"variants": variants, "seeds": seeds})
    print(os.path.join(run_dir, "comparison.csv"))
    return 0


def cmd_rerun(args):
    """Repeat a recorded command from its manifest and compare metric files."""
    manifest = read_manifest(args.manifest)
    cfg = from_dict(manifest["config"])
    if args.output_dir:
        cfg.output_dir = args.output_dir
    ns = argparse.Namespace(pretrained=manifest.get("pretrained"),
                            checkpoint=manifest.get("checkpoint"),
                            variants=",".join(manifest.get("variants", [cfg.variant])),
                            seeds=",".join(str(s) for s in manifest.get("seeds", [cfg.seed])),
                            override_list=[f"{k}={json.dumps(getattr(cfg, k))}"
                                           if isinstance(getattr(cfg, k), bool)
                                           else f"{k}={getattr(cfg, k)}" for k in EVAL_KNOBS])
    before = _latest_runs(cfg)
    status = COMMANDS[manifest["command"]](cfg.validate(), ns)
    new = sorted(_latest_runs(cfg) - before)
    if not new:
        raise RuntimeError("rerun produced no run directory")
    fresh = read_manifest(os.path.join(output_root(cfg), new[-1]))
    diff = compare_artifacts(manifest, fresh, args.all_artifacts)
    for name in diff:
        print(f"MISMATCH {name}")
    print(f"rerun {os.path.join(output_root(cfg), new[-1])}: "
          f"{'identical' if not diff else f'{len(diff)} artifact(s) differ'}")
    return status if not diff else 3


def _latest_runs(cfg):
    root = output_root(cfg)
    return set(os.listdir(root)) if os.path.isdir(root) else set()


def compare_artifacts(old, new, all_artifacts=False):
    """Names of artifacts whose hashes differ.

    By default only metric, history and comparison files are compared (they
    carry no timings); commands without such files compare everything.
    Epoch timings are never compared.
    """
    def metric_like(name):
        base = os.path.basename(name)
        return base.startswith(METRICS_FILE + ".") or base in (HISTORY_FILE, "comparison.csv")

    names = set(old["artifacts"]) | set(new["artifacts"])
    names = {n for n in names if os.path.basename(n) != TIMING_FILE}
    if not all_artifacts and any(metric_like(n) for n in names):
        names = {n for n in names if metric_like(n)}
    return sorted(n for n in names if old["artifacts"].get(n) != new["artifacts"].get(n))


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train,
            "eval": cmd_eval, "ablate": cmd_ablate}


# ------------------------------------------------------------------ parsing

def build_parser():
    p = argparse.ArgumentParser(prog="mmkgr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file (defaults apply when omitted)")
        sp.add_argument("overrides", nargs="*", metavar="key=value",
                        help="config overrides, e.g. epochs=10 synthetic.entity_count=100")

    common(sub.add_parser("synth", help="generate a synthetic multi-modal KG"))
    common(sub.add_parser("pretrain", help="TransE table and triplet scorer"))
    sp = sub.add_parser("train", help="pretrain (or reuse), train the agent, evaluate")
    common(sp)
    sp.add_argument("--pretrained", help="run directory of a previous pretrain command")
    sp = sub.add_parser("eval", help="evaluate a trained run directory")
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="run directory of a train command")
    sp = sub.add_parser("ablate", help="train several variants with the same seeds")
    common(sp)
    sp.add_argument("--variants", default="FULL,OSKGR", help="comma-separated variant names")
    sp.add_argument("--seeds", default="", help="comma-separated seeds (default: config seed)")
    sp = sub.add_parser("rerun", help="repeat a command from its manifest.json")
    sp.add_argument("manifest", help="manifest.json or the run directory holding it")
    sp.add_argument("--output-dir", help="output root for the new run")
    sp.add_argument("--all-artifacts", action="store_true",
                    help="compare every artifact hash, not only metric files")
    return p


def _split_overrides(items):
    """Accept both ``key=value`` positionals and ``--key=value`` flags."""
    return [i[2:] if i.startswith("--") else i for i in items]


def main(argv=None):
    parser = build_parser()
    args, unknown = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    bad = [u for u in unknown if not (u.startswith("--") and "=" in u)]
    if bad:
        parser.error(f"unrecognized arguments: {' '.join(bad)}")
    try:
        if args.command == "rerun":
            return cmd_rerun(args)
        args.override_list = _split_overrides(list(args.overrides) + unknown)
        cfg = load_config(args.config, args.override_list)
        cfg.validate()
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
