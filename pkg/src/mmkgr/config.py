"""Run configuration: JSON files, ``--key=value`` overrides and sub-seeds."""
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .synthetic import SyntheticSpec
from .variants import AblationVariant

# fixed order: adding a stage at the end never shifts existing sub-seeds
SEED_STAGES = ("graph", "init", "rollout", "eval", "pretrain", "scorer")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data: a directory with train/valid/test.txt, or a synthetic spec when empty
    dataset: str = ""
    text_features: str = ""
    image_features: str = ""
    synthetic: dict = field(default_factory=lambda: dataclasses.asdict(SyntheticSpec()))
    add_inverses: bool = True

    # dimensions
    d_s: int = 200
    d_x: int = 400
    d: int = 200
    j: int = 200
    pooled_z: bool = False
    fusion_y_std: float = 1.0

    # environment
    T: int = 4
    max_actions: int = 200

    # structural pretraining and triplet scorer
    transe_epochs: int = 50
    transe_lr: float = 0.01
    transe_margin: float = 1.0
    scorer_dim: int = 200
    scorer_epochs: int = 30
    scorer_negatives: int = 4
    scorer_lr: float = 0.01

    # policy-gradient training
    epochs: int = 50
    batch_size: int = 128
    lr: float = 1e-3
    optimizer: str = "adam"
    rollouts: int = 1
    baseline: str = "ema"
    baseline_decay: float = 0.95
    entropy_coef: float = 0.0
    max_grad_norm: float = 5.0
    train_inverse_queries: bool = True
    bandwidth: float = 3.0
    weights: tuple = (0.1, 0.8, 0.1)
    distance_threshold: int = 3
    distance_on_success: bool = True
    memory_capacity: int = 100
    valid_limit: int = 0
    lr_scale: dict = field(default_factory=dict)
    weight_decay: float = 0.0
    action_dropout: float = 0.0

    # evaluation
    beam_width: int = 100
    eval_split: str = "test"
    relation_prediction: bool = True

    variant: str = "FULL"
    seed: int = 0
    output_dir: str = "runs"

    def __post_init__(self):
        self.weights = tuple(float(w) for w in self.weights)

    # -------------------------------------------------------------- checks

    def validate(self, check_files=True):
        errors = []
        for name in ("d_s", "d_x", "d", "j", "T", "max_actions", "epochs", "batch_size",
                     "rollouts", "beam_width", "transe_epochs", "scorer_dim", "scorer_epochs",
                     "scorer_negatives", "memory_capacity"):
            if getattr(self, name) < 1:
                errors.append(f"{name}: must be >= 1, got {getattr(self, name)}")
        if self.d_x % 2:
            errors.append(f"d_x: must be even, got {self.d_x}")
        if self.lr <= 0:
            errors.append(f"lr: must be positive, got {self.lr}")
        if len(self.weights) != 3 or abs(sum(self.weights) - 1.0) > 1e-9:
            errors.append(f"weights: must be three numbers summing to 1, got {self.weights}")
        if self.bandwidth <= 0:
            errors.append(f"bandwidth: must be positive, got {self.bandwidth}")
        if self.eval_split not in ("valid", "test"):
            errors.append(f"eval_split: must be 'valid' or 'test', got {self.eval_split!r}")
        if self.baseline not in ("ema", "rloo"):
            errors.append(f"baseline: must be 'ema' or 'rloo', got {self.baseline!r}")
        elif self.baseline == "rloo" and self.rollouts < 2:
            errors.append("baseline: 'rloo' needs rollouts >= 2")
        if self.fusion_y_std <= 0:
            errors.append(f"fusion_y_std: must be positive, got {self.fusion_y_std}")
        if not isinstance(self.lr_scale, dict) or any(
                not isinstance(v, (int, float)) or v < 0 for v in self.lr_scale.values()):
            errors.append("lr_scale: must map name prefixes to non-negative numbers")
        if self.weight_decay < 0:
            errors.append(f"weight_decay: must be >= 0, got {self.weight_decay}")
        if not 0 <= self.action_dropout < 1:
            errors.append(f"action_dropout: must be in [0, 1), got {self.action_dropout}")
        if self.optimizer not in ("adam", "sgd"):
            errors.append(f"optimizer: unknown {self.optimizer!r}")
        try:
            AblationVariant.parse(self.variant)
        except ValueError as exc:
            errors.append(f"variant: {exc}")
        if not self.dataset:
            try:
                self.synthetic_spec().validate()
            except (TypeError, ValueError) as exc:
                errors.append(f"synthetic: {exc}")
        if check_files:
            for name in ("dataset", "text_features", "image_features"):
                path = getattr(self, name)
                if path and not os.path.exists(path):
                    errors.append(f"{name}: {path} does not exist")
            if self.dataset and not (self.text_features and self.image_features):
                errors.append("text_features/image_features: required with a dataset directory")
        if errors:
            raise ConfigError("; ".join(errors))
        return self

    # ------------------------------------------------------------- helpers

    def synthetic_spec(self):
        spec = dict(self.synthetic)
        if "rules" in spec:
            spec["rules"] = tuple(tuple(r) for r in spec["rules"])
        return SyntheticSpec(**spec)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["weights"] = list(self.weights)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self):
        """Short hash of everything except the seed and output location."""
        d = self.to_dict()
        d.pop("seed")
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:10]

    def sub_seed(self, stage):
        return derive_seed(self.seed, stage)

    def rng(self, stage):
        return np.random.default_rng(self.sub_seed(stage))


def derive_seed(seed, stage):
    """Counter-based sub-seed: stage ``i`` of seed ``s`` is SeedSequence([s, i])."""
    if stage not in SEED_STAGES:
        raise KeyError(f"unknown seed stage {stage!r}")
    ss = np.random.SeedSequence([int(seed), SEED_STAGES.index(stage)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name, raw, current):
    """Parse a command-line string to the type of the field's current value."""
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(current, (int, float, str)) and not isinstance(current, bool):
        try:
            return type(current)(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected {type(current).__name__}, got {raw!r}") from None
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        raise ConfigError(f"{name}: expected JSON, got {raw!r}") from None


def apply_overrides(cfg, overrides):
    """Apply ``key=value`` strings; ``synthetic.<field>=v`` reaches into the spec."""
    for item in overrides:
        item = item[2:] if item.startswith("--") else item
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        if key.startswith("synthetic."):
            sub = key.split(".", 1)[1]
            default = dataclasses.asdict(SyntheticSpec())
            if sub not in default:
                raise ConfigError(f"{key}: unknown synthetic field")
            cfg.synthetic = dict(cfg.synthetic)
            cfg.synthetic[sub] = _coerce(key, raw, default[sub])
            continue
        if key not in _FIELDS:
            raise ConfigError(f"{key}: unknown config field")
        value = _coerce(key, raw, getattr(cfg, key))
        setattr(cfg, key, tuple(value) if key == "weights" else value)
    return cfg


def from_dict(d):
    unknown = set(d) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config fields: {', '.join(sorted(unknown))}")
    cfg = RunConfig()
    for k, v in d.items():
        if k == "synthetic":
            merged = dataclasses.asdict(SyntheticSpec())
            bad = set(v) - set(merged)
            if bad:
                raise ConfigError(f"synthetic: unknown fields {', '.join(sorted(bad))}")
            merged.update(v)
            v = merged
        setattr(cfg, k, v)
    cfg.__post_init__()
    return cfg


def load_config(path=None, overrides=()):
    if path:
        with open(path, encoding="utf-8") as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        cfg = from_dict(d)
    else:
        cfg = RunConfig()
    return apply_overrides(cfg, overrides)
