"""RunConfig: one JSON document driving every CLI subcommand.

The document is validated against a JSON schema before any work starts;
unknown keys anywhere are rejected. Seeds live only in the top-level
``seeds`` list so a run is fully described by (config, seed).
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import jsonschema

from .augmentor import AugmentConfig
from .data import SplitPlan, SyntheticSpec
from .diffusion import DaeTrainConfig
from .errors import ConfigError, InvalidArgument
from .mil import POLICIES, VARIANTS, MilTrainConfig

_INT = {"type": "integer"}
_NUM = {"type": "number"}
_BOOL = {"type": "boolean"}
_STR = {"type": "string"}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


def _int_list(minimum=None, min_items=1):
    item = dict(_INT, **({"minimum": minimum} if minimum is not None else {}))
    return {"type": "array", "items": item, "minItems": min_items}


_CONDITION = {"oneOf": [{"enum": ["auto", "conditional", "unconditional"]}, {"type": "integer", "minimum": 0, "maximum": 6}]}

SCHEMA = _obj({
    "out": _STR,
    "seeds": _int_list(minimum=0),
    "synthetic": _obj({
        "dim": {"type": "integer", "minimum": 1}, "n_classes": _INT, "n_witness": _INT,
        "centroid_scale": _NUM, "within_std": _NUM, "latent_rank": _INT, "latent_std": _NUM,
        "rotation_norm": _NUM, "bias_frac": _NUM, "noise_frac": _NUM,
        "bag_size_min": _INT, "bag_size_max": _INT, "witness_rate": _NUM,
        "n_train": _INT, "n_val": _INT, "n_test": _INT, "corpus_per_class": _INT}),
    "dae": _obj({
        "T": {"type": "integer", "minimum": 2}, "depth": {"type": "integer", "minimum": 1},
        "hidden": {"type": "integer", "minimum": 1}, "emb": {"type": "integer", "minimum": 2},
        "batch_size": {"type": "integer", "minimum": 1}, "base_lr": {"type": "number", "exclusiveMinimum": 0},
        "scale_lr_by_batch": _BOOL, "epochs": {"type": "integer", "minimum": 0}, "conditional": _BOOL,
        "val_size": {"type": "integer", "minimum": 0}}),
    "augment": _obj({"T": {"type": "integer", "minimum": 2}, "K": {"type": "integer", "minimum": 0},
                     "condition": _CONDITION}),
    "mil": _obj({
        "variant": {"enum": list(VARIANTS)}, "policy": {"enum": list(POLICIES)},
        "lr": {"type": "number", "exclusiveMinimum": 0}, "max_epochs": {"type": "integer", "minimum": 1},
        "patience": {"type": "integer", "minimum": 1}, "metric": {"enum": ["macro_auc", "micro_acc", "neg_loss"]},
        "hidden": {"type": "integer", "minimum": 1}, "temperature": {"type": "number", "exclusiveMinimum": 0},
        "mixup_alpha": {"type": "number", "exclusiveMinimum": 0}, "pseudo_bags": {"type": "integer", "minimum": 1}}),
    "split": _obj({
        "k": {"type": ["integer", "null"], "minimum": 2},
        "fractions": {"type": ["array", "null"], "items": _NUM, "minItems": 3, "maxItems": 3},
        "seed": {"type": "integer", "minimum": 0}, "test_fold": {"type": "integer", "minimum": 0}}),
    "inputs": _obj({"data": _STR, "corpus": _STR, "dae": _STR, "mil": _STR, "augmented": _STR}),
    "sweep": _obj({
        "policies": {"type": "array", "items": {"enum": list(POLICIES)}, "minItems": 1},
        "variants": {"type": "array", "items": {"enum": list(VARIANTS)}, "minItems": 1},
        "K": _int_list(minimum=0),
        "condition_modes": {"type": "array", "items": _CONDITION, "minItems": 1}}),
    "bench": _obj({"sizes": _int_list(minimum=1), "repeats": {"type": "integer", "minimum": 1},
                   "extractor_seconds_per_instance": {"type": "number", "minimum": 0}}),
    "projection": _obj({"sources": {"type": "array", "minItems": 1,
                                    "items": _obj({"tag": _STR, "manifest": _STR}, required=("tag", "manifest"))}}),
})


def _subset(cls, values: dict, **extra):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in values.items() if k in names}, **extra)


@dataclass
class BenchConfig:
    sizes: list[int] = field(default_factory=lambda: [100, 500, 1000, 5000])
    repeats: int = 3
    extractor_seconds_per_instance: float = 0.0


@dataclass
class SweepConfig:
    policies: list[str] = field(default_factory=lambda: ["none", "augdiff"])
    variants: list[str] = field(default_factory=lambda: ["amil"])
    K: list[int] | None = None  # None: 0.1T, 0.2T, 0.3T, 0.4T
    condition_modes: list = field(default_factory=lambda: ["auto"])

    def k_values(self, T: int) -> list[int]:
        if self.K is not None:
            return list(self.K)
        return [max(1, round(f * T)) for f in (0.1, 0.2, 0.3, 0.4)]


@dataclass
class RunConfig:
    raw: dict
    out: Path
    seeds: list[int]
    synthetic: SyntheticSpec
    dae: DaeTrainConfig
    augment: AugmentConfig
    mil: MilTrainConfig
    split: SplitPlan | None
    test_fold: int
    inputs: dict
    sweep: SweepConfig
    bench: BenchConfig
    projection: list[dict]

    @property
    def seed(self) -> int:
        return self.seeds[0]

    def sha256(self) -> str:
        return config_digest(self.raw)

    def input_path(self, key: str) -> Path:
        defaults = {"data": self.out / "data", "corpus": self.out / "data" / "corpus.json",
                    "dae": self.out / "dae" / "dae.bin", "mil": self.out / "mil" / "mil.bin",
                    "augmented": self.out / "augment" / "manifest.json"}
        return Path(self.inputs[key]) if key in self.inputs else defaults[key]

    def augment_for(self, seed: int, K: int | None = None, condition=None) -> AugmentConfig:
        return AugmentConfig(T=self.augment.T, K=self.augment.K if K is None else K,
                             condition=self.augment.condition if condition is None else condition, seed=seed)

    def mil_for(self, seed: int, **changes) -> MilTrainConfig:
        cfg = copy.deepcopy(self.mil)
        cfg.seed = seed
        cfg.augment = self.augment_for(seed, changes.pop("K", None), changes.pop("condition", None))
        for k, v in changes.items():
            setattr(cfg, k, v)
        return cfg


def config_digest(raw: dict) -> str:
    return hashlib.sha256(json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b=value``; the value is parsed as JSON, falling back to a plain string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, value = text.split("=", 1)
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return key.split("."), parsed


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    out = copy.deepcopy(raw)
    for text in overrides:
        path, value = parse_override(text)
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a non-object")
        node[path[-1]] = value
    return out


def build_config(raw: dict) -> RunConfig:
    """Validate the raw document and resolve it into typed sections."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {e.message}")
    seeds = list(raw.get("seeds", [0]))
    synthetic = _subset(SyntheticSpec, raw.get("synthetic", {}), seed=seeds[0])
    dae = _subset(DaeTrainConfig, raw.get("dae", {}), seed=seeds[0])
    aug_raw = dict(raw.get("augment", {}))
    aug_raw.setdefault("T", dae.T)
    augment = _subset(AugmentConfig, aug_raw, seed=seeds[0])
    mil = _subset(MilTrainConfig, raw.get("mil", {}), seed=seeds[0], augment=augment)
    split_raw = raw.get("split")
    split = None
    test_fold = 0
    if split_raw is not None:
        split_raw = dict(split_raw)
        test_fold = split_raw.pop("test_fold", 0)
        if split_raw.get("fractions") is not None:
            split_raw["fractions"] = tuple(split_raw["fractions"])
            split_raw.setdefault("k", None)
        split = _subset(SplitPlan, split_raw)
        if split.k is not None and split.fractions is None and test_fold >= split.k:
            raise ConfigError(f"test_fold {test_fold} out of range for k={split.k}")
    cfg = RunConfig(raw=raw, out=Path(raw.get("out", "runs")), seeds=seeds, synthetic=synthetic, dae=dae,
                    augment=augment, mil=mil, split=split, test_fold=test_fold, inputs=dict(raw.get("inputs", {})),
                    sweep=_subset(SweepConfig, raw.get("sweep", {})), bench=_subset(BenchConfig, raw.get("bench", {})),
                    projection=list(raw.get("projection", {}).get("sources", [])))
    try:
        synthetic.validate()
        dae.validate()
        augment.validate()
        if augment.T != dae.T:
            raise InvalidArgument(f"augment.T={augment.T} differs from dae.T={dae.T}")
        for k in cfg.sweep.k_values(augment.T):
            if k >= augment.T:
                raise InvalidArgument(f"sweep K={k} must be below T={augment.T}")
        mil.validate()
    except InvalidArgument as exc:
        raise ConfigError(f"config error: {exc}") from exc
    return cfg


def load_config(path, overrides=(), out=None, seed=None) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = apply_overrides(raw, list(overrides))
    if out is not None:
        raw["out"] = str(out)
    if seed is not None:
        raw["seeds"] = [seed]
    return build_config(raw)
