"""Experiment configuration: one JSON document, strictly validated.

Schema (every section optional, defaults shown in ``default_config()``)::

    {
      "seed": 0,
      "output": "runs/default",
      "data": {
        "cooccurrence": [[950, 50], [50, 950]],   # counts[y2][y1]
        "val_fraction": 0.2,
        "inverted_size": 800,
        "balanced_size": 800,
        "glyph": {"bar_length": 4, "jitter": 2, "noise": 0.1, "thin": 1, "thick": 3}
      },
      "model": {"hidden": [64], "d1": 2, "d2": 2},
      "train": {"epochs": 200, "batch_size": 128, "k_folds": 5},
      "eval": {"knn_k": 30, "auroc": true, "embeddings": true},
      "methods": [{"method": "baseline"}, {"method": "mine", "lambda_weight": 0.55, ...}]
    }
"""
from __future__ import annotations

import copy
import json
import re
from dataclasses import dataclass, fields
from pathlib import Path

from .data import CoOccurrenceSpec, GlyphParams
from .model import EncoderSpec, MethodConfig
from .train import TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        where = f"{source or 'config'}:{line}: " if line else f"{source or 'config'}: "
        super().__init__(where + message)


DEFAULT_METHODS = [
    {"method": "baseline"},
    {"method": "rebalance"},
    {"method": "mine", "lambda_weight": 0.55, "n_b": 3, "lr": 2e-3, "estimator_lr": 3e-3},
    {"method": "dcor", "lambda_weight": 0.5},
    {"method": "adversarial", "optimizer": "sgd", "lr": 0.01, "momentum": 0.9, "alpha": 1.0, "gamma": 10.0},
]


def default_config() -> dict:
    return {
        "seed": 0,
        "output": "runs/default",
        "data": {
            "cooccurrence": [[950, 50], [50, 950]],
            "val_fraction": 0.2,
            "inverted_size": 800,
            "balanced_size": 800,
            "glyph": {"bar_length": 4, "jitter": 2, "noise": 0.1, "thin": 1, "thick": 3},
        },
        "model": {"hidden": [64], "d1": 2, "d2": 2},
        "train": {"epochs": 200, "batch_size": 128, "k_folds": 5},
        "eval": {"knn_k": 30, "auroc": True, "embeddings": True},
        "methods": copy.deepcopy(DEFAULT_METHODS),
    }


_SECTION_KEYS = {
    "data": {"cooccurrence", "val_fraction", "inverted_size", "balanced_size", "glyph"},
    "model": {"hidden", "d1", "d2"},
    "train": {"epochs", "batch_size", "k_folds"},
    "eval": {"knn_k", "auroc", "embeddings"},
}
_TOP_KEYS = {"seed", "output", "data", "model", "train", "eval", "methods"}
_GLYPH_KEYS = {f.name for f in fields(GlyphParams)}
_METHOD_KEYS = {f.name for f in fields(MethodConfig)}


@dataclass
class ExperimentConfig:
    seed: int
    output: Path
    cooccurrence: CoOccurrenceSpec
    val_fraction: float
    inverted_size: int
    balanced_size: int
    glyph: GlyphParams
    encoder: EncoderSpec
    train: TrainConfig
    knn_k: int
    auroc: bool
    embeddings: bool
    methods: list[MethodConfig]
    raw: dict

    def method(self, name: str) -> MethodConfig:
        for m in self.methods:
            if m.name == name:
                return m
        raise KeyError(name)

    def resolved_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"


def _line_of(text: str | None, key: str) -> int | None:
    if not text:
        return None
    pat = re.compile(r'"' + re.escape(key) + r'"\s*:')
    for i, line in enumerate(text.splitlines(), 1):
        if pat.search(line):
            return i
    return None


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "glyph":
            out[k] = _merge(out[k], v)
        elif k == "glyph" and isinstance(v, dict):
            out[k] = {**out.get(k, {}), **v}
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_config(doc: dict, text: str | None = None, source: str | None = None) -> ExperimentConfig:
    """Validate a config document (merged over defaults) before any work starts."""

    def fail(msg, key=None):
        raise ConfigError(msg, _line_of(text, key) if key else None, source)

    if not isinstance(doc, dict):
        fail("top level must be a JSON object")
    for k in doc:
        if k not in _TOP_KEYS:
            fail(f"unknown key {k!r}", k)
    for section, allowed in _SECTION_KEYS.items():
        sub = doc.get(section, {})
        if not isinstance(sub, dict):
            fail(f"section {section!r} must be an object", section)
        for k in sub:
            if k not in allowed:
                fail(f"unknown key {section}.{k}", k)
    glyph_doc = doc.get("data", {}).get("glyph", {})
    for k in glyph_doc:
        if k not in _GLYPH_KEYS:
            fail(f"unknown key data.glyph.{k}", k)
    if "methods" in doc:
        if not isinstance(doc["methods"], list) or not doc["methods"]:
            fail("methods must be a non-empty list", "methods")
        for entry in doc["methods"]:
            if not isinstance(entry, dict) or "method" not in entry:
                fail("each methods entry needs a 'method' field", "methods")
            for k in entry:
                if k not in _METHOD_KEYS:
                    fail(f"unknown key {k!r} in method {entry.get('method')!r}", k)

    merged = _merge(default_config(), doc)
    d, tr, ev = merged["data"], merged["train"], merged["eval"]
    try:
        co = CoOccurrenceSpec(tuple(tuple(int(c) for c in row) for row in d["cooccurrence"]))
    except (TypeError, ValueError) as exc:
        fail(f"data.cooccurrence: {exc}", "cooccurrence")
    if not 0 < float(d["val_fraction"]) < 1:
        fail("data.val_fraction must be in (0, 1)", "val_fraction")
    for key in ("inverted_size", "balanced_size"):
        if not isinstance(d[key], int) or d[key] <= 0:
            fail(f"data.{key} must be a positive integer", key)
    if d["balanced_size"] % 4:
        fail("data.balanced_size must be divisible by 4", "balanced_size")
    try:
        glyph = GlyphParams(**d["glyph"])
    except (TypeError, ValueError) as exc:
        fail(f"data.glyph: {exc}", "glyph")
    for key in ("epochs", "batch_size", "k_folds"):
        if not isinstance(tr[key], int) or tr[key] < 1:
            fail(f"train.{key} must be a positive integer", key)
    if tr["k_folds"] < 2:
        fail("train.k_folds must be at least 2", "k_folds")
    if not isinstance(ev["knn_k"], int) or ev["knn_k"] < 1:
        fail("eval.knn_k must be a positive integer", "knn_k")
    if not isinstance(merged["seed"], int):
        fail("seed must be an integer", "seed")
    try:
        enc = EncoderSpec(glyph.height, glyph.width, tuple(merged["model"]["hidden"]),
                          int(merged["model"]["d1"]), int(merged["model"]["d2"]))
    except (TypeError, ValueError) as exc:
        fail(f"model: {exc}", "model")
    methods = []
    for entry in merged["methods"]:
        try:
            methods.append(MethodConfig(**entry))
        except (TypeError, ValueError) as exc:
            fail(str(exc), entry.get("method"))
    names = [m.name for m in methods]
    if len(set(names)) != len(names):
        fail(f"method names must be unique, got {names}", "methods")

    merged["methods"] = [m.to_dict() for m in methods]
    return ExperimentConfig(
        seed=merged["seed"], output=Path(merged["output"]), cooccurrence=co,
        val_fraction=float(d["val_fraction"]), inverted_size=d["inverted_size"],
        balanced_size=d["balanced_size"], glyph=glyph, encoder=enc,
        train=TrainConfig(tr["epochs"], tr["batch_size"], tr["k_folds"]),
        knn_k=ev["knn_k"], auroc=bool(ev["auroc"]), embeddings=bool(ev["embeddings"]),
        methods=methods, raw=merged)


def load_config(path: str | Path | None, overrides: dict | None = None) -> ExperimentConfig:
    """Read a JSON config (or the defaults when ``path`` is None) and apply overrides."""
    text, source, doc = None, None, {}
    if path is not None:
        source = str(path)
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config ({exc.strerror})", None, source) from None
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc.msg}", exc.lineno, source) from None
    if overrides:
        doc = _merge(doc, overrides)
    return parse_config(doc, text, source)
