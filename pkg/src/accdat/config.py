"""Experiment configuration: strict JSON schema with pathed error messages.

Unknown keys are rejected everywhere; omitted keys fill from the desk-scale
defaults, and the canonicalized filled document's SHA-256 digest is embedded
in checkpoints and reports so runs can be traced to their exact config.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .data import CorpusConfig, default_word_list
from .errors import ConfigError
from .model import (BlockConfig, ModelConfig, block_config_from_dict,
                    block_config_to_dict, mini_config, model_config_from_dict,
                    model_config_to_dict)
from .optim import LambdaSchedule, OptimizerState
from .train import REGIMES, DiscPretrainConfig, TrainConfig

_REQUIRED = object()

DEFAULT_ALPHABET = "abcdefg_"
# new-task per-accent counts follow the accent-inventory skew: accent 0
# dominates, the smallest accent is a sliver of the corpus
DEFAULT_NEW_COUNTS = [200, 100, 70, 55, 35, 25, 10]
DEFAULT_BASE_COUNTS = [160]


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def config_digest(doc: dict) -> str:
    return hashlib.sha256(canonical_json(doc).encode()).hexdigest()


def _err(path: str, msg: str) -> ConfigError:
    return ConfigError(f"{path}: {msg}")


def _expect_object(doc, path: str) -> dict:
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise _err(path, "must be a JSON object")
    return doc


def _reject_unknown(doc: dict, path: str, allowed: set[str]) -> None:
    unknown = set(doc) - allowed
    if unknown:
        key = sorted(unknown)[0]
        raise _err(f"{path}.{key}" if path else key, "unknown key")


def _get(doc: dict, path: str, key: str, kinds, default=_REQUIRED, check=None,
         msg: str = ""):
    full = f"{path}.{key}" if path else key
    if key not in doc:
        if default is _REQUIRED:
            raise _err(full, "missing required key")
        return default
    val = doc[key]
    if kinds is bool:
        if not isinstance(val, bool):
            raise _err(full, "must be a boolean")
    elif kinds is int:
        if not isinstance(val, int) or isinstance(val, bool):
            raise _err(full, "must be an integer")
    elif kinds is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise _err(full, "must be a number")
        val = float(val)
    elif kinds is str:
        if not isinstance(val, str):
            raise _err(full, "must be a string")
    elif kinds is list:
        if not isinstance(val, list):
            raise _err(full, "must be an array")
    elif kinds is dict:
        if not isinstance(val, dict):
            raise _err(full, "must be an object")
    if check is not None and not check(val):
        raise _err(full, msg or "constraint violated")
    return val


def _int_list(doc, path, key, default, positive=True):
    val = _get(doc, path, key, list, default)
    full = f"{path}.{key}"
    for i, v in enumerate(val):
        if not isinstance(v, int) or isinstance(v, bool) or (positive and v <= 0):
            raise _err(f"{full}[{i}]", "must be a positive integer")
    return list(val)


def _pair(doc, path, key, default):
    val = _get(doc, path, key, list, default)
    full = f"{path}.{key}"
    if len(val) != 2 or any(isinstance(v, bool) or not isinstance(v, (int, float))
                            for v in val):
        raise _err(full, "must be a [min, max] number pair")
    return [val[0], val[1]]


# -- sections ---------------------------------------------------------------------

def _fill_domain(doc, path: str, domain: str, alphabet: str, world_seed: int) -> dict:
    doc = _expect_object(doc, path)
    _reject_unknown(doc, path, {"words", "counts", "noise", "seed",
                                "sentence_len", "domain_shift"})
    default_counts = DEFAULT_BASE_COUNTS if domain == "base" else DEFAULT_NEW_COUNTS
    default_seed = 11 if domain == "base" else 12
    default_noise = 0.05 if domain == "base" else 0.1
    words = _get(doc, path, "words", list,
                 default_word_list(alphabet, 30, world_seed + (0 if domain == "base" else 1)))
    for i, w in enumerate(words):
        if not isinstance(w, str) or not w:
            raise _err(f"{path}.words[{i}]", "must be a non-empty string")
    return {
        "words": list(words),
        "counts": _int_list(doc, path, "counts", default_counts),
        "noise": _get(doc, path, "noise", float, default_noise,
                      lambda v: v >= 0, "must be >= 0"),
        "seed": _get(doc, path, "seed", int, default_seed),
        "sentence_len": [int(v) for v in _pair(doc, path, "sentence_len", [2, 4])],
        "domain_shift": _get(doc, path, "domain_shift", float,
                             0.0 if domain == "base" else 0.25,
                             lambda v: v >= 0, "must be >= 0"),
    }


def _fill_corpus(doc) -> dict:
    path = "corpus"
    doc = _expect_object(doc, path)
    _reject_unknown(doc, path, {"alphabet", "feature_dim", "frames_per_symbol",
                                "world_seed", "accent_strength", "stretch_range",
                                "accent_noise", "base", "new"})
    alphabet = _get(doc, path, "alphabet", str, DEFAULT_ALPHABET,
                    lambda v: len(v) >= 2 and len(set(v)) == len(v),
                    "needs >= 2 distinct symbols")
    world_seed = _get(doc, path, "world_seed", int, 2024)
    filled = {
        "alphabet": alphabet,
        "feature_dim": _get(doc, path, "feature_dim", int, 16,
                            lambda v: v >= 1, "must be >= 1"),
        "frames_per_symbol": _get(doc, path, "frames_per_symbol", int, 4,
                                  lambda v: v >= 1, "must be >= 1"),
        "world_seed": world_seed,
        "accent_strength": _get(doc, path, "accent_strength", float, 0.6,
                                lambda v: 0 <= v <= 1, "must be in [0, 1]"),
        "stretch_range": _pair(doc, path, "stretch_range", [0.9, 1.15]),
        "accent_noise": _get(doc, path, "accent_noise", float, 0.0,
                             lambda v: v >= 0, "must be >= 0"),
        "base": _fill_domain(doc.get("base"), "corpus.base", "base",
                             alphabet, world_seed),
        "new": _fill_domain(doc.get("new"), "corpus.new", "new",
                            alphabet, world_seed),
    }
    if len(filled["base"]["counts"]) != 1:
        raise _err("corpus.base.counts", "base task has accent 0 only (one count)")
    return filled


def _fill_block(doc, path: str) -> dict:
    doc = _expect_object(doc, path)
    _reject_unknown(doc, path, {"name", "kind", "K", "c_out", "repeats_within",
                                "block_repeats", "stride", "dilation"})
    out = {
        "name": _get(doc, path, "name", str),
        "kind": _get(doc, path, "kind", str, "conv",
                     lambda v: v in ("conv", "block"), "must be 'conv' or 'block'"),
        "K": _get(doc, path, "K", int, check=lambda v: v >= 1, msg="must be >= 1"),
        "c_out": _get(doc, path, "c_out", int,
                      check=lambda v: v >= 1, msg="must be >= 1"),
        "repeats_within": _get(doc, path, "repeats_within", int, 1,
                               lambda v: v >= 1, "must be >= 1"),
        "block_repeats": _get(doc, path, "block_repeats", int, 1,
                              lambda v: v >= 1, "must be >= 1"),
        "stride": _get(doc, path, "stride", int, 1,
                       lambda v: v >= 1, "must be >= 1"),
        "dilation": _get(doc, path, "dilation", int, 1,
                         lambda v: v >= 1, "must be >= 1"),
    }
    return out


def _fill_model(doc, corpus: dict) -> dict:
    path = "model"
    n_labels = len(corpus["alphabet"])
    n_accents = len(corpus["new"]["counts"])
    if doc is None:
        return model_config_to_dict(mini_config(
            n_labels=n_labels, n_accents=n_accents,
            input_channels=corpus["feature_dim"]))
    doc = _expect_object(doc, path)
    _reject_unknown(doc, path, {"input_channels", "encoder_blocks", "decoder_block",
                                "disc_hidden", "disc_dropout", "n_accents"})
    filled = {
        "input_channels": _get(doc, path, "input_channels", int,
                               corpus["feature_dim"]),
        "encoder_blocks": [
            _fill_block(b, f"model.encoder_blocks[{i}]")
            for i, b in enumerate(_get(doc, path, "encoder_blocks", list,
                                       check=lambda v: len(v) > 0,
                                       msg="needs at least one block"))],
        "decoder_block": _fill_block(doc.get("decoder_block", {
            "name": "C4", "kind": "conv", "K": 1, "c_out": n_labels + 1,
            "dilation": 2}), "model.decoder_block"),
        "disc_hidden": _int_list(doc, path, "disc_hidden", [32, 64, 64]),
        "disc_dropout": _get(doc, path, "disc_dropout", float, 0.2,
                             lambda v: 0 <= v < 1, "must be in [0, 1)"),
        "n_accents": _get(doc, path, "n_accents", int, n_accents),
    }
    if filled["input_channels"] != corpus["feature_dim"]:
        raise _err("model.input_channels",
                   f"must equal corpus.feature_dim ({corpus['feature_dim']})")
    if filled["decoder_block"]["c_out"] != n_labels + 1:
        raise _err("model.decoder_block.c_out",
                   f"must be alphabet size + blank ({n_labels + 1})")
    if filled["n_accents"] != n_accents:
        raise _err("model.n_accents",
                   f"must equal the new-task accent count ({n_accents})")
    return filled


def _fill_train(doc) -> dict:
    path = "train"
    doc = _expect_object(doc, path)
    _reject_unknown(doc, path, {"batch_size", "rho", "seed", "checkpoint_every",
                                "epochs", "optimizer", "lambda_schedule",
                                "disc_pretrain", "discriminator_unscaled"})
    epochs_doc = _expect_object(doc.get("epochs"), "train.epochs")
    _reject_unknown(epochs_doc, "train.epochs", set(REGIMES))
    defaults = {"pretrain_base": 15, "ctc_retune": 10, "dat": 10, "accpt_dat": 10}
    epochs = {r: _get(epochs_doc, "train.epochs", r, int, defaults[r],
                      lambda v: v >= 1, "must be >= 1") for r in REGIMES}
    opt_doc = _expect_object(doc.get("optimizer"), "train.optimizer")
    _reject_unknown(opt_doc, "train.optimizer",
                    {"kind", "lr", "beta1", "beta2", "eps", "weight_decay"})
    optimizer = {
        "kind": _get(opt_doc, "train.optimizer", "kind", str, "novograd",
                     lambda v: v in ("sgd", "novograd"),
                     "must be 'sgd' or 'novograd'"),
        "lr": _get(opt_doc, "train.optimizer", "lr", float, 0.02,
                   lambda v: v > 0, "must be > 0"),
        "beta1": _get(opt_doc, "train.optimizer", "beta1", float, 0.95),
        "beta2": _get(opt_doc, "train.optimizer", "beta2", float, 0.5),
        "eps": _get(opt_doc, "train.optimizer", "eps", float, 1e-8),
        "weight_decay": _get(opt_doc, "train.optimizer", "weight_decay",
                             float, 0.001, lambda v: v >= 0, "must be >= 0"),
    }
    lam_doc = _expect_object(doc.get("lambda_schedule"), "train.lambda_schedule")
    _reject_unknown(lam_doc, "train.lambda_schedule", {"lambda_max", "gamma"})
    lam = {
        "lambda_max": _get(lam_doc, "train.lambda_schedule", "lambda_max",
                           float, 1.0, lambda v: v >= 0, "must be >= 0"),
        "gamma": _get(lam_doc, "train.lambda_schedule", "gamma", float, 10.0,
                      lambda v: v > 0, "must be > 0"),
    }
    dp_doc = _expect_object(doc.get("disc_pretrain"), "train.disc_pretrain")
    _reject_unknown(dp_doc, "train.disc_pretrain",
                    {"patience", "min_delta", "max_epochs", "batch_size", "lr"})
    disc_pretrain = {
        "patience": _get(dp_doc, "train.disc_pretrain", "patience", int, 3,
                         lambda v: v >= 1, "must be >= 1"),
        "min_delta": _get(dp_doc, "train.disc_pretrain", "min_delta", float,
                          0.0025, lambda v: v >= 0, "must be >= 0"),
        "max_epochs": _get(dp_doc, "train.disc_pretrain", "max_epochs", int, 50,
                           lambda v: v >= 1, "must be >= 1"),
        "batch_size": _get(dp_doc, "train.disc_pretrain", "batch_size", int, 16,
                           lambda v: v >= 1, "must be >= 1"),
        "lr": _get(dp_doc, "train.disc_pretrain", "lr", float, 0.02,
                   lambda v: v > 0, "must be > 0"),
    }
    return {
        "batch_size": _get(doc, path, "batch_size", int, 8,
                           lambda v: v >= 1, "must be >= 1"),
        "rho": _get(doc, path, "rho", float, 0.5,
                    lambda v: 0 <= v <= 1, "must be in [0, 1]"),
        "seed": _get(doc, path, "seed", int, 1234),
        "checkpoint_every": _get(doc, path, "checkpoint_every", int, 0,
                                 lambda v: v >= 0, "must be >= 0"),
        "epochs": epochs,
        "optimizer": optimizer,
        "lambda_schedule": lam,
        "disc_pretrain": disc_pretrain,
        "discriminator_unscaled": _get(doc, path, "discriminator_unscaled",
                                       bool, False),
    }


def _fill_eval(doc, corpus: dict) -> dict:
    path = "eval"
    doc = _expect_object(doc, path)
    _reject_unknown(doc, path, {"subsets", "weighting"})
    n_accents = len(corpus["new"]["counts"])
    default_subsets = {
        "seen": [0],
        "unseen": list(range(1, n_accents)),
        "all": list(range(n_accents)),
    }
    subsets_doc = doc.get("subsets")
    if subsets_doc is None:
        subsets = default_subsets
    else:
        subsets_doc = _expect_object(subsets_doc, "eval.subsets")
        subsets = {}
        for name, ids in subsets_doc.items():
            full = f"eval.subsets.{name}"
            if not isinstance(ids, list) or not ids:
                raise _err(full, "must be a non-empty accent id array")
            for v in ids:
                if not isinstance(v, int) or isinstance(v, bool) or v < 0 \
                        or v >= n_accents:
                    raise _err(full, f"accent ids must be in [0, {n_accents})")
            subsets[name] = list(ids)
    return {
        "subsets": subsets,
        "weighting": _get(doc, path, "weighting", str, "utterances",
                          lambda v: v in ("utterances", "words"),
                          "must be 'utterances' or 'words'"),
    }


def _fill_paths(doc) -> dict:
    path = "paths"
    doc = _expect_object(doc, path)
    _reject_unknown(doc, path, {"data", "out"})
    out = {}
    for key in ("data", "out"):
        val = doc.get(key)
        if val is not None and not isinstance(val, str):
            raise _err(f"paths.{key}", "must be a string path")
        out[key] = val
    return out


# -- top level -----------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    """Parsed, validated, default-filled experiment description."""

    filled: dict
    digest: str

    @property
    def alphabet(self) -> str:
        return self.filled["corpus"]["alphabet"]

    def corpus_config(self, domain: str) -> CorpusConfig:
        c = self.filled["corpus"]
        d = c[domain]
        return CorpusConfig(
            domain=domain,
            vocabulary=list(d["words"]),
            accent_counts=list(d["counts"]),
            frames_per_symbol=c["frames_per_symbol"],
            feature_dim=c["feature_dim"],
            seed=d["seed"],
            noise=d["noise"],
            sentence_len=tuple(d["sentence_len"]),
            alphabet=c["alphabet"],
            world_seed=c["world_seed"],
            accent_strength=c["accent_strength"],
            stretch_range=tuple(c["stretch_range"]),
            accent_noise=c["accent_noise"],
            domain_shift=d["domain_shift"],
        )

    def model_config(self) -> ModelConfig:
        return model_config_from_dict(self.filled["model"])

    def train_config(self, regime: str = "pretrain_base") -> TrainConfig:
        t = self.filled["train"]
        o = t["optimizer"]
        cfg = TrainConfig(
            regime=regime,
            epochs=dict(t["epochs"]),
            batch_size=t["batch_size"],
            rho=t["rho"],
            seed=t["seed"],
            checkpoint_every=t["checkpoint_every"],
            optimizer=OptimizerState(kind=o["kind"], lr=o["lr"], beta1=o["beta1"],
                                     beta2=o["beta2"], eps=o["eps"],
                                     weight_decay=o["weight_decay"]),
            lam=LambdaSchedule(lambda_max=t["lambda_schedule"]["lambda_max"],
                               gamma=t["lambda_schedule"]["gamma"]),
            disc_pretrain=DiscPretrainConfig(**t["disc_pretrain"]),
            discriminator_unscaled=t["discriminator_unscaled"],
        )
        cfg.validate()
        return cfg

    @property
    def subsets(self) -> dict[str, list[int]]:
        return {k: list(v) for k, v in self.filled["eval"]["subsets"].items()}

    @property
    def weighting(self) -> str:
        return self.filled["eval"]["weighting"]

    @property
    def paths(self) -> dict:
        return dict(self.filled["paths"])


def fill_config(doc: dict) -> ExperimentConfig:
    """Validate a raw config document and fill every default."""
    doc = _expect_object(doc, "")
    _reject_unknown(doc, "", {"corpus", "model", "train", "eval", "paths"})
    corpus = _fill_corpus(doc.get("corpus"))
    filled = {
        "corpus": corpus,
        "model": _fill_model(doc.get("model"), corpus),
        "train": _fill_train(doc.get("train")),
        "eval": _fill_eval(doc.get("eval"), corpus),
        "paths": _fill_paths(doc.get("paths")),
    }
    cfg = ExperimentConfig(filled, config_digest(filled))
    # force full validation of the typed views now, with config-level errors
    cfg.corpus_config("base").validate()
    cfg.corpus_config("new").validate()
    cfg.model_config().validate()
    cfg.train_config()
    return cfg


def parse_config(path: Path) -> ExperimentConfig:
    """Load and validate an experiment config file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return fill_config(doc)
