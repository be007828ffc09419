"""Training regimes: base-task pretraining, CTC transfer, DAT, Acc-PT + DAT.

The adversarial step builds one scalar objective per batch -- masked CTC on
annotated samples plus the accent cross-entropy routed through the gradient
reversal layer -- and realizes all three saddle-point updates in a single
backward pass. By default the discriminator update carries the lambda factor
(the theta_d step is lambda * dL_d/d theta_d); setting discriminator_unscaled
moves lambda into the reversal coefficient instead, leaving theta_d unscaled.
Either way the encoder's adversarial gradient is -lambda * dL_d/d theta_f.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, _contig
from .ctc import EvalReport, ctc_loss_grad, greedy_decode, wer_aggregate
from .data import (Utterance, as_training_sets, decode_labels, encode_text,
                   load_utterance_features, make_batches)
from .errors import (ConfigError, DataError, InternalInvariantError,
                     InvalidArgument)
from .model import (ModelConfig, ModelParams, build_model, decoder_forward,
                    discriminator_forward, discriminator_head_forward,
                    encoder_forward)
from .optim import LambdaSchedule, OptimizerState, apply_step, lambda_schedule

REGIMES = ("pretrain_base", "ctc_retune", "dat", "accpt_dat")
CHECKPOINT_FORMAT_VERSION = 1

_DTYPE_NAMES = {"f32": np.float32, "f64": np.float64}


@dataclass
class DiscPretrainConfig:
    """Stop rule and optimizer settings for discriminator pre-training."""

    patience: int = 3
    min_delta: float = 0.0025  # accuracy improvement below this counts as stalled
    max_epochs: int = 50
    batch_size: int = 16
    lr: float = 0.02


@dataclass
class TrainConfig:
    """One training run: regime, budgets, optimizer, adversarial schedule."""

    regime: str = "pretrain_base"
    epochs: dict[str, int] = field(default_factory=lambda: {
        "pretrain_base": 15, "ctc_retune": 10, "dat": 10, "accpt_dat": 10})
    batch_size: int = 8
    rho: float = 0.5  # fraction of each DAT batch drawn from S
    seed: int = 1234
    checkpoint_every: int = 0  # epochs between mid-run checkpoints; 0 = final only
    optimizer: OptimizerState = field(default_factory=OptimizerState)
    lam: LambdaSchedule = field(default_factory=LambdaSchedule)
    disc_pretrain: DiscPretrainConfig = field(default_factory=DiscPretrainConfig)
    discriminator_unscaled: bool = False

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.rho <= 1:
            raise ConfigError("rho must be in [0, 1]")
        for r in REGIMES:
            if self.epochs.get(r, 1) < 1:
                raise ConfigError(f"epochs.{r} must be >= 1")


@dataclass
class BatchSample:
    """One training example: features plus (optionally) its label sequence."""

    utt_id: str
    features: np.ndarray  # [F, T] in the model dtype
    labels: list[int] | None
    accent_id: int

    @property
    def annotated(self) -> bool:
        return self.labels is not None


def prepare_samples(root: Path, utts: list[Utterance], alphabet: str,
                    dtype=np.float32) -> dict[str, BatchSample]:
    """Load features for a split once; labels only where text is present."""
    out: dict[str, BatchSample] = {}
    for u in utts:
        feats = load_utterance_features(root, u).astype(dtype)
        labels = encode_text(u.text, alphabet) if u.text is not None else None
        out[u.id] = BatchSample(u.id, feats, labels, u.accent_id)
    return out


# -- single training steps -----------------------------------------------------

def _nonzero(grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    # structurally dead branches contribute exactly-zero buffers; dropping
    # them keeps the indicator masking of the update equations exact even
    # for optimizers with weight decay
    return {k: v for k, v in grads.items() if v.any()}


def ctc_step(params: ModelParams, batch: list[BatchSample],
             opt_state: OptimizerState, mode: str = "train") -> dict:
    """Plain CTC update on an all-annotated batch (the lambda = 0 pathway)."""
    if not batch:
        raise InvalidArgument("empty batch")
    n = len(batch)
    tape = Tape()
    terms = []
    ly_vals = []
    for sample in batch:
        if sample.labels is None:
            raise InvalidArgument(f"utterance {sample.utt_id} has no labels for CTC")
        x = tape.tensor(sample.features)
        f = encoder_forward(params, x, mode)
        log_probs = decoder_forward(params, f)
        loss_val, grad = ctc_loss_grad(log_probs.data, sample.labels)
        ly = ad.precomputed_loss(log_probs, loss_val, grad)
        ly_vals.append(loss_val)
        terms.append(ad.scale(ly, 1.0 / n))
    grads = tape.backward(ad.add_scalars(terms))
    apply_step(opt_state, params.all_params(), _nonzero(grads))
    mean_ly = sum(ly_vals) / n
    return {"L_y": mean_ly, "L_d": None, "E": mean_ly}


def dat_step(params: ModelParams, batch: list[BatchSample], lam: float,
             opt_state: OptimizerState, rng: np.random.Generator | None = None,
             mode: str = "train", discriminator_unscaled: bool = False) -> dict:
    """One adversarial update realizing the three saddle-point equations.

    CTC loss flows through the decoder for annotated samples only; the accent
    CE loss flows through GRL + discriminator for every sample. A single
    backward pass produces all gradients; the optimizer then applies them.
    Returns mean CTC loss over annotated samples, mean CE loss over all, and
    the batch objective E = (1/N) sum(1[a=0] L_y - lambda L_d).
    """
    if not batch:
        raise InvalidArgument("empty batch")
    if lam < 0:
        raise InvalidArgument("lambda must be >= 0")
    if not params.discriminator:
        raise InvalidArgument("dat_step needs a discriminator; use ctc_step instead")
    n = len(batch)
    if discriminator_unscaled:
        grl_coeff, ce_coeff = lam, 1.0
    else:
        grl_coeff, ce_coeff = 1.0, lam

    tape = Tape()
    terms = []
    ly_vals: list[float] = []
    ld_vals: list[float] = []
    for sample in batch:
        x = tape.tensor(sample.features)
        f = encoder_forward(params, x, mode)
        if sample.annotated:
            log_probs = decoder_forward(params, f)
            loss_val, grad = ctc_loss_grad(log_probs.data, sample.labels)
            ly = ad.precomputed_loss(log_probs, loss_val, grad)
            ly_vals.append(loss_val)
            terms.append(ad.scale(ly, 1.0 / n))
        scores = discriminator_forward(params, f, grl_coeff, mode, rng)
        ld = ad.nll(scores, sample.accent_id)
        ld_vals.append(float(ld.data))
        if ce_coeff != 0.0:
            terms.append(ad.scale(ld, ce_coeff / n))

    mean_ly = sum(ly_vals) / len(ly_vals) if ly_vals else None
    mean_ld = sum(ld_vals) / len(ld_vals)
    objective = (sum(ly_vals) - lam * sum(ld_vals)) / n
    if not terms:
        warnings.warn("batch has no annotated samples and lambda = 0; "
                      "no gradient flows anywhere (step skipped)", stacklevel=2)
        return {"L_y": mean_ly, "L_d": mean_ld, "E": objective}
    grads = tape.backward(ad.add_scalars(terms))
    apply_step(opt_state, params.all_params(), _nonzero(grads))
    return {"L_y": mean_ly, "L_d": mean_ld, "E": objective}


# -- discriminator pre-training --------------------------------------------------

def _pooled_features(params: ModelParams, samples: list[BatchSample]) -> np.ndarray:
    """Mean-pooled eval-mode encoder features, one row per sample."""
    rows = []
    for s in samples:
        tape = Tape()
        f = encoder_forward(params, tape.tensor(s.features), "eval")
        rows.append(ad.mean_over_time(f).data)
    return np.stack(rows)


def _head_accuracy(params: ModelParams, pooled: np.ndarray,
                   accents: list[int]) -> float:
    correct = 0
    for row, accent in zip(pooled, accents):
        tape = Tape()
        scores = discriminator_head_forward(params, tape.tensor(row), "eval")
        correct += int(np.argmax(scores.data)) == accent
    return correct / len(accents)


def pretrain_discriminator(params: ModelParams, train_samples: list[BatchSample],
                           val_samples: list[BatchSample],
                           config: DiscPretrainConfig, seed: int) -> list[float]:
    """Train theta_d to classify accents on frozen encoder features.

    The encoder and decoder are frozen (and verified bitwise unchanged);
    features are pooled once through the eval-mode encoder, then the
    classifier head trains with plain cross entropy -- no gradient reversal.
    Stops when validation accuracy improves by less than min_delta for
    `patience` consecutive epochs, or at max_epochs. Returns the per-epoch
    validation accuracy trace.
    """
    if not params.discriminator:
        raise InvalidArgument("model has no discriminator to pre-train")
    if not train_samples or not val_samples:
        raise InvalidArgument("discriminator pre-training needs train and val samples")
    params.set_trainable("encoder", False)
    params.set_trainable("decoder", False)
    enc_before = params.digest("encoder")
    dec_before = params.digest("decoder")
    try:
        if params.config.n_accents == 1:
            return [1.0]
        train_pool = _pooled_features(params, train_samples)
        val_pool = _pooled_features(params, val_samples)
        train_accents = [s.accent_id for s in train_samples]
        val_accents = [s.accent_id for s in val_samples]
        opt = OptimizerState(kind="novograd", lr=config.lr)
        disc_params = {p.name: p for p in params.discriminator.values()}
        trace: list[float] = []
        best = -np.inf
        stalled = 0
        for epoch in range(config.max_epochs):
            rng = np.random.default_rng([seed, 0xAC, epoch])
            order = rng.permutation(len(train_samples))
            for start in range(0, len(order), config.batch_size):
                chunk = order[start:start + config.batch_size]
                tape = Tape()
                terms = []
                for idx in chunk:
                    pooled = tape.tensor(train_pool[idx])
                    scores = discriminator_head_forward(params, pooled, "train", rng)
                    terms.append(ad.scale(ad.nll(scores, train_accents[idx]),
                                          1.0 / len(chunk)))
                grads = tape.backward(ad.add_scalars(terms))
                apply_step(opt, disc_params, _nonzero(grads))
            acc = _head_accuracy(params, val_pool, val_accents)
            trace.append(acc)
            if acc > best + config.min_delta:
                best = acc
                stalled = 0
            else:
                stalled += 1
                if stalled >= config.patience:
                    break
        return trace
    finally:
        if params.digest("encoder") != enc_before or params.digest("decoder") != dec_before:
            raise InternalInvariantError(
                "frozen encoder/decoder parameters drifted during Acc-PT")
        params.set_trainable("encoder", True)
        params.set_trainable("decoder", True)


# -- evaluation ------------------------------------------------------------------

def transcribe(params: ModelParams, features: np.ndarray, alphabet: str) -> list[str]:
    """Greedy-decode one utterance into word tokens (eval mode)."""
    tape = Tape()
    f = encoder_forward(params, tape.tensor(features), "eval")
    log_probs = decoder_forward(params, f)
    return decode_labels(greedy_decode(log_probs.data), alphabet)


def evaluate_pairs(decode_fn, utts: list[Utterance], subsets: dict[str, list[int]],
                   weighting: str = "utterances") -> EvalReport:
    """Score any utterance->words decoder against manifest ground truth."""
    pairs = []
    for u in utts:
        if u.text is None:
            raise DataError(f"utterance {u.id} has no ground-truth text for scoring")
        pairs.append((u.text.split(), decode_fn(u), u.accent_id))
    return wer_aggregate(pairs, subsets, weighting)


def evaluate_model(params: ModelParams, root: Path, utts: list[Utterance],
                   subsets: dict[str, list[int]], alphabet: str,
                   weighting: str = "utterances", dtype=np.float32) -> EvalReport:
    """Greedy-decode every utterance and aggregate WER per accent subset."""

    def decode(u: Utterance) -> list[str]:
        feats = load_utterance_features(root, u).astype(dtype)
        return transcribe(params, feats, alphabet)

    return evaluate_pairs(decode, utts, subsets, weighting)


def evaluate_samples(params: ModelParams, samples: list[BatchSample],
                     refs: dict[str, str], subsets: dict[str, list[int]],
                     alphabet: str, weighting: str = "utterances") -> EvalReport:
    """Like evaluate_model but over preloaded samples (training-loop path)."""
    pairs = []
    for s in samples:
        ref = refs.get(s.utt_id)
        if ref is None:
            raise DataError(f"utterance {s.utt_id} has no ground-truth text")
        pairs.append((ref.split(), transcribe(params, s.features, alphabet),
                      s.accent_id))
    return wer_aggregate(pairs, subsets, weighting)


# -- checkpoints -----------------------------------------------------------------

@dataclass
class Checkpoint:
    """In-memory image of a checkpoint directory."""

    meta: dict
    arrays: dict[str, np.ndarray]


def _dtype_name(dt) -> str:
    dt = np.dtype(dt)
    if dt == np.float32:
        return "f32"
    if dt == np.float64:
        return "f64"
    raise InvalidArgument(f"unsupported checkpoint dtype {dt}")


def _canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def save_checkpoint(path: Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write meta.json, index.json, params.bin (little-endian, name-sorted)."""
    import hashlib
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = _contig(arrays[name])
        dt = _dtype_name(arr.dtype)
        raw = arr.astype("<" + {"f32": "f4", "f64": "f8"}[dt]).tobytes()
        index.append({"name": name, "dtype": dt, "shape": list(arr.shape),
                      "byte_offset": offset})
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    meta = dict(meta)
    meta["format_version"] = CHECKPOINT_FORMAT_VERSION
    meta["params_sha256"] = hashlib.sha256(payload).hexdigest()
    (path / "params.bin").write_bytes(payload)
    (path / "index.json").write_text(_canonical_json(index) + "\n")
    (path / "meta.json").write_text(_canonical_json(meta) + "\n")


def load_checkpoint(path: Path) -> Checkpoint:
    """Read a checkpoint directory back; refuses partial or mismatched state."""
    import hashlib
    path = Path(path)
    for fname in ("meta.json", "index.json", "params.bin"):
        if not (path / fname).exists():
            raise DataError(f"checkpoint {path} is missing {fname}")
    meta = json.loads((path / "meta.json").read_text())
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise DataError(f"checkpoint format version {meta.get('format_version')} "
                        f"!= {CHECKPOINT_FORMAT_VERSION}")
    index = json.loads((path / "index.json").read_text())
    payload = (path / "params.bin").read_bytes()
    if hashlib.sha256(payload).hexdigest() != meta.get("params_sha256"):
        raise DataError(f"checkpoint {path}: params.bin digest mismatch")
    arrays: dict[str, np.ndarray] = {}
    for entry in index:
        dt = {"f32": "<f4", "f64": "<f8"}[entry["dtype"]]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["byte_offset"]
        nbytes = count * np.dtype(dt).itemsize
        if start + nbytes > len(payload):
            raise DataError(f"checkpoint {path}: params.bin truncated at "
                            f"{entry['name']}")
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).copy()
    return Checkpoint(meta, arrays)


def checkpoint_meta(config_digest: str, regime: str, status: str, epoch: int,
                    step: int, total_steps: int, model_cfg: ModelConfig,
                    train_cfg: TrainConfig, alphabet: str, dtype,
                    has_discriminator: bool, disc_pretrained: bool,
                    opt_state: OptimizerState) -> dict:
    from .model import model_config_to_dict
    return {
        "config_digest": config_digest,
        "regime": regime,
        "status": status,  # "epoch" (resumable) or "final"
        "epoch": epoch,
        "step": step,
        "total_steps": total_steps,
        "dtype": _dtype_name(dtype),
        "alphabet": alphabet,
        "model_config": model_config_to_dict(model_cfg),
        "has_discriminator": has_discriminator,
        "disc_pretrained": disc_pretrained,
        "rng": {"train_seed": train_cfg.seed, "next_epoch": epoch},
        "optimizer": {
            "kind": opt_state.kind, "lr": opt_state.lr,
            "beta1": opt_state.beta1, "beta2": opt_state.beta2,
            "eps": opt_state.eps, "weight_decay": opt_state.weight_decay,
            "second_moment": {k: opt_state.second_moment[k]
                              for k in sorted(opt_state.second_moment)},
        },
    }


def checkpoint_arrays(params: ModelParams, opt_state: OptimizerState) -> dict:
    arrays = {name: p.data for name, p in params.all_params().items()}
    for name in sorted(opt_state.first_moment):
        arrays[f"optim.m.{name}"] = opt_state.first_moment[name]
    return arrays


def params_from_checkpoint(ckpt: Checkpoint, dtype=None) -> ModelParams:
    """Rebuild ModelParams with every tensor taken verbatim from the checkpoint."""
    from .model import model_config_from_dict
    cfg = model_config_from_dict(ckpt.meta["model_config"])
    if dtype is None:
        dtype = _DTYPE_NAMES[ckpt.meta["dtype"]]
    params = build_model(cfg, np.random.default_rng(0), dtype,
                         include_discriminator=ckpt.meta["has_discriminator"])
    model_names = set(params.all_params())
    ckpt_names = {n for n in ckpt.arrays if not n.startswith("optim.")}
    if model_names != ckpt_names:
        missing = sorted(model_names - ckpt_names)[:3]
        extra = sorted(ckpt_names - model_names)[:3]
        raise DataError(f"checkpoint arrays do not match the model config "
                        f"(missing {missing}, unexpected {extra})")
    for name, p in params.all_params().items():
        p.tensor.data = _contig(ckpt.arrays[name].astype(dtype))
    return params


def opt_state_from_checkpoint(ckpt: Checkpoint) -> OptimizerState:
    doc = ckpt.meta["optimizer"]
    state = OptimizerState(kind=doc["kind"], lr=doc["lr"], beta1=doc["beta1"],
                           beta2=doc["beta2"], eps=doc["eps"],
                           weight_decay=doc["weight_decay"],
                           second_moment=dict(doc["second_moment"]))
    for name, arr in ckpt.arrays.items():
        if name.startswith("optim.m."):
            state.first_moment[name[len("optim.m."):]] = arr.astype(np.float64)
    return state


def apply_transfer_init(params: ModelParams, ckpt: Checkpoint) -> None:
    """Copy encoder and decoder tensors from a donor checkpoint."""
    for name, p in params.all_params().items():
        if name.startswith("disc."):
            continue
        if name not in ckpt.arrays:
            raise DataError(f"init checkpoint lacks parameter {name!r}")
        p.tensor.data = _contig(ckpt.arrays[name].astype(p.data.dtype))


# -- regimes -----------------------------------------------------------------------

@dataclass
class RegimeData:
    """Resolved data for one training run."""

    root: Path  # directory containing the manifests' feature paths
    train: list[Utterance]
    validation: list[Utterance]
    alphabet: str
    subsets: dict[str, list[int]] = field(default_factory=dict)


@dataclass
class RegimeResult:
    params: ModelParams
    metrics: list[dict]
    final_checkpoint: Path
    disc_accuracy_trace: list[float] = field(default_factory=list)


def _is_resume(init: Checkpoint | None, regime: str, config_digest: str) -> bool:
    if init is None or init.meta.get("regime") != regime:
        return False
    if init.meta.get("status") != "epoch":
        return False
    if config_digest and init.meta.get("config_digest") not in ("", config_digest):
        raise ConfigError("resume checkpoint was produced by a different config "
                          f"(digest {init.meta.get('config_digest')})")
    return True


def run_regime(train_cfg: TrainConfig, model_cfg: ModelConfig, data: RegimeData,
               init: Checkpoint | None, out_dir: Path, dtype=np.float32,
               config_digest: str = "") -> RegimeResult:
    """Run one full training regime, checkpointing and logging per epoch.

    pretrain_base / ctc_retune train CTC on annotated accent-0 data and never
    instantiate a discriminator; dat / accpt_dat train mixed batches with the
    adversarial objective, accpt_dat pre-training the discriminator to
    convergence first. An --init checkpoint from the *same* regime with
    status "epoch" resumes that run bit-for-bit; any other checkpoint is a
    transfer-learning initialization for the encoder and decoder.
    """
    train_cfg.validate()
    regime = train_cfg.regime
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    epochs = train_cfg.epochs[regime]
    seed = train_cfg.seed
    adversarial = regime in ("dat", "accpt_dat")

    if regime != "pretrain_base" and init is None:
        raise ConfigError(f"regime {regime!r} requires an --init checkpoint "
                          "from pretrain_base (or a resumable run)")

    # training-time views: S keeps transcriptions, U has text withheld, so
    # sample preparation can never hand unannotated labels to a loss
    S_utts, U_utts = as_training_sets(data.train)
    if adversarial:
        S, U, rho = S_utts, U_utts, train_cfg.rho
    else:
        S, U, rho = S_utts, [], 1.0
    samples = prepare_samples(data.root, S + U, data.alphabet, dtype)
    val_samples = prepare_samples(data.root, data.validation, data.alphabet, dtype)
    steps_per_epoch = len(make_batches(S, U, train_cfg.batch_size, rho, seed, 0))
    total_steps = epochs * steps_per_epoch

    resume = _is_resume(init, regime, config_digest)
    disc_trace: list[float] = []
    if resume:
        params = params_from_checkpoint(init, dtype)
        opt_state = opt_state_from_checkpoint(init)
        start_epoch = int(init.meta["epoch"])
        if int(init.meta["total_steps"]) != total_steps:
            raise ConfigError("resume checkpoint disagrees on total step count")
        step = int(init.meta["step"])
    else:
        params = build_model(model_cfg, np.random.default_rng([seed, 0x11]), dtype,
                             include_discriminator=adversarial)
        if init is not None:
            apply_transfer_init(params, init)
        opt_state = train_cfg.optimizer.copy()
        start_epoch = 0
        step = 0
        if regime == "accpt_dat":
            disc_trace = pretrain_discriminator(
                params, [samples[u.id] for u in S + U],
                list(val_samples.values()), train_cfg.disc_pretrain, seed)
    val_refs = {u.id: u.text for u in data.validation}
    metrics: list[dict] = []
    metrics_path = out_dir / "metrics.jsonl"
    mode = "a" if resume else "w"
    with open(metrics_path, mode, encoding="utf-8") as log:
        for epoch in range(start_epoch, epochs):
            batches = make_batches(S, U, train_cfg.batch_size, rho, seed, epoch)
            drop_rng = np.random.default_rng([seed, 0xD0, epoch])
            ly_acc: list[float] = []
            ld_acc: list[float] = []
            lam = 0.0
            for batch_utts in batches:
                batch = [samples[u.id] for u in batch_utts]
                if adversarial:
                    lam = lambda_schedule(step / total_steps, train_cfg.lam)
                    losses = dat_step(params, batch, lam, opt_state, drop_rng,
                                      discriminator_unscaled=train_cfg.discriminator_unscaled)
                else:
                    losses = ctc_step(params, batch, opt_state)
                if losses["L_y"] is not None:
                    ly_acc.append(losses["L_y"])
                if losses["L_d"] is not None:
                    ld_acc.append(losses["L_d"])
                step += 1
            record = _epoch_record(params, data, val_samples, val_refs, regime,
                                   epoch, lam, ly_acc, ld_acc, adversarial)
            metrics.append(record)
            log.write(json.dumps(record, sort_keys=True) + "\n")
            log.flush()
            done = epoch + 1
            if (train_cfg.checkpoint_every and done < epochs
                    and done % train_cfg.checkpoint_every == 0):
                _save(out_dir / f"ckpt-epoch{done:03d}", "epoch", done, step,
                      total_steps, params, opt_state, train_cfg, model_cfg,
                      data.alphabet, dtype, config_digest, adversarial,
                      regime == "accpt_dat")
    final = out_dir / "final"
    _save(final, "final", epochs, step, total_steps, params, opt_state,
          train_cfg, model_cfg, data.alphabet, dtype, config_digest,
          adversarial, regime == "accpt_dat")
    return RegimeResult(params, metrics, final, disc_trace)


def _epoch_record(params, data: RegimeData, val_samples, val_refs, regime,
                  epoch, lam, ly_acc, ld_acc, adversarial) -> dict:
    subsets = data.subsets or {"all": sorted({u.accent_id for u in data.validation})}
    report = evaluate_samples(params, list(val_samples.values()), val_refs,
                              subsets, data.alphabet)
    disc_acc = None
    if adversarial and params.discriminator:
        pooled = _pooled_features(params, list(val_samples.values()))
        disc_acc = _head_accuracy(params, pooled,
                                  [s.accent_id for s in val_samples.values()])
    return {
        "epoch": epoch,
        "regime": regime,
        "lambda": lam,
        "loss_ctc": sum(ly_acc) / len(ly_acc) if ly_acc else None,
        "loss_disc": sum(ld_acc) / len(ld_acc) if ld_acc else None,
        "disc_acc": disc_acc,
        "val_wer_seen": report.averages.get("seen"),
        "val_wer_unseen": report.averages.get("unseen"),
    }


def _save(path, status, epoch, step, total_steps, params, opt_state, train_cfg,
          model_cfg, alphabet, dtype, config_digest, has_disc, disc_pretrained):
    meta = checkpoint_meta(config_digest, train_cfg.regime, status, epoch, step,
                           total_steps, model_cfg, train_cfg, alphabet, dtype,
                           has_disc, disc_pretrained, opt_state)
    save_checkpoint(path, meta, checkpoint_arrays(params, opt_state))
