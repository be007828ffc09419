"""QuartzNet-style convolutional CTC model with an accent discriminator.

The encoder is a stack of depthwise-separable 1-D conv blocks (C1 strides the
time axis by 2, B-blocks carry residual shortcuts, C2/C3 finish the feature
stack); the decoder is a pointwise conv head emitting per-frame label
log-probabilities; the discriminator classifies the accent from mean-pooled
encoder features behind a gradient reversal layer.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Parameter, Tape, Tensor, _contig
from .errors import ConfigError, InvalidArgument


@dataclass
class BlockConfig:
    """Shape of one encoder/decoder stage."""

    name: str
    kind: str  # "conv" | "block"
    K: int
    c_out: int
    repeats_within: int = 1
    block_repeats: int = 1
    stride: int = 1
    dilation: int = 1

    def validate(self) -> None:
        if self.kind not in ("conv", "block"):
            raise ConfigError(f"block {self.name}: unknown kind {self.kind!r}")
        if self.K < 1 or self.c_out < 1 or self.stride < 1 or self.dilation < 1:
            raise ConfigError(f"block {self.name}: K, c_out, stride, dilation must be >= 1")
        if self.repeats_within < 1 or self.block_repeats < 1:
            raise ConfigError(f"block {self.name}: repeat counts must be >= 1")
        if self.K == 1 and self.dilation > 1:
            warnings.warn(
                f"block {self.name}: dilation {self.dilation} has no effect at K=1",
                stacklevel=2)


@dataclass
class ModelConfig:
    """Full architecture: encoder stack, decoder head, discriminator widths."""

    input_channels: int
    encoder_blocks: list[BlockConfig]
    decoder_block: BlockConfig
    disc_hidden: list[int] = field(default_factory=lambda: [512, 1024, 1024])
    disc_dropout: float = 0.2
    n_accents: int = 7

    def validate(self) -> None:
        if self.input_channels < 1:
            raise ConfigError("input_channels must be >= 1")
        if not self.encoder_blocks:
            raise ConfigError("encoder needs at least one block")
        for i, blk in enumerate(self.encoder_blocks):
            blk.validate()
            if i > 0 and blk.stride > 1:
                raise ConfigError(
                    f"block {blk.name}: only the first conv may have stride > 1")
        self.decoder_block.validate()
        if self.decoder_block.stride > 1:
            raise ConfigError("decoder block must not stride")
        if self.decoder_block.c_out < 2:
            raise ConfigError("decoder needs at least one label plus blank")
        if not self.disc_hidden:
            raise ConfigError("disc_hidden must not be empty")
        if any(h < 1 for h in self.disc_hidden):
            raise ConfigError("disc_hidden sizes must be >= 1")
        if not 0 <= self.disc_dropout < 1:
            raise ConfigError("disc_dropout must be in [0, 1)")
        if self.n_accents < 1:
            raise ConfigError("n_accents must be >= 1")

    @property
    def encoder_out_channels(self) -> int:
        return self.encoder_blocks[-1].c_out

    @property
    def n_labels(self) -> int:
        """Label count excluding blank."""
        return self.decoder_block.c_out - 1


def mini_config(n_labels: int = 8, n_accents: int = 7,
                input_channels: int = 16) -> ModelConfig:
    """Desk-scale default: one B-block, narrow channels, tiny discriminator."""
    return ModelConfig(
        input_channels=input_channels,
        encoder_blocks=[
            BlockConfig("C1", "conv", K=5, c_out=32, stride=2),
            BlockConfig("B1", "block", K=5, c_out=32, repeats_within=2, block_repeats=1),
            BlockConfig("C2", "conv", K=5, c_out=32),
            BlockConfig("C3", "conv", K=1, c_out=64),
        ],
        decoder_block=BlockConfig("C4", "conv", K=1, c_out=n_labels + 1, dilation=2),
        disc_hidden=[32, 64, 64],
        disc_dropout=0.2,
        n_accents=n_accents,
    )


def quartznet15x5_config(n_labels: int = 8, n_accents: int = 7,
                         input_channels: int = 16) -> ModelConfig:
    """Canonical full-size block table (15 B-blocks of 5 groups each)."""
    return ModelConfig(
        input_channels=input_channels,
        encoder_blocks=[
            BlockConfig("C1", "conv", K=33, c_out=256, stride=2),
            BlockConfig("B1", "block", K=33, c_out=256, repeats_within=5, block_repeats=3),
            BlockConfig("B2", "block", K=39, c_out=256, repeats_within=5, block_repeats=3),
            BlockConfig("B3", "block", K=51, c_out=512, repeats_within=5, block_repeats=3),
            BlockConfig("B4", "block", K=63, c_out=512, repeats_within=5, block_repeats=3),
            BlockConfig("B5", "block", K=75, c_out=512, repeats_within=5, block_repeats=3),
            BlockConfig("C2", "conv", K=87, c_out=512),
            BlockConfig("C3", "conv", K=1, c_out=1024),
        ],
        decoder_block=BlockConfig("C4", "conv", K=1, c_out=n_labels + 1, dilation=2),
        disc_hidden=[512, 1024, 1024],
        disc_dropout=0.2,
        n_accents=n_accents,
    )


def block_config_to_dict(blk: BlockConfig) -> dict:
    return {"name": blk.name, "kind": blk.kind, "K": blk.K, "c_out": blk.c_out,
            "repeats_within": blk.repeats_within, "block_repeats": blk.block_repeats,
            "stride": blk.stride, "dilation": blk.dilation}


def block_config_from_dict(doc: dict) -> BlockConfig:
    return BlockConfig(
        name=doc["name"], kind=doc["kind"], K=doc["K"], c_out=doc["c_out"],
        repeats_within=doc.get("repeats_within", 1),
        block_repeats=doc.get("block_repeats", 1),
        stride=doc.get("stride", 1), dilation=doc.get("dilation", 1))


def model_config_to_dict(cfg: ModelConfig) -> dict:
    return {
        "input_channels": cfg.input_channels,
        "encoder_blocks": [block_config_to_dict(b) for b in cfg.encoder_blocks],
        "decoder_block": block_config_to_dict(cfg.decoder_block),
        "disc_hidden": list(cfg.disc_hidden),
        "disc_dropout": cfg.disc_dropout,
        "n_accents": cfg.n_accents,
    }


def model_config_from_dict(doc: dict) -> ModelConfig:
    return ModelConfig(
        input_channels=doc["input_channels"],
        encoder_blocks=[block_config_from_dict(b) for b in doc["encoder_blocks"]],
        decoder_block=block_config_from_dict(doc["decoder_block"]),
        disc_hidden=list(doc["disc_hidden"]),
        disc_dropout=doc["disc_dropout"],
        n_accents=doc["n_accents"],
    )


@dataclass
class ModelParams:
    """Disjoint named parameter collections for encoder, decoder, discriminator."""

    config: ModelConfig
    encoder: dict[str, Parameter]
    decoder: dict[str, Parameter]
    discriminator: dict[str, Parameter]

    def all_params(self) -> dict[str, Parameter]:
        merged: dict[str, Parameter] = {}
        for coll in (self.encoder, self.decoder, self.discriminator):
            for name, p in coll.items():
                if name in merged:
                    raise InvalidArgument(f"duplicate parameter name {name!r}")
                merged[name] = p
        return merged

    def collections(self) -> dict[str, dict[str, Parameter]]:
        return {"encoder": self.encoder, "decoder": self.decoder,
                "discriminator": self.discriminator}

    def set_trainable(self, collection: str, flag: bool) -> None:
        for p in self.collections()[collection].values():
            if not p.name.endswith((".running_mean", ".running_var", ".count")):
                p.trainable = flag

    def digest(self, collection: str) -> bytes:
        """Byte-level fingerprint of one collection, for freeze checks."""
        import hashlib
        h = hashlib.sha256()
        for name in sorted(self.collections()[collection]):
            p = self.collections()[collection][name]
            h.update(name.encode())
            h.update(_contig(p.data).tobytes())
        return h.digest()


# -- construction -----------------------------------------------------------

def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
             dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class _Builder:
    def __init__(self, rng: np.random.Generator, dtype):
        self.rng = rng
        self.dtype = dtype
        self.params: dict[str, Parameter] = {}

    def add(self, name: str, data: np.ndarray, trainable: bool = True) -> Parameter:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = Parameter(name, Tensor(_contig(data)), trainable)
        self.params[name] = p
        return p

    def conv_unit(self, prefix: str, c_in: int, K: int, c_out: int) -> None:
        if K > 1:
            self.add(f"{prefix}.depthwise", _uniform(self.rng, (c_in, K), K, self.dtype))
        self.add(f"{prefix}.pointwise",
                 _uniform(self.rng, (c_out, c_in), c_in, self.dtype))
        self.add(f"{prefix}.bias", np.zeros(c_out, dtype=self.dtype))
        self.bn(f"{prefix}.bn", c_out)

    def bn(self, prefix: str, c: int) -> None:
        self.add(f"{prefix}.gamma", np.ones(c, dtype=self.dtype))
        self.add(f"{prefix}.beta", np.zeros(c, dtype=self.dtype))
        self.add(f"{prefix}.running_mean", np.zeros(c, dtype=self.dtype), trainable=False)
        self.add(f"{prefix}.running_var", np.ones(c, dtype=self.dtype), trainable=False)
        self.add(f"{prefix}.count", np.zeros((), dtype=self.dtype), trainable=False)

    def linear(self, prefix: str, d_in: int, d_out: int) -> None:
        self.add(f"{prefix}.weight", _uniform(self.rng, (d_out, d_in), d_in, self.dtype))
        self.add(f"{prefix}.bias", np.zeros(d_out, dtype=self.dtype))


def build_model(config: ModelConfig, rng: np.random.Generator,
                dtype=np.float32, include_discriminator: bool = True) -> ModelParams:
    """Initialize all parameter collections; deterministic given the generator.

    Conv and linear weights draw uniform(-1/sqrt(fan_in), +1/sqrt(fan_in));
    batchnorm starts at identity; biases start at zero.
    """
    config.validate()
    enc = _Builder(rng, dtype)
    c_in = config.input_channels
    for blk in config.encoder_blocks:
        prefix = f"encoder.{blk.name}"
        if blk.kind == "conv":
            enc.conv_unit(prefix, c_in, blk.K, blk.c_out)
            c_in = blk.c_out
        else:
            for r in range(blk.block_repeats):
                rep_in = c_in
                g_in = rep_in
                for g in range(blk.repeats_within):
                    enc.conv_unit(f"{prefix}.rep{r}.g{g}", g_in, blk.K, blk.c_out)
                    g_in = blk.c_out
                if rep_in != blk.c_out:
                    enc.add(f"{prefix}.rep{r}.shortcut",
                            _uniform(rng, (blk.c_out, rep_in), rep_in, dtype))
                c_in = blk.c_out

    dec = _Builder(rng, dtype)
    db = config.decoder_block
    dec.add(f"decoder.{db.name}.pointwise",
            _uniform(rng, (db.c_out, c_in), c_in, dtype))
    dec.add(f"decoder.{db.name}.bias", np.zeros(db.c_out, dtype=dtype))

    disc = _Builder(rng, dtype)
    if include_discriminator:
        d_in = config.encoder_out_channels
        for i, width in enumerate(config.disc_hidden):
            disc.linear(f"disc.l{i}", d_in, width)
            d_in = width
        disc.linear("disc.out", d_in, config.n_accents)

    return ModelParams(config, enc.params, dec.params, disc.params)


# -- forward passes -----------------------------------------------------------

def _bn_state(params: dict[str, Parameter], prefix: str) -> BatchNormState:
    return BatchNormState(
        running_mean=params[f"{prefix}.running_mean"],
        running_var=params[f"{prefix}.running_var"],
        count=params[f"{prefix}.count"],
    )


def _conv_unit_forward(params: dict[str, Parameter], prefix: str, x: Tensor,
                       K: int, stride: int, dilation: int, mode: str,
                       apply_relu: bool = True) -> Tensor:
    tape = x.tape
    h = x
    if K > 1:
        dw = tape.watch(params[f"{prefix}.depthwise"])
        h = ad.conv1d(h, dw, "depthwise", stride=stride, dilation=dilation)
        stride = 1
    pw = tape.watch(params[f"{prefix}.pointwise"])
    h = ad.conv1d(h, pw, "pointwise", stride=stride)
    h = ad.bias_add(h, tape.watch(params[f"{prefix}.bias"]))
    h = ad.batchnorm1d(h, tape.watch(params[f"{prefix}.bn.gamma"]),
                       tape.watch(params[f"{prefix}.bn.beta"]),
                       _bn_state(params, f"{prefix}.bn"), mode)
    return ad.relu(h) if apply_relu else h


def encoder_forward(params: ModelParams, x: Tensor, mode: str) -> Tensor:
    """Run the encoder stack; output is the C3 feature map [C, ceil(T/2)]."""
    cfg = params.config
    if x.data.ndim != 2 or x.shape[0] != cfg.input_channels:
        raise InvalidArgument(
            f"encoder input must be [{cfg.input_channels}, T], got {x.shape}")
    if x.shape[1] < 1:
        raise InvalidArgument("encoder input needs at least one frame")
    tape = x.tape
    h = x
    for blk in cfg.encoder_blocks:
        prefix = f"encoder.{blk.name}"
        if blk.kind == "conv":
            h = _conv_unit_forward(params.encoder, prefix, h, blk.K,
                                   blk.stride, blk.dilation, mode)
        else:
            for r in range(blk.block_repeats):
                rep_in = h
                g = h
                for gi in range(blk.repeats_within):
                    last = gi == blk.repeats_within - 1
                    g = _conv_unit_forward(params.encoder, f"{prefix}.rep{r}.g{gi}",
                                           g, blk.K, 1, blk.dilation, mode,
                                           apply_relu=not last)
                short_name = f"{prefix}.rep{r}.shortcut"
                if short_name in params.encoder:
                    proj = tape.watch(params.encoder[short_name])
                    shortcut = ad.conv1d(rep_in, proj, "pointwise")
                else:
                    shortcut = rep_in
                h = ad.relu(ad.add(g, shortcut))
    return h


def decoder_forward(params: ModelParams, f: Tensor) -> Tensor:
    """Pointwise conv head + per-frame log-softmax; returns [T', V+1]."""
    cfg = params.config
    tape = f.tape
    name = cfg.decoder_block.name
    pw = tape.watch(params.decoder[f"decoder.{name}.pointwise"])
    if f.shape[0] != pw.shape[1]:
        raise InvalidArgument(
            f"decoder expects {pw.shape[1]} channels, got {f.shape[0]}")
    h = ad.conv1d(f, pw, "pointwise")
    h = ad.bias_add(h, tape.watch(params.decoder[f"decoder.{name}.bias"]))
    return ad.log_softmax(ad.transpose2d(h))


def grl_apply(x: Tensor, lam: float) -> Tensor:
    """Gradient reversal: identity forward, backward scaled by -lambda."""
    return ad.grad_scale(x, -lam)


def discriminator_head_forward(params: ModelParams, pooled: Tensor, mode: str,
                               rng: np.random.Generator | None = None) -> Tensor:
    """MLP accent classifier on a pooled feature vector; returns log-scores.

    First hidden layer is plain linear; each later hidden layer is
    linear -> ReLU -> dropout; the output layer ends in log-softmax.
    """
    cfg = params.config
    tape = pooled.tape
    h = pooled
    for i in range(len(cfg.disc_hidden)):
        w = tape.watch(params.discriminator[f"disc.l{i}.weight"])
        b = tape.watch(params.discriminator[f"disc.l{i}.bias"])
        h = ad.linear(h, w, b)
        if i > 0:
            h = ad.relu(h)
            h = ad.dropout(h, cfg.disc_dropout, mode, rng)
    w = tape.watch(params.discriminator["disc.out.weight"])
    b = tape.watch(params.discriminator["disc.out.bias"])
    return ad.log_softmax(ad.linear(h, w, b))


def discriminator_forward(params: ModelParams, f: Tensor, lam: float, mode: str,
                          rng: np.random.Generator | None = None) -> Tensor:
    """Accent log-scores from an encoder feature map, through the GRL."""
    if lam < 0:
        raise InvalidArgument("lambda must be >= 0")
    pooled = ad.mean_over_time(f)
    return discriminator_head_forward(params, grl_apply(pooled, lam), mode, rng)
