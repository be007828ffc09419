"""Reverse-mode automatic differentiation on numpy buffers.

A Tape records every operation in forward order; the backward pass replays
the records in exact reverse order with a fixed accumulation order, so
gradients are bit-for-bit reproducible. Tensors are row-major numpy arrays
(float32 for training, float64 for verification). A tape and its tensors
belong to one thread; independent tapes may run concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgument, StateError

DTYPES = {"f32": np.float32, "f64": np.float64}


def _contig(arr: np.ndarray, dtype=None) -> np.ndarray:
    """C-contiguous view/copy that keeps 0-d arrays 0-d (unlike
    np.ascontiguousarray, which promotes them to shape (1,))."""
    out = np.asarray(arr, dtype=dtype)
    if out.ndim and not out.flags["C_CONTIGUOUS"]:
        out = np.ascontiguousarray(out)
    return out


class Tensor:
    """N-dimensional array participating in a tape's forward record.

    `data` is always C-contiguous with the last axis contiguous; this layout
    is part of the public contract (feature files and checkpoints rely on it).
    `node_id` is None for tensors detached from any tape.
    """

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data: np.ndarray, tape: "Tape | None" = None,
                 node_id: int | None = None):
        self.data = data
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, node={self.node_id})"


@dataclass
class Parameter:
    """Named, persistent tensor buffer owned by a model.

    Names are hierarchical ("encoder.B1.rep0.g0.depthwise") and unique within
    a model. Non-trainable parameters never receive gradients and are never
    touched by optimizers.
    """

    name: str
    tensor: Tensor
    trainable: bool = True

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        self.tensor.data = value


class Tape:
    """Ordered operation record plus gradient buffers keyed by node id."""

    def __init__(self):
        self._records: list[tuple[int | None, tuple[int | None, ...], Callable]] = []
        self._arrays: dict[int, np.ndarray] = {}
        self._next_id = 0
        self._params: dict[int, Parameter] = {}       # node_id -> Parameter
        self._watch_cache: dict[int, int] = {}        # id(Parameter) -> node_id
        self._grads: dict[int, np.ndarray] = {}

    # -- construction -----------------------------------------------------

    def _register(self, data: np.ndarray) -> Tensor:
        nid = self._next_id
        self._next_id += 1
        self._arrays[nid] = data
        return Tensor(data, self, nid)

    def tensor(self, data, dtype=None) -> Tensor:
        """Create a leaf tensor (constant input) on this tape."""
        arr = _contig(data, dtype=dtype)
        return self._register(arr)

    def watch(self, param: Parameter) -> Tensor:
        """Register a parameter as a leaf; idempotent per parameter object."""
        key = id(param)
        if key in self._watch_cache:
            nid = self._watch_cache[key]
            return Tensor(self._arrays[nid], self, nid)
        leaf = self._register(param.tensor.data)
        self._params[leaf.node_id] = param
        self._watch_cache[key] = leaf.node_id
        return leaf

    def record(self, out_data: np.ndarray,
               inputs: Sequence[Tensor],
               backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
        """Record an operation. `backward(g)` returns one gradient
        contribution per input (None to skip an input)."""
        out = self._register(out_data)
        ids = tuple(t.node_id for t in inputs)
        self._records.append((out.node_id, ids, backward))
        return out

    # -- backward ---------------------------------------------------------

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Backpropagate from a scalar loss.

        Returns the gradient for every trainable watched parameter; parameters
        unreachable from the loss map to zeros. Traversal order is the exact
        reverse of forward recording order, so repeated calls produce
        bit-identical buffers.
        """
        if loss.tape is not self:
            raise InvalidArgument("loss tensor does not belong to this tape")
        if loss.data.size != 1:
            raise InvalidArgument(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {
            loss.node_id: np.ones_like(loss.data)
        }
        for out_id, input_ids, bwd in reversed(self._records):
            g = grads.get(out_id)
            if g is None:
                continue
            contribs = bwd(g)
            for iid, c in zip(input_ids, contribs):
                if iid is None or c is None:
                    continue
                buf = grads.get(iid)
                if buf is None:
                    buf = np.zeros_like(self._arrays[iid])
                    grads[iid] = buf
                buf += c
        self._grads = grads
        out: dict[str, np.ndarray] = {}
        for nid, param in self._params.items():
            if not param.trainable:
                continue
            g = grads.get(nid)
            out[param.name] = g if g is not None else np.zeros_like(param.data)
        return out

    def grad(self, tensor: Tensor) -> np.ndarray:
        """Gradient of the last backward() w.r.t. any tensor on this tape."""
        if tensor.tape is not self:
            raise InvalidArgument("tensor does not belong to this tape")
        g = self._grads.get(tensor.node_id)
        return g if g is not None else np.zeros_like(tensor.data)


def _same_tape(*tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise InvalidArgument("operands recorded on different tapes")
    if tape is None:
        raise InvalidArgument("operands are not attached to a tape")
    return tape


# -- convolution ----------------------------------------------------------

def _same_pad(T: int, K: int, stride: int, dilation: int) -> tuple[int, int, int]:
    """'Same' padding bookkeeping: output length is ceil(T / stride)."""
    t_out = -(-T // stride)
    eff = (K - 1) * dilation + 1
    total = max(0, (t_out - 1) * stride + eff - T)
    left = total // 2
    return t_out, left, total - left


def conv1d(x: Tensor, kernel: Tensor, mode: str, stride: int = 1,
           dilation: int = 1) -> Tensor:
    """1-D convolution over [C, T] with 'same' zero padding.

    depthwise: kernel [C, K], each channel filtered independently.
    pointwise: kernel [C_out, C_in] (K = 1), pure channel mixing.
    """
    tape = _same_tape(x, kernel)
    if x.data.ndim != 2:
        raise InvalidArgument(f"conv1d input must be [C, T], got shape {x.shape} (axis count)")
    if stride < 1 or dilation < 1:
        raise InvalidArgument("stride and dilation must be >= 1")
    C, T = x.shape

    if mode == "depthwise":
        if kernel.data.ndim != 2 or kernel.shape[0] != C:
            raise InvalidArgument(
                f"depthwise kernel must be [C_in={C}, K], got {kernel.shape} (axis 0)")
        K = kernel.shape[1]
        t_out, pad_l, pad_r = _same_pad(T, K, stride, dilation)
        xp = np.pad(x.data, ((0, 0), (pad_l, pad_r)))
        span = (t_out - 1) * stride + 1
        out = np.zeros((C, t_out), dtype=x.data.dtype)
        kd = kernel.data
        for k in range(K):
            out += kd[:, k:k + 1] * xp[:, k * dilation:k * dilation + span:stride]

        def bwd(g: np.ndarray):
            dxp = np.zeros_like(xp)
            dk = np.zeros_like(kd)
            for k in range(K):
                sl = slice(k * dilation, k * dilation + span, stride)
                dk[:, k] = (g * xp[:, sl]).sum(axis=1)
                dxp[:, sl] += kd[:, k:k + 1] * g
            dx = dxp[:, pad_l:pad_l + T]
            return _contig(dx), dk

        return tape.record(out, (x, kernel), bwd)

    if mode == "pointwise":
        if kernel.data.ndim != 2 or kernel.shape[1] != C:
            raise InvalidArgument(
                f"pointwise kernel must be [C_out, C_in={C}], got {kernel.shape} (axis 1)")
        xs = x.data[:, ::stride]
        out = kernel.data @ xs
        w = kernel.data

        def bwd(g: np.ndarray):
            dxs = w.T @ g
            dk = g @ xs.T
            if stride == 1:
                dx = dxs
            else:
                dx = np.zeros_like(x.data)
                dx[:, ::stride] = dxs
            return _contig(dx), dk

        return tape.record(_contig(out), (x, kernel), bwd)

    raise InvalidArgument(f"unknown conv1d mode {mode!r}")


# -- batch normalization ---------------------------------------------------

@dataclass
class BatchNormState:
    """Running statistics backing one batchnorm layer.

    The buffers are plain non-trainable parameters so checkpoints capture
    them; `count` doubles as the initialization marker (0 = never trained).
    """

    running_mean: Parameter
    running_var: Parameter
    count: Parameter  # scalar number of train-mode updates

    @property
    def initialized(self) -> bool:
        return float(self.count.data) > 0


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                mode: str, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Per-channel normalization of [C, T] over the time axis.

    Train mode normalizes with batch statistics and folds them into the
    running buffers; eval mode uses the running statistics verbatim.
    """
    tape = _same_tape(x, gamma, beta)
    if x.data.ndim != 2:
        raise InvalidArgument(f"batchnorm1d input must be [C, T], got {x.shape}")
    C, T = x.shape
    if mode == "train":
        mu = x.data.mean(axis=1)
        var = x.data.var(axis=1)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu[:, None]) * inv[:, None]
        # side-effect outside the tape: statistics are state, not graph
        state.running_mean.data = ((1 - momentum) * state.running_mean.data
                                   + momentum * mu.astype(state.running_mean.data.dtype))
        state.running_var.data = ((1 - momentum) * state.running_var.data
                                  + momentum * var.astype(state.running_var.data.dtype))
        state.count.data = state.count.data + 1

        out = gamma.data[:, None] * xhat + beta.data[:, None]
        gval = gamma.data

        def bwd(g: np.ndarray):
            dgamma = (g * xhat).sum(axis=1)
            dbeta = g.sum(axis=1)
            gm = g.mean(axis=1, keepdims=True)
            gxm = (g * xhat).mean(axis=1, keepdims=True)
            dx = (gval * inv)[:, None] * (g - gm - xhat * gxm)
            return _contig(dx), dgamma, dbeta

        return tape.record(_contig(out), (x, gamma, beta), bwd)

    if mode == "eval":
        if not state.initialized:
            raise StateError("batchnorm eval mode before any train-mode update")
        inv = 1.0 / np.sqrt(state.running_var.data + eps)
        xhat = (x.data - state.running_mean.data[:, None]) * inv[:, None]
        out = gamma.data[:, None] * xhat + beta.data[:, None]
        gval = gamma.data

        def bwd(g: np.ndarray):
            dgamma = (g * xhat).sum(axis=1)
            dbeta = g.sum(axis=1)
            dx = (gval * inv)[:, None] * g
            return _contig(dx), dgamma, dbeta

        return tape.record(_contig(out), (x, gamma, beta), bwd)

    raise InvalidArgument(f"unknown batchnorm mode {mode!r}")


# -- dense / elementwise ----------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map weight @ x + bias for a 1-D input vector."""
    tape = _same_tape(x, weight, bias)
    if x.data.ndim != 1:
        raise InvalidArgument(f"linear input must be 1-D, got {x.shape}")
    d_out, d_in = weight.shape
    if d_in != x.shape[0]:
        raise InvalidArgument(f"linear weight columns {d_in} != input size {x.shape[0]}")
    if bias.shape != (d_out,):
        raise InvalidArgument(f"linear bias shape {bias.shape} != ({d_out},)")
    out = weight.data @ x.data + bias.data
    w = weight.data
    xv = x.data

    def bwd(g: np.ndarray):
        return w.T @ g, np.outer(g, xv), g.copy()

    return tape.record(out, (x, weight, bias), bwd)


def relu(x: Tensor) -> Tensor:
    """max(0, x); subgradient at 0 is 0."""
    tape = _same_tape(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0)

    def bwd(g: np.ndarray):
        return (g * mask,)

    return tape.record(_contig(out.astype(x.data.dtype)), (x,), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    tape = _same_tape(a, b)
    if a.shape != b.shape:
        raise InvalidArgument(f"add shape mismatch {a.shape} vs {b.shape}")
    out = a.data + b.data

    def bwd(g: np.ndarray):
        return g.copy(), g.copy()

    return tape.record(out, (a, b), bwd)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias [C] to a [C, T] map."""
    tape = _same_tape(x, b)
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[0] != b.shape[0]:
        raise InvalidArgument(f"bias_add shapes {x.shape} and {b.shape} do not conform")
    out = x.data + b.data[:, None]

    def bwd(g: np.ndarray):
        return g.copy(), g.sum(axis=1)

    return tape.record(out, (x, b), bwd)


def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Eval mode is the identity; the mask is drawn from the supplied generator
    only, so caller-controlled seeding keeps training reproducible.
    """
    tape = _same_tape(x)
    if not 0 <= p < 1:
        raise InvalidArgument(f"dropout probability must be in [0, 1), got {p}")
    if mode == "eval" or p == 0:
        def bwd_id(g: np.ndarray):
            return (g.copy(),)
        return tape.record(x.data, (x,), bwd_id)
    if mode != "train":
        raise InvalidArgument(f"unknown dropout mode {mode!r}")
    keep = (rng.random(x.shape) >= p)
    scale_v = 1.0 / (1.0 - p)
    out = np.where(keep, x.data * scale_v, 0).astype(x.data.dtype)

    def bwd(g: np.ndarray):
        return (np.where(keep, g * scale_v, 0).astype(g.dtype),)

    return tape.record(_contig(out), (x,), bwd)


def mean_over_time(x: Tensor) -> Tensor:
    """Per-channel mean of [C, T] over the time axis."""
    tape = _same_tape(x)
    if x.data.ndim != 2:
        raise InvalidArgument(f"mean_over_time input must be [C, T], got {x.shape}")
    C, T = x.shape
    if T < 1:
        raise InvalidArgument("mean_over_time requires T >= 1")
    out = x.data.mean(axis=1)

    def bwd(g: np.ndarray):
        return (np.repeat(g[:, None] / T, T, axis=1),)

    return tape.record(out, (x,), bwd)


def log_softmax(x: Tensor) -> Tensor:
    """x - logsumexp(x) along the last axis, max-subtracted for safety."""
    tape = _same_tape(x)
    if x.shape[-1] < 1:
        raise InvalidArgument("log_softmax needs at least one class")
    m = x.data.max(axis=-1, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def bwd(g: np.ndarray):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return tape.record(_contig(out), (x,), bwd)


def transpose2d(x: Tensor) -> Tensor:
    """Swap the two axes of a 2-D tensor."""
    tape = _same_tape(x)
    if x.data.ndim != 2:
        raise InvalidArgument(f"transpose2d input must be 2-D, got {x.shape}")
    out = _contig(x.data.T)

    def bwd(g: np.ndarray):
        return (_contig(g.T),)

    return tape.record(out, (x,), bwd)


# -- scalar plumbing --------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements, as a 0-d scalar."""
    tape = _same_tape(x)
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def bwd(g: np.ndarray):
        return (np.full_like(x.data, float(g)),)

    return tape.record(out, (x,), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a constant (constant receives no gradient)."""
    tape = _same_tape(x)

    def bwd(g: np.ndarray):
        return (g * c,)

    return tape.record(_contig(x.data * c), (x,), bwd)


def add_scalars(xs: Sequence[Tensor]) -> Tensor:
    """Sum a list of scalar tensors into one scalar node."""
    if not xs:
        raise InvalidArgument("add_scalars needs at least one term")
    tape = _same_tape(*xs)
    total = np.asarray(sum(float(t.data) for t in xs), dtype=xs[0].data.dtype)

    def bwd(g: np.ndarray):
        return tuple(g.copy() for _ in xs)

    return tape.record(total, tuple(xs), bwd)


def nll(log_scores: Tensor, index: int) -> Tensor:
    """Negative log-likelihood of one class from a log-score vector."""
    tape = _same_tape(log_scores)
    if log_scores.data.ndim != 1:
        raise InvalidArgument(f"nll expects a 1-D score vector, got {log_scores.shape}")
    if not 0 <= index < log_scores.shape[0]:
        raise InvalidArgument(f"class index {index} outside [0, {log_scores.shape[0]})")
    out = np.asarray(-log_scores.data[index], dtype=log_scores.data.dtype)

    def bwd(g: np.ndarray):
        d = np.zeros_like(log_scores.data)
        d[index] = -float(g)
        return (d,)

    return tape.record(out, (log_scores,), bwd)


def grad_scale(x: Tensor, factor: float) -> Tensor:
    """Identity forward; backward multiplies the upstream gradient by factor."""
    tape = _same_tape(x)

    def bwd(g: np.ndarray):
        return (g * factor,)

    return tape.record(x.data, (x,), bwd)


def precomputed_loss(x: Tensor, value: float, grad_wrt_x: np.ndarray) -> Tensor:
    """Attach an externally computed scalar loss with a known gradient.

    Used to splice analytically differentiated losses (CTC) into the tape:
    backward routes upstream * grad_wrt_x into x.
    """
    tape = _same_tape(x)
    if grad_wrt_x.shape != x.shape:
        raise InvalidArgument(
            f"precomputed gradient shape {grad_wrt_x.shape} != input shape {x.shape}")
    out = np.asarray(value, dtype=x.data.dtype)
    gfix = _contig(grad_wrt_x, dtype=x.data.dtype)

    def bwd(g: np.ndarray):
        return (gfix * float(g),)

    return tape.record(out, (x,), bwd)


# -- verification -----------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], point: np.ndarray,
                      eps: float = 1e-6) -> float:
    """Max relative error between tape gradient and central differences.

    `f` maps a leaf tensor to a scalar tensor on the same tape and must be
    deterministic. Run at float64; relative error uses a
    max(|analytic|, |numeric|, 1e-12) denominator.
    """
    if eps <= 0:
        raise InvalidArgument("eps must be > 0")
    point = np.asarray(point, dtype=np.float64)
    tape = Tape()
    x = tape.tensor(point)
    loss = f(x)
    tape.backward(loss)
    analytic = tape.grad(x)

    def eval_at(arr: np.ndarray) -> float:
        t = Tape()
        return float(f(t.tensor(arr)).data)

    flat = point.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        hi = flat.copy()
        lo = flat.copy()
        hi[i] += eps
        lo[i] -= eps
        numeric[i] = (eval_at(hi.reshape(point.shape))
                      - eval_at(lo.reshape(point.shape))) / (2 * eps)
    numeric = numeric.reshape(point.shape)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))
