"""Numeric kernels: a small reverse-mode tape, the per-frame acoustic model,
feature masking, Adagrad and EMA parameter tracking.

The acoustic model is a feedforward net applied to a window of stacked
neighbouring frames (zero padded at the edges), so it maps a ``(T, d)`` feature
matrix to ``(T, V)`` logits with stride 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ConfigError(ValueError):
    """Raised for inconsistent shapes or hyper-parameters."""


# ---------------------------------------------------------------------------
# minimal reverse-mode engine
# ---------------------------------------------------------------------------


class Var:
    """A node on the tape: a value, its accumulated gradient and a backward rule."""

    __slots__ = ("value", "grad", "parents", "backward_fn")

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn

    def accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g


def leaf(value: np.ndarray) -> Var:
    return Var(value)


def matmul(a: Var, b: Var) -> Var:
    out = Var(a.value @ b.value, (a, b))

    def bw(g):
        a.accumulate(g @ b.value.T)
        b.accumulate(a.value.T @ g)

    out.backward_fn = bw
    return out


def add_bias(a: Var, b: Var) -> Var:
    out = Var(a.value + b.value, (a, b))

    def bw(g):
        a.accumulate(g)
        b.accumulate(g.sum(axis=0))

    out.backward_fn = bw
    return out


def tanh(a: Var) -> Var:
    y = np.tanh(a.value)
    out = Var(y, (a,))

    def bw(g):
        a.accumulate(g * (1.0 - y * y))

    out.backward_fn = bw
    return out


def scale_mask(a: Var, mask: np.ndarray) -> Var:
    """Elementwise product with a constant (used for dropout)."""
    out = Var(a.value * mask, (a,))

    def bw(g):
        a.accumulate(g * mask)

    out.backward_fn = bw
    return out


def backprop(root: Var, seed: np.ndarray) -> None:
    """Propagate ``seed`` (d root) through the tape in reverse topological order."""
    order: list[Var] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = seed.astype(np.float64, copy=True)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


# ---------------------------------------------------------------------------
# acoustic model
# ---------------------------------------------------------------------------


@dataclass
class ModelParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    context: int = 3
    dropout: float = 0.0

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ConfigError("weights and biases must be non-empty and paired")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ConfigError(f"layer {i}: bias shape {b.shape} does not match weight {w.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ConfigError(f"layer {i}: input width {w.shape[0]} != previous output")
        if not 0.0 <= self.dropout <= 1.0:
            raise ConfigError(f"dropout rate {self.dropout} outside [0, 1]")
        if self.context < 0:
            raise ConfigError("context must be >= 0")

    @property
    def feature_dim(self) -> int:
        return self.weights[0].shape[0] // (2 * self.context + 1)

    @property
    def vocab_size(self) -> int:
        return self.weights[-1].shape[1]

    def arrays(self) -> list[np.ndarray]:
        """Flat list of parameter arrays (weights then biases, layer by layer)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.context,
            self.dropout,
        )

    def with_arrays(self, arrays: list[np.ndarray]) -> "ModelParams":
        return ModelParams(list(arrays[0::2]), list(arrays[1::2]), self.context, self.dropout)


def init_params(
    feature_dim: int,
    vocab_size: int,
    hidden: int | list[int] = 64,
    context: int = 3,
    rng: np.random.Generator | None = None,
    dropout: float = 0.0,
) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    rng = rng if rng is not None else np.random.default_rng(0)
    widths = [hidden] if isinstance(hidden, int) else list(hidden)
    dims = [(2 * context + 1) * feature_dim, *widths, vocab_size]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelParams(weights, biases, context, dropout)


def stack_context(features: np.ndarray, context: int) -> np.ndarray:
    """(T, d) -> (T, (2c+1)d); frames outside the utterance are zeros."""
    T, d = features.shape
    if context == 0:
        return np.ascontiguousarray(features, dtype=np.float64)
    padded = np.zeros((T + 2 * context, d))
    padded[context : context + T] = features
    win = np.lib.stride_tricks.sliding_window_view(padded, (2 * context + 1, d))[:, 0]
    return win.reshape(T, (2 * context + 1) * d)


@dataclass
class Tape:
    inputs: list[Var]
    output: Var
    params: ModelParams = field(repr=False)


def _build(params: ModelParams, features: np.ndarray, train_mode: bool, rng) -> Tape:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ConfigError(f"features must be a non-empty (T, d) matrix, got {features.shape}")
    expect = params.weights[0].shape[0]
    if features.shape[1] * (2 * params.context + 1) != expect:
        raise ConfigError(
            f"feature dim {features.shape[1]} does not match first layer ({expect} inputs, context {params.context})"
        )
    leaves = [leaf(a) for a in params.arrays()]
    h = leaf(stack_context(features, params.context))
    n_layers = len(params.weights)
    rate = params.dropout if train_mode else 0.0
    for i in range(n_layers):
        h = add_bias(matmul(h, leaves[2 * i]), leaves[2 * i + 1])
        if i < n_layers - 1:
            h = tanh(h)
            if rate > 0.0:
                if rng is None:
                    raise ConfigError("train-mode dropout needs an rng")
                if rate >= 1.0:
                    mask = np.zeros_like(h.value)
                else:
                    mask = (rng.random(h.value.shape) >= rate) / (1.0 - rate)
                h = scale_mask(h, mask)
    return Tape(leaves, h, params)


def forward(
    params: ModelParams,
    features: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Logits of shape (T, V). Train mode applies dropout drawn from ``rng``."""
    return _build(params, features, train_mode, rng).output.value


def forward_tape(params, features, train_mode=False, rng=None) -> Tape:
    """Like :func:`forward` but keeps the tape for a later :func:`backward`."""
    return _build(params, features, train_mode, rng)


def backward(
    params: ModelParams,
    features: np.ndarray,
    d_logits: np.ndarray,
    tape: Tape | None = None,
) -> list[np.ndarray]:
    """Gradients w.r.t. ``params.arrays()`` given dLoss/dLogits.

    Without a tape the network is re-run in inference mode.
    """
    if tape is None:
        tape = _build(params, features, False, None)
    d_logits = np.asarray(d_logits, dtype=np.float64)
    if d_logits.shape != tape.output.value.shape:
        raise ConfigError(f"dLogits shape {d_logits.shape} != logits shape {tape.output.value.shape}")
    for v in tape.inputs:
        v.grad = None
    backprop(tape.output, d_logits)
    return [v.grad if v.grad is not None else np.zeros_like(v.value) for v in tape.inputs]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def augment(
    features: np.ndarray,
    time_mask_count: int,
    time_mask_width: int,
    feat_mask_count: int,
    feat_mask_width: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Zero out ``time_mask_count`` spans of frames and ``feat_mask_count`` bands
    of feature channels. Widths are fixed (clamped to the dimension); only the
    start positions are random. Time masks are drawn before feature masks.
    """
    out = np.array(features, dtype=np.float64, copy=True)
    T, d = out.shape
    for _ in range(time_mask_count):
        w = min(max(time_mask_width, 0), T)
        start = int(rng.integers(0, T - w + 1))
        out[start : start + w, :] = 0.0
    for _ in range(feat_mask_count):
        w = min(max(feat_mask_width, 0), d)
        start = int(rng.integers(0, d - w + 1))
        out[:, start : start + w] = 0.0
    return out


# ---------------------------------------------------------------------------
# optimizer and EMA
# ---------------------------------------------------------------------------


@dataclass
class AdagradState:
    accumulators: list[np.ndarray]
    lr: float = 0.05
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ModelParams, lr: float = 0.05, eps: float = 1e-8) -> "AdagradState":
        if lr <= 0 or eps < 0:
            raise ConfigError("Adagrad needs lr > 0 and eps >= 0")
        return cls([np.zeros_like(a) for a in params.arrays()], lr, eps)

    def copy(self) -> "AdagradState":
        return AdagradState([a.copy() for a in self.accumulators], self.lr, self.eps)


def adagrad_step(state: AdagradState, params: ModelParams, grads: list[np.ndarray], lr: float | None = None) -> ModelParams:
    """In-place Adagrad update of ``params`` and ``state``; returns ``params``."""
    arrays = params.arrays()
    if len(grads) != len(arrays):
        raise ConfigError("gradient list does not match parameter list")
    lr = state.lr if lr is None else lr
    for p, g, acc in zip(arrays, grads, state.accumulators):
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        acc += g * g
        denom = np.sqrt(acc) + state.eps
        # zero gradient on a zero accumulator must leave the parameter alone
        step = np.divide(g, denom, out=np.zeros_like(g), where=denom > 0)
        p -= lr * step
    return params


@dataclass
class EmaParams:
    shadow: ModelParams
    decay: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ConfigError(f"EMA decay {self.decay} outside [0, 1]")

    @classmethod
    def track(cls, params: ModelParams, decay: float) -> "EmaParams":
        return cls(params.copy(), decay)


def ema_update(ema: EmaParams, params: ModelParams) -> EmaParams:
    """shadow <- mu * shadow + (1 - mu) * params, in place."""
    mu = ema.decay
    for s, p in zip(ema.shadow.arrays(), params.arrays()):
        if s.shape != p.shape:
            raise ConfigError("EMA shadow shape mismatch")
        s *= mu
        s += (1.0 - mu) * p
    return ema


def save_params(params: ModelParams, path) -> None:
    arrays = {f"a{i}": a for i, a in enumerate(params.arrays())}
    np.savez(path, context=params.context, dropout=params.dropout, n=len(arrays), **arrays)


def load_params(path) -> ModelParams:
    with np.load(path) as f:
        arrays = [f[f"a{i}"] for i in range(int(f["n"]))]
        return ModelParams(arrays[0::2], arrays[1::2], int(f["context"]), float(f["dropout"]))
