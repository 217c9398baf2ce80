"""Dense networks with hand-written backprop, Adam, cross-entropy and two-hot coding.

Everything here is float64 and deterministic. Weights are stored as
``(out, in)`` matrices so a layer computes ``x @ W.T + b`` on row batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity", "simnorm")


class StaleCacheError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"


class Mlp:
    """A stack of affine layers, each followed by an activation."""

    def __init__(self, layers: Sequence[Layer], simnorm_group: int = 8):
        layers = list(layers)
        if not layers:
            raise ValueError("an Mlp needs at least one layer")
        for i, layer in enumerate(layers):
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
            out_dim, in_dim = layer.weight.shape
            if layer.bias.shape != (out_dim,):
                raise ValueError(f"layer {i}: bias shape {layer.bias.shape} != ({out_dim},)")
            if i and in_dim != layers[i - 1].weight.shape[0]:
                raise ValueError(f"layer {i}: input width {in_dim} does not chain")
            if layer.activation == "simnorm" and out_dim % simnorm_group:
                raise ValueError(f"simnorm group {simnorm_group} does not divide width {out_dim}")
        self.layers = layers
        self.simnorm_group = simnorm_group
        self.version = 0

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator, hidden: str = "relu",
             output: str = "identity", simnorm_group: int = 8) -> "Mlp":
        """Uniform fan-in initialisation, zero biases."""
        layers = []
        n = len(sizes) - 1
        for i in range(n):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            act = output if i == n - 1 else hidden
            layers.append(Layer(w, np.zeros(fan_out), act))
        return cls(layers, simnorm_group)

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def copy(self) -> "Mlp":
        layers = [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        return Mlp(layers, self.simnorm_group)

    def load_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        mine = self.arrays()
        if len(arrays) != len(mine):
            raise ValueError("array count mismatch")
        for dst, src in zip(mine, arrays):
            if dst.shape != np.shape(src):
                raise ValueError(f"shape mismatch {dst.shape} vs {np.shape(src)}")
            dst[...] = src
        self.version += 1

    def zero_grads(self) -> list[np.ndarray]:
        return [np.zeros_like(a) for a in self.arrays()]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return mlp_apply(self, x)


def simnorm(x: np.ndarray, group: int) -> np.ndarray:
    """Softmax inside consecutive groups of ``group`` features."""
    shape = x.shape
    g = x.reshape(shape[:-1] + (shape[-1] // group, group))
    g = g - g.max(axis=-1, keepdims=True)
    e = np.exp(g)
    e /= e.sum(axis=-1, keepdims=True)
    return e.reshape(shape)


def _activate(pre: np.ndarray, act: str, group: int) -> np.ndarray:
    if act == "relu":
        return np.maximum(pre, 0.0)
    if act == "tanh":
        return np.tanh(pre)
    if act == "simnorm":
        return simnorm(pre, group)
    return pre


def _as_batch(params: Mlp, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ValueError(f"expected input width {params.in_dim}, got shape {x.shape}")
    return x, single


def mlp_apply(params: Mlp, x: np.ndarray) -> np.ndarray:
    """Forward pass without keeping a cache."""
    h, single = _as_batch(params, x)
    g = params.simnorm_group
    for layer in params.layers:
        h = _activate(h @ layer.weight.T + layer.bias, layer.activation, g)
    return h[0] if single else h


@dataclass
class MlpCache:
    params: Mlp
    version: int
    single: bool
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)


def mlp_forward(params: Mlp, x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    h, single = _as_batch(params, x)
    cache = MlpCache(params, params.version, single)
    g = params.simnorm_group
    for layer in params.layers:
        cache.inputs.append(h)
        h = _activate(h @ layer.weight.T + layer.bias, layer.activation, g)
        cache.outputs.append(h)
    return (h[0] if single else h), cache


def mlp_backward(params: Mlp, cache: MlpCache, grad_output: np.ndarray,
                 param_grads: bool = True) -> tuple[list[np.ndarray] | None, np.ndarray]:
    """Gradients of ``sum(output * grad_output)`` w.r.t. parameters and input.

    Parameter gradients come back in ``params.arrays()`` order. With
    ``param_grads=False`` only the input gradient is computed.
    """
    if cache.params is not params or cache.version != params.version:
        raise StaleCacheError("cache does not belong to this parameter state")
    g = np.asarray(grad_output, dtype=np.float64)
    if cache.single:
        g = g[None, :]
    if g.shape != cache.outputs[-1].shape:
        raise ValueError(f"grad_output shape {g.shape} != output shape {cache.outputs[-1].shape}")
    grads: list[np.ndarray] = [None] * (2 * len(params.layers))  # type: ignore[list-item]
    group = params.simnorm_group
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        y = cache.outputs[i]
        if layer.activation == "relu":
            g = g * (y > 0.0)
        elif layer.activation == "tanh":
            g = g * (1.0 - y * y)
        elif layer.activation == "simnorm":
            shape = y.shape
            yg = y.reshape(shape[:-1] + (shape[-1] // group, group))
            gg = g.reshape(yg.shape)
            g = (yg * (gg - (gg * yg).sum(axis=-1, keepdims=True))).reshape(shape)
        if param_grads:
            grads[2 * i] = g.T @ cache.inputs[i]
            grads[2 * i + 1] = g.sum(axis=0)
        g = g @ layer.weight
    gx = g[0] if cache.single else g
    return (grads if param_grads else None), gx


# --------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float | None = None
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0


def adam_init(params: Sequence[np.ndarray], lr: float, weight_decay: float = 0.0,
              grad_clip: float | None = None, **kw) -> AdamState:
    return AdamState(lr=lr, weight_decay=weight_decay, grad_clip=grad_clip,
                     m=[np.zeros_like(p) for p in params],
                     v=[np.zeros_like(p) for p in params], **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> float:
    """In-place bias-corrected Adam with decoupled weight decay.

    Returns the global gradient norm (before clipping). Raises
    NonFiniteGradientError without touching anything if a gradient is not finite.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    sq = 0.0
    for p, gr in zip(params, grads):
        if p.shape != gr.shape:
            raise ValueError(f"gradient shape {gr.shape} != parameter shape {p.shape}")
        s = float(np.vdot(gr, gr))
        sq += s
    norm = float(np.sqrt(sq))
    if not np.isfinite(norm):
        raise NonFiniteGradientError("non-finite gradient; step rejected")
    scale = 1.0
    if state.grad_clip is not None and norm > state.grad_clip:
        scale = state.grad_clip / (norm + 1e-12)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, gr, m, v in zip(params, grads, state.m, state.v):
        if scale != 1.0:
            gr = gr * scale
        m *= b1
        m += (1.0 - b1) * gr
        v *= b2
        v += (1.0 - b2) * gr * gr
        upd = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            upd = upd + state.weight_decay * p
        p -= state.lr * upd
    return norm


class Adam:
    """Adam over a fixed list of networks; bumps their versions after each step."""

    def __init__(self, nets: Sequence[Mlp], lr: float, weight_decay: float = 0.0,
                 grad_clip: float | None = None):
        self.nets = list(nets)
        self.state = adam_init(self._arrays(), lr, weight_decay, grad_clip)

    def _arrays(self) -> list[np.ndarray]:
        return [a for net in self.nets for a in net.arrays()]

    def step(self, grads: Sequence[Sequence[np.ndarray]]) -> float:
        flat = [g for net_grads in grads for g in net_grads]
        norm = adam_step(self._arrays(), flat, self.state)
        for net in self.nets:
            net.version += 1
        return norm


# ------------------------------------------------------ losses and coding


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: np.ndarray, target_probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row ``-sum(target * log_softmax(logits))`` and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    target_probs = np.asarray(target_probs, dtype=np.float64)
    if logits.shape != target_probs.shape:
        raise ValueError("logits and targets differ in shape")
    if np.any(target_probs < 0) or np.any(np.abs(target_probs.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("target_probs is not a probability distribution")
    ls = log_softmax(logits)
    loss = -(target_probs * ls).sum(axis=-1)
    return loss, np.exp(ls) - target_probs


@dataclass(frozen=True)
class ValueBins:
    v_min: float = -10.0
    v_max: float = 10.0
    num_bins: int = 101

    def __post_init__(self):
        if not self.v_min < self.v_max:
            raise ValueError("v_min must be below v_max")
        if self.num_bins < 2:
            raise ValueError("need at least two bins")

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(self.v_min, self.v_max, self.num_bins)

    @property
    def width(self) -> float:
        return (self.v_max - self.v_min) / (self.num_bins - 1)


def two_hot_encode(value, bins: ValueBins) -> np.ndarray:
    """Linear interpolation weights on the two bins bracketing ``value`` (clamped)."""
    v = np.clip(np.asarray(value, dtype=np.float64), bins.v_min, bins.v_max)
    pos = (v - bins.v_min) / bins.width
    lo = np.clip(np.floor(pos).astype(np.int64), 0, bins.num_bins - 2)
    w_hi = pos - lo
    out = np.zeros(v.shape + (bins.num_bins,))
    np.put_along_axis(out, lo[..., None], (1.0 - w_hi)[..., None], axis=-1)
    np.put_along_axis(out, (lo + 1)[..., None], w_hi[..., None], axis=-1)
    return out


def two_hot_decode(probs: np.ndarray, bins: ValueBins) -> np.ndarray:
    return np.asarray(probs, dtype=np.float64) @ bins.centers


def symlog(x):
    return np.sign(x) * np.log1p(np.abs(x))


def symexp(x):
    return np.sign(x) * np.expm1(np.abs(x))
