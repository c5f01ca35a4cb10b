"""Minimal dense-network engine: a 3-layer MLP with exact backprop.

Two architectures only: in -> 256 -> 256 -> out with ReLU hidden units
(Q-networks and actors) or Tanh hidden units (critics).  Everything runs in
float64; forward passes capture the activations needed both for gradients
and for downstream embedding analysis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HIDDEN_DIM = 256

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")


@dataclass
class MlpNet:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    activation: str = "relu"  # relu | tanh

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w3.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "MlpNet":
        return MlpNet(
            *(getattr(self, n).copy() for n in PARAM_NAMES),
            activation=self.activation,
        )


def init_net(
    in_dim: int,
    out_dim: int,
    hidden_dim: int = HIDDEN_DIM,
    activation: str = "relu",
    seed: int = 0,
) -> MlpNet:
    """Uniform(-k, k) init with k = 1/sqrt(fan_in), seeded."""
    if activation not in ("relu", "tanh"):
        raise ValueError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)

    def layer(fan_in, fan_out):
        k = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-k, k, size=(fan_in, fan_out))
        b = rng.uniform(-k, k, size=fan_out)
        return w, b

    w1, b1 = layer(in_dim, hidden_dim)
    w2, b2 = layer(hidden_dim, hidden_dim)
    w3, b3 = layer(hidden_dim, out_dim)
    return MlpNet(w1, b1, w2, b2, w3, b3, activation=activation)


@dataclass
class ForwardTrace:
    """Input copy plus pre/post activations per layer; ``hidden`` is the
    post-activation of the second hidden layer (the embedding vector)."""

    x: np.ndarray
    z1: np.ndarray
    h1: np.ndarray
    z2: np.ndarray
    h2: np.ndarray
    output: np.ndarray

    @property
    def hidden(self) -> np.ndarray:
        return self.h2


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad(z: np.ndarray, h: np.ndarray, kind: str) -> np.ndarray:
    # ReLU subgradient at exactly 0 is defined as 0.
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    return 1.0 - h * h


def forward(net: MlpNet, x: np.ndarray) -> ForwardTrace:
    """Run the net on one input (1-D) or a batch (2-D, rows are inputs)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.in_dim:
        raise ValueError(f"input has dim {x.shape[-1]}, net expects {net.in_dim}")
    z1 = x @ net.w1 + net.b1
    h1 = _act(z1, net.activation)
    z2 = h1 @ net.w2 + net.b2
    h2 = _act(z2, net.activation)
    out = h2 @ net.w3 + net.b3
    return ForwardTrace(x=x.copy(), z1=z1, h1=h1, z2=z2, h2=h2, output=out)


def backward(
    net: MlpNet, trace: ForwardTrace, dout: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Backpropagate an output-gradient through the trace.

    Returns (parameter gradients, input gradient).  For a batch, parameter
    gradients are summed over rows and the input gradient keeps the batch
    shape.
    """
    dout = np.asarray(dout, dtype=np.float64)
    batched = trace.x.ndim == 2
    x = trace.x if batched else trace.x[None, :]
    h1 = trace.h1 if batched else trace.h1[None, :]
    h2 = trace.h2 if batched else trace.h2[None, :]
    z1 = trace.z1 if batched else trace.z1[None, :]
    z2 = trace.z2 if batched else trace.z2[None, :]
    d = dout if batched else dout[None, :]

    grads: dict[str, np.ndarray] = {}
    grads["w3"] = h2.T @ d
    grads["b3"] = d.sum(axis=0)
    dh2 = d @ net.w3.T
    dz2 = dh2 * _act_grad(z2, h2, net.activation)
    grads["w2"] = h1.T @ dz2
    grads["b2"] = dz2.sum(axis=0)
    dh1 = dz2 @ net.w2.T
    dz1 = dh1 * _act_grad(z1, h1, net.activation)
    grads["w1"] = x.T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    dx = dz1 @ net.w1.T
    return grads, (dx if batched else dx[0])


# ---------------------------------------------------------------------------
# Loss specifications for input gradients
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CrossEntropyToward:
    """Sum of per-segment cross-entropies against a target sub-action tuple.

    The output vector is split into segments by ``cardinalities``; each
    segment is treated as the logits of one sub-action.
    """

    cardinalities: tuple[int, ...]
    target: tuple[int, ...]


@dataclass(frozen=True)
class NegativeQ:
    """Minus the mean of the chosen-segment output values for a target
    action (the factored-head action value)."""

    cardinalities: tuple[int, ...]
    target: tuple[int, ...]


@dataclass(frozen=True)
class MaxOutput:
    """Mean of the per-segment maxima (the greedy action's value); with no
    cardinalities, just the maximum output component."""

    cardinalities: tuple[int, ...] | None = None


LossSpec = CrossEntropyToward | NegativeQ | MaxOutput


def segment_bounds(cardinalities) -> list[tuple[int, int]]:
    bounds = []
    start = 0
    for c in cardinalities:
        bounds.append((start, start + c))
        start += c
    return bounds


def _check_target(cardinalities, target) -> None:
    if len(target) != len(cardinalities):
        raise ValueError(
            f"target has {len(target)} sub-actions for {len(cardinalities)} segments"
        )
    for k, (t, c) in enumerate(zip(target, cardinalities)):
        if not (0 <= t < c):
            raise ValueError(f"target sub-action {t} out of range for segment {k} (cardinality {c})")


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def loss_output_gradient(output: np.ndarray, loss: LossSpec) -> tuple[float, np.ndarray]:
    """Scalar loss value and its gradient w.r.t. the output vector."""
    out = np.asarray(output, dtype=np.float64)
    if out.ndim != 1:
        raise ValueError("loss_output_gradient expects a single output vector")
    dout = np.zeros_like(out)

    if isinstance(loss, CrossEntropyToward):
        _check_target(loss.cardinalities, loss.target)
        total = 0.0
        for (a, b), t in zip(segment_bounds(loss.cardinalities), loss.target):
            p = softmax(out[a:b])
            total -= np.log(max(p[t], 1e-300))
            dout[a:b] = p
            dout[a + t] -= 1.0
        return float(total), dout

    if isinstance(loss, NegativeQ):
        _check_target(loss.cardinalities, loss.target)
        k = len(loss.cardinalities)
        total = 0.0
        for (a, _b), t in zip(segment_bounds(loss.cardinalities), loss.target):
            total -= out[a + t] / k
            dout[a + t] -= 1.0 / k
        return float(total), dout

    if isinstance(loss, MaxOutput):
        if loss.cardinalities is None:
            i = int(np.argmax(out))
            dout[i] = 1.0
            return float(out[i]), dout
        k = len(loss.cardinalities)
        total = 0.0
        for a, b in segment_bounds(loss.cardinalities):
            i = a + int(np.argmax(out[a:b]))
            total += out[i] / k
            dout[i] += 1.0 / k
        return float(total), dout

    raise TypeError(f"unknown loss spec {loss!r}")


def input_gradient(net: MlpNet, x: np.ndarray, loss: LossSpec) -> np.ndarray:
    """Exact gradient of the scalar loss w.r.t. the input vector."""
    trace = forward(net, x)
    if trace.output.ndim != 1:
        raise ValueError("input_gradient expects a single input vector")
    _, dout = loss_output_gradient(trace.output, loss)
    _, dx = backward(net, trace, dout)
    return dx


def batched_cross_entropy_input_gradients(
    net: MlpNet, xs: np.ndarray, cardinalities, target: tuple[int, ...]
) -> np.ndarray:
    """Input gradients of the summed-segment cross-entropy toward one target
    action, for a whole batch of observations at once."""
    _check_target(cardinalities, target)
    trace = forward(net, np.asarray(xs, dtype=np.float64))
    out = trace.output
    dout = np.zeros_like(out)
    for (a, b), t in zip(segment_bounds(cardinalities), target):
        p = softmax(out[:, a:b], axis=1)
        dout[:, a:b] = p
        dout[:, a + t] -= 1.0
    _, dx = backward(net, trace, dout)
    return dx


# ---------------------------------------------------------------------------
# Adam with gradient-norm clipping
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    learning_rate: float
    clip_norm: float
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def init_adam(net: MlpNet, learning_rate: float, clip_norm: float = 10.0) -> AdamState:
    zeros = {name: np.zeros_like(p) for name, p in net.params().items()}
    return AdamState(
        learning_rate=learning_rate,
        clip_norm=clip_norm,
        m={k: z.copy() for k, z in zeros.items()},
        v=zeros,
        step=0,
    )


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def adam_step(net: MlpNet, grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One clipped Adam update, in place.

    If the global gradient norm exceeds the clip threshold, every gradient is
    scaled by clip/norm before the standard update.
    """
    norm = global_grad_norm(grads)
    if state.clip_norm > 0 and norm > state.clip_norm:
        scale = state.clip_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    state.step += 1
    t = state.step
    lr = state.learning_rate
    bias1 = 1.0 - ADAM_BETA1**t
    bias2 = 1.0 - ADAM_BETA2**t
    for name, p in net.params().items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p -= lr * (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)
