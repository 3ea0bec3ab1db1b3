"""Minimal dense-network core: forward passes, hand-rolled reverse-mode
gradients, Adam updates, and seeded random streams.

Everything runs in float64. All randomness flows through :class:`Rng`, so a
fixed seed and a fixed call sequence reproduce results bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, InputError, ProtocolError

ACTIVATIONS = ("relu", "tanh", "identity")


class Rng:
    """Deterministic random stream addressed by (seed, *path).

    ``child(*tags)`` derives an independent stream; the same seed and tag
    path always yields the same draws regardless of what other streams were
    consumed.
    """

    def __init__(self, seed, _path=()):
        seed = int(seed)
        if not 0 <= seed < 2**63:
            raise InputError(f"seed must be in [0, 2**63), got {seed}")
        self.seed = seed
        self._path = tuple(int(t) for t in _path)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((seed, *self._path)))
        )

    def child(self, *tags):
        return Rng(self.seed, self._path + tags)

    def standard_normal(self, shape):
        return self._gen.standard_normal(shape)

    def uniform(self, low, high, size=None):
        return self._gen.uniform(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def integers(self, high, size=None):
        return self._gen.integers(high, size=size)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self._path})"


def sample_standard_normal(rng, n):
    """Draw ``n`` N(0,1) variates from the given stream."""
    n = int(n)
    if n < 1:
        raise InputError(f"n must be >= 1, got {n}")
    return rng.standard_normal(n)


@dataclass
class Layer:
    """One dense layer: ``act(weight @ x + bias)``."""

    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray    # (out_dim,)
    activation: str


class DenseNet:
    """A chain of dense layers operating on float64 vectors or batches."""

    def __init__(self, layers):
        if not layers:
            raise InputError("a DenseNet needs at least one layer")
        for i, layer in enumerate(layers):
            w, b = layer.weight, layer.bias
            if layer.activation not in ACTIVATIONS:
                raise InputError(f"layer {i}: unknown activation {layer.activation!r}")
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise InputError(f"layer {i}: weight {w.shape} and bias {b.shape} do not agree")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise InputError(f"layer {i}: parameters contain non-finite values")
            if i > 0 and w.shape[1] != layers[i - 1].weight.shape[0]:
                raise InputError(
                    f"layer {i} expects {w.shape[1]} inputs but layer {i - 1} "
                    f"produces {layers[i - 1].weight.shape[0]}"
                )
        self.layers = list(layers)

    @property
    def input_dim(self):
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self):
        return self.layers[-1].weight.shape[0]

    def layer_sizes(self):
        return [self.input_dim] + [layer.weight.shape[0] for layer in self.layers]

    def activations(self):
        return [layer.activation for layer in self.layers]

    def n_params(self):
        return sum(layer.weight.size + layer.bias.size for layer in self.layers)

    def copy(self):
        return DenseNet(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )


def init_dense_net(sizes, rng, hidden_activation="relu", output_activation="identity"):
    """Build a DenseNet with uniform +-sqrt(6/(fan_in+fan_out)) weights and zero biases.

    ``sizes`` is (input_dim, hidden..., output_dim); the last layer gets
    ``output_activation``, all others ``hidden_activation``.
    """
    sizes = [int(s) for s in sizes]
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise InputError(f"need at least (in, out) positive sizes, got {sizes}")
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weight = rng.uniform(-bound, bound, (fan_out, fan_in))
        bias = np.zeros(fan_out)
        act = output_activation if k == len(sizes) - 2 else hidden_activation
        layers.append(Layer(weight, bias, act))
    return DenseNet(layers)


def _apply_activation(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _as_batch(x, expected_dim, what="input"):
    arr = np.asarray(x, dtype=np.float64)
    was_vector = arr.ndim == 1
    if was_vector:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != expected_dim:
        raise InputError(f"{what} has shape {np.shape(x)}, expected (..., {expected_dim})")
    return arr, was_vector


@dataclass
class ForwardTrace:
    """Saved activations from one forward pass, consumed by :func:`backward`."""

    inputs: list        # inputs[k] is the input to layer k, shape (B, in_k); inputs[-1] is the output
    pre_activations: list
    was_vector: bool


def forward(net, x):
    """Run the network on a vector (or batch of rows); purely functional."""
    arr, was_vector = _as_batch(x, net.input_dim)
    if not np.isfinite(arr).all():
        raise InputError("input contains non-finite values")
    out = arr
    for layer in net.layers:
        out = _apply_activation(layer.activation, out @ layer.weight.T + layer.bias)
    return out[0] if was_vector else out


def forward_trace(net, x):
    """Like :func:`forward` but also returns the trace needed for backward."""
    arr, was_vector = _as_batch(x, net.input_dim)
    inputs = [arr]
    pres = []
    for layer in net.layers:
        z = inputs[-1] @ layer.weight.T + layer.bias
        pres.append(z)
        inputs.append(_apply_activation(layer.activation, z))
    trace = ForwardTrace(inputs, pres, was_vector)
    out = inputs[-1]
    return (out[0] if was_vector else out), trace


class GradientTape:
    """Per-parameter gradients mirroring a DenseNet, plus the input gradient."""

    def __init__(self, weight_grads, bias_grads, input_grad=None):
        self.weight_grads = weight_grads
        self.bias_grads = bias_grads
        self.input_grad = input_grad

    @classmethod
    def zeros_like(cls, net):
        return cls(
            [np.zeros_like(l.weight) for l in net.layers],
            [np.zeros_like(l.bias) for l in net.layers],
        )

    def add_(self, other):
        for gw, ow in zip(self.weight_grads, other.weight_grads):
            gw += ow
        for gb, ob in zip(self.bias_grads, other.bias_grads):
            gb += ob
        return self

    def scale_(self, factor):
        for gw in self.weight_grads:
            gw *= factor
        for gb in self.bias_grads:
            gb *= factor
        return self

    def first_nonfinite_layer(self):
        for k, (gw, gb) in enumerate(zip(self.weight_grads, self.bias_grads)):
            if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
                return k
        return None


def backward(net, upstream_grad, trace):
    """Reverse-mode gradients of a scalar loss whose output gradient is ``upstream_grad``.

    For batched traces, ``upstream_grad`` holds one row per batch element and
    the returned tape accumulates the sum over the batch.
    """
    if not isinstance(trace, ForwardTrace) or trace is None:
        raise ProtocolError("backward requires the ForwardTrace from forward_trace")
    if len(trace.pre_activations) != len(net.layers):
        raise ProtocolError("forward trace does not match this network")
    batch = trace.inputs[0].shape[0]
    grad = np.asarray(upstream_grad, dtype=np.float64)
    if grad.ndim == 1:
        grad = grad[None, :]
    if grad.shape != (batch, net.output_dim):
        raise InputError(
            f"upstream gradient has shape {np.shape(upstream_grad)}, "
            f"expected ({batch}, {net.output_dim})"
        )
    if trace.inputs[0].shape[1] != net.input_dim:
        raise ProtocolError("forward trace does not match this network")

    weight_grads = [None] * len(net.layers)
    bias_grads = [None] * len(net.layers)
    da = grad
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        if layer.activation == "relu":
            dz = da * (trace.pre_activations[k] > 0)
        elif layer.activation == "tanh":
            dz = da * (1.0 - trace.inputs[k + 1] ** 2)
        else:
            dz = da
        weight_grads[k] = dz.T @ trace.inputs[k]
        bias_grads[k] = dz.sum(axis=0)
        da = dz @ layer.weight
    input_grad = da[0] if trace.was_vector else da
    return GradientTape(weight_grads, bias_grads, input_grad)


class OptimizerState:
    """Adam accumulators for one DenseNet."""

    def __init__(self, net, learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        if learning_rate <= 0 or epsilon <= 0 or not (0 < beta1 < 1 and 0 < beta2 < 1):
            raise InputError("optimizer hyperparameters must be positive (decays in (0,1))")
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.step_count = 0
        self.m_weights = [np.zeros_like(l.weight) for l in net.layers]
        self.m_biases = [np.zeros_like(l.bias) for l in net.layers]
        self.v_weights = [np.zeros_like(l.weight) for l in net.layers]
        self.v_biases = [np.zeros_like(l.bias) for l in net.layers]


def adam_step(state, net, tape):
    """Apply one bias-corrected Adam update in place; increments the step counter."""
    if len(state.m_weights) != len(net.layers) or len(tape.weight_grads) != len(net.layers):
        raise InputError("optimizer state / tape do not match the network")
    for k, layer in enumerate(net.layers):
        if tape.weight_grads[k].shape != layer.weight.shape or tape.bias_grads[k].shape != layer.bias.shape:
            raise InputError(f"gradient shapes do not match parameters at layer {k}")
    bad = tape.first_nonfinite_layer()
    if bad is not None:
        raise DivergenceError(f"non-finite gradient at layer {bad}", layer_index=bad)

    state.step_count += 1
    t = state.step_count
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t
    for k, layer in enumerate(net.layers):
        for param, grad, m, v in (
            (layer.weight, tape.weight_grads[k], state.m_weights[k], state.v_weights[k]),
            (layer.bias, tape.bias_grads[k], state.m_biases[k], state.v_biases[k]),
        ):
            m *= state.beta1
            m += (1.0 - state.beta1) * grad
            v *= state.beta2
            v += (1.0 - state.beta2) * grad * grad
            m_hat = m / correction1
            v_hat = v / correction2
            param -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
