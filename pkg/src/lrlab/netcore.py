"""Minimal feed-forward network engine.

Dense and 2-D convolution layers (valid padding, stride 1) with manual
backpropagation, mse / cross-entropy losses, and plain gradient-descent
updates.  Convolution inputs are channels-last: (batch, height, width,
channels); kernels are (filter_h, filter_w, in_channels, filter_count).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import linalg


class TrainingDiverged(RuntimeError):
    """Raised when parameters or losses stop being finite."""


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# name -> (activation, derivative given (z, activation(z)))
ELEMENTWISE_ACTIVATIONS = {
    "linear": (lambda z: z, lambda z, a: np.ones_like(z)),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0).astype(np.float64)),
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "sigmoid": (_sigmoid, lambda z, a: a * (1.0 - a)),
}

ACTIVATION_NAMES = tuple(ELEMENTWISE_ACTIVATIONS) + ("softmax",)


def _apply_activation(name, z):
    if name == "softmax":
        return softmax(z)
    return ELEMENTWISE_ACTIVATIONS[name][0](z)


def _activation_delta(name, delta, z, a):
    """Map d(loss)/d(activation output) to d(loss)/d(preactivation)."""
    if name == "softmax":
        return a * (delta - np.sum(delta * a, axis=-1, keepdims=True))
    return delta * ELEMENTWISE_ACTIVATIONS[name][1](z, a)


class DenseLayer:
    """Fully connected layer y = act(W x + b) with W of shape (out, in).

    Inputs with more than two dimensions are flattened per sample, so a dense
    layer can directly follow a convolution layer.
    """

    kind = "dense"

    def __init__(self, weights, bias, activation="linear"):
        self.weights = linalg.check_matrix(weights, "dense weights")
        self.bias = np.asarray(bias, dtype=np.float64).reshape(-1)
        if self.bias.shape[0] != self.weights.shape[0]:
            raise ValueError(
                f"bias length {self.bias.shape[0]} does not match output dim {self.weights.shape[0]}"
            )
        if activation not in ACTIVATION_NAMES:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation

    @property
    def in_dim(self):
        return self.weights.shape[1]

    @property
    def out_dim(self):
        return self.weights.shape[0]

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        orig_shape = x.shape
        if x.ndim != 2:
            x = x.reshape(x.shape[0], -1)
        if x.shape[1] != self.in_dim:
            raise ValueError(f"expected input dim {self.in_dim}, got {x.shape[1]}")
        z = x @ self.weights.T + self.bias
        a = _apply_activation(self.activation, z)
        return a, (x, z, a, orig_shape)

    def backward(self, delta, cache, wrt_preactivation=False):
        x, z, a, orig_shape = cache
        dz = delta if wrt_preactivation else _activation_delta(self.activation, delta, z, a)
        dw = dz.T @ x
        db = dz.sum(axis=0)
        dx = (dz @ self.weights).reshape(orig_shape)
        return dw, db, dx

    def condition_number(self, x):
        """Sensitivity of the weights -> batch outputs map, Frobenius norms.

        For an elementwise activation the squared Jacobian norm collapses to
        sum_samples sum_units act'(z)^2 * ||x||^2, so no Jacobian is ever
        materialized.  Softmax mixes units; its per-sample factor is the
        squared Frobenius norm of diag(p) - p p^T.
        """
        a, (x2d, z, a_out, _) = self.forward(x)
        x_sq = np.sum(x2d * x2d, axis=1)
        if self.activation == "softmax":
            s2 = np.sum(a_out * a_out, axis=1)
            s3 = np.sum(a_out**3, axis=1)
            unit_factor = s2 - 2.0 * s3 + s2 * s2
        else:
            d = ELEMENTWISE_ACTIVATIONS[self.activation][1](z, a_out)
            unit_factor = np.sum(d * d, axis=1)
        jac_norm = math.sqrt(float(unit_factor @ x_sq))
        return linalg.map_condition_number(
            jac_norm, np.linalg.norm(self.weights), np.linalg.norm(a_out)
        )


def im2col(x, fh, fw):
    """Extract dense (fh, fw) patches: (N, H, W, C) -> (N*OH*OW, fh*fw*C)."""
    n, h, w, c = x.shape
    oh, ow = h - fh + 1, w - fw + 1
    cols = np.empty((n, oh, ow, fh, fw, c), dtype=np.float64)
    for i in range(fh):
        for j in range(fw):
            cols[:, :, :, i, j, :] = x[:, i : i + oh, j : j + ow, :]
    return cols.reshape(n * oh * ow, fh * fw * c), (n, oh, ow)


def col2im(dcols, x_shape, fh, fw):
    """Scatter-add patch gradients back to the input tensor."""
    n, h, w, c = x_shape
    oh, ow = h - fh + 1, w - fw + 1
    dcols = dcols.reshape(n, oh, ow, fh, fw, c)
    dx = np.zeros(x_shape, dtype=np.float64)
    for i in range(fh):
        for j in range(fw):
            dx[:, i : i + oh, j : j + ow, :] += dcols[:, :, :, i, j, :]
    return dx


class Conv2dLayer:
    """2-D convolution, valid padding, stride 1, elementwise activation only."""

    kind = "conv2d"

    def __init__(self, kernel, bias, activation="linear"):
        self.kernel = linalg.check_tensor4(kernel, "conv kernel")
        self.bias = np.asarray(bias, dtype=np.float64).reshape(-1)
        if self.bias.shape[0] != self.kernel.shape[3]:
            raise ValueError(
                f"bias length {self.bias.shape[0]} does not match filter count {self.kernel.shape[3]}"
            )
        if activation not in ELEMENTWISE_ACTIVATIONS:
            raise ValueError(f"conv activation must be elementwise, got {activation!r}")
        self.activation = activation

    @property
    def weights(self):
        return self.kernel

    @weights.setter
    def weights(self, value):
        self.kernel = linalg.check_tensor4(value, "conv kernel")

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        fh, fw, in_ch, fn = self.kernel.shape
        if x.ndim != 4:
            raise ValueError(f"conv input must be 4-D (N,H,W,C), got shape {x.shape}")
        if x.shape[3] != in_ch:
            raise ValueError(f"expected {in_ch} input channels, got {x.shape[3]}")
        if x.shape[1] < fh or x.shape[2] < fw:
            raise ValueError(f"input {x.shape[1]}x{x.shape[2]} smaller than filter {fh}x{fw}")
        cols, (n, oh, ow) = im2col(x, fh, fw)
        w2d = self.kernel.reshape(fh * fw * in_ch, fn)
        z = (cols @ w2d + self.bias).reshape(n, oh, ow, fn)
        a = _apply_activation(self.activation, z)
        return a, (x.shape, cols, z, a)

    def backward(self, delta, cache, wrt_preactivation=False):
        x_shape, cols, z, a = cache
        fh, fw, in_ch, fn = self.kernel.shape
        dz = delta if wrt_preactivation else _activation_delta(self.activation, delta, z, a)
        dz2d = dz.reshape(-1, fn)
        dw = (cols.T @ dz2d).reshape(fh, fw, in_ch, fn)
        db = dz2d.sum(axis=0)
        w2d = self.kernel.reshape(fh * fw * in_ch, fn)
        dx = col2im(dz2d @ w2d.T, x_shape, fh, fw)
        return dw, db, dx

    def condition_number(self, x):
        """Worst per-slice sensitivity of the kernel -> outputs map.

        Each input-channel slice is treated as its own parameter matrix; the
        layer value is the max over slices.
        """
        a, (x_shape, cols, z, a_out) = self.forward(x)
        fh, fw, in_ch, fn = self.kernel.shape
        d = ELEMENTWISE_ACTIVATIONS[self.activation][1](z, a_out)
        unit_factor = np.sum(d * d, axis=3).reshape(-1)  # per output location
        patch_sq = (cols * cols).reshape(-1, fh * fw, in_ch).sum(axis=1)  # per channel
        out_norm = np.linalg.norm(a_out)
        best = 0.0
        for c in range(in_ch):
            jac_norm = math.sqrt(float(unit_factor @ patch_sq[:, c]))
            theta_norm = np.linalg.norm(self.kernel[:, :, c, :])
            best = max(best, linalg.map_condition_number(jac_norm, theta_norm, out_norm))
        return best


def layer_condition_number(layer, inputs):
    """Condition number of a single layer's parameter map on a batch.

    Ratio of Jacobian norm (outputs w.r.t. flattened weights, biases excluded)
    times parameter norm to output norm, all Frobenius, summed over the batch.
    """
    return layer.condition_number(inputs)


@dataclass
class SampleBatch:
    """Aligned inputs and targets; inputs (N, ...) and targets (N, m)."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError(
                f"inputs ({self.inputs.shape[0]}) and targets ({self.targets.shape[0]}) misaligned"
            )
        if self.inputs.shape[0] < 1:
            raise ValueError("batch must contain at least one sample")

    @property
    def size(self):
        return self.inputs.shape[0]


class Network:
    """Ordered stack of layers.  Mutable parameters, versioned for cache checks."""

    def __init__(self, layers):
        layers = list(layers)
        if not layers:
            raise ValueError("network needs at least one layer")
        for i, layer in enumerate(layers[:-1]):
            if layer.activation == "softmax":
                raise ValueError(f"softmax is only allowed on the output layer (layer {i})")
        self.layers = layers
        self._version = 0

    @property
    def version(self):
        return self._version

    def bump_version(self):
        self._version += 1

    def copy_params(self):
        return [(np.array(l.weights, copy=True), l.bias.copy()) for l in self.layers]

    def set_params(self, params):
        for layer, (w, b) in zip(self.layers, params):
            layer.weights = np.array(w, copy=True)
            layer.bias = b.copy()
        self.bump_version()


@dataclass
class ForwardCache:
    version: int
    layer_caches: list
    masks: list
    outputs: np.ndarray


def forward(net, inputs, dropout_masks=None):
    """Run the network; returns (outputs, cache) where the cache feeds backward.

    dropout_masks, when given, is a per-layer list applied multiplicatively to
    each layer's output (None entries mean no mask).
    """
    x = np.asarray(inputs, dtype=np.float64)
    masks = list(dropout_masks) if dropout_masks is not None else [None] * len(net.layers)
    if len(masks) != len(net.layers):
        raise ValueError("need one dropout mask entry per layer")
    caches = []
    for i, layer in enumerate(net.layers):
        try:
            x, cache = layer.forward(x)
        except ValueError as exc:
            raise ValueError(f"layer {i}: {exc}") from exc
        if masks[i] is not None:
            x = x * masks[i]
        caches.append(cache)
    return x, ForwardCache(version=net.version, layer_caches=caches, masks=masks, outputs=x)


LOSS_KINDS = ("mse", "cross_entropy")


def loss(outputs, targets, kind="mse"):
    """Scalar training loss.

    mse: mean over samples of the squared error summed over output components.
    cross_entropy: mean negative log-likelihood; outputs must be probability
    rows (as produced by a softmax output layer).
    """
    outputs = np.asarray(outputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if outputs.shape != targets.shape:
        raise ValueError(f"outputs {outputs.shape} and targets {targets.shape} differ in shape")
    n = outputs.shape[0]
    if kind == "mse":
        diff = outputs - targets
        return float(np.sum(diff * diff) / n)
    if kind == "cross_entropy":
        if outputs.ndim != 2:
            raise ValueError("cross_entropy expects 2-D (batch, classes) outputs")
        rowsum = outputs.sum(axis=1)
        if np.any(outputs < -1e-12) or np.any(np.abs(rowsum - 1.0) > 1e-6):
            raise ValueError("cross_entropy requires probability outputs (softmax layer)")
        logp = np.log(np.maximum(outputs, 1e-300))
        return float(-np.sum(np.where(targets > 0, targets * logp, 0.0)) / n)
    raise ValueError(f"unknown loss kind {kind!r}")


def accuracy(outputs, targets):
    """Fraction of samples whose argmax matches; nan when not classification-shaped."""
    outputs = np.asarray(outputs)
    targets = np.asarray(targets)
    if outputs.ndim != 2 or outputs.shape[1] < 2:
        return math.nan
    return float(np.mean(np.argmax(outputs, axis=1) == np.argmax(targets, axis=1)))


@dataclass
class LayerGrads:
    dw: np.ndarray
    db: np.ndarray


@dataclass
class GradientSet:
    layers: list

    def norm(self):
        total = 0.0
        for g in self.layers:
            total += float(np.sum(g.dw * g.dw)) + float(np.sum(g.db * g.db))
        return math.sqrt(total)


def backward(net, cache, targets, loss_kind="mse"):
    """Exact gradient of the loss w.r.t. every parameter, via backpropagation."""
    if cache.version != net.version:
        raise ValueError("stale forward cache: network parameters changed since forward()")
    targets = np.asarray(targets, dtype=np.float64)
    outputs = cache.outputs
    if outputs.shape != targets.shape:
        raise ValueError(f"outputs {outputs.shape} and targets {targets.shape} differ in shape")
    n = outputs.shape[0]
    last = net.layers[-1]

    wrt_preactivation = False
    if loss_kind == "mse":
        delta = 2.0 * (outputs - targets) / n
    elif loss_kind == "cross_entropy":
        if last.kind != "dense" or last.activation != "softmax":
            raise ValueError("cross_entropy requires a dense softmax output layer")
        delta = (outputs - targets) / n
        wrt_preactivation = True
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")

    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        if cache.masks[i] is not None:
            delta = delta * cache.masks[i]
        dw, db, delta = net.layers[i].backward(
            delta, cache.layer_caches[i], wrt_preactivation=wrt_preactivation and i == len(net.layers) - 1
        )
        grads[i] = LayerGrads(dw=dw, db=db)
    return GradientSet(layers=grads)


def sgd_step(net, grads, step_size):
    """In-place descent update theta <- theta - step_size * grad."""
    if not step_size > 0:
        raise ValueError(f"step_size must be positive, got {step_size}")
    if len(grads.layers) != len(net.layers):
        raise ValueError("gradient set does not match network layout")
    for i, (layer, g) in enumerate(zip(net.layers, grads.layers)):
        new_w = np.asarray(layer.weights) - step_size * g.dw
        new_b = layer.bias - step_size * g.db
        if not (np.all(np.isfinite(new_w)) and np.all(np.isfinite(new_b))):
            raise TrainingDiverged(f"non-finite parameters after update in layer {i}")
        if layer.kind == "dense":
            layer.weights = new_w
        else:
            layer.kernel = new_w
        layer.bias = new_b
    net.bump_version()
    return net


def glorot_uniform(shape, fan_in, fan_out, rng):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def make_dense(in_dim, out_dim, activation, rng):
    w = glorot_uniform((out_dim, in_dim), in_dim, out_dim, rng)
    return DenseLayer(w, np.zeros(out_dim), activation)


def make_conv(filter_h, filter_w, in_channels, filter_count, activation, rng):
    fan_in = filter_h * filter_w * in_channels
    fan_out = filter_h * filter_w * filter_count
    k = glorot_uniform((filter_h, filter_w, in_channels, filter_count), fan_in, fan_out, rng)
    return Conv2dLayer(k, np.zeros(filter_count), activation)
