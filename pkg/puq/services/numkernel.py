"""Dense feed-forward building blocks with manual backpropagation.

Weights are stored as ``(out, in)`` matrices and applied to row-major batches,
so a layer computes ``x @ W.T + b`` for an input batch ``x`` of shape ``(N, in)``.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Protocol, Sequence

import numpy as np
from scipy.special import logsumexp

from puq.core.errors import InputError, NumericError, ShapeError
from puq.schemas.training import SgdConfig

logger = logging.getLogger(__name__)

Seed = int | Sequence[int]


class Activation(str, Enum):
    RELU = "relu"
    IDENTITY = "identity"


@dataclass(slots=True)
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.RELU

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ShapeError(f"weights must be 2-D, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias of shape {self.bias.shape} does not match {self.weights.shape[0]} outputs"
            )
        self.activation = Activation(self.activation)

    @property
    def in_dim(self) -> int:
        return int(self.weights.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.weights.shape[0])


@dataclass(slots=True)
class Mlp:
    layers: list[DenseLayer]

    def __post_init__(self) -> None:
        if not self.layers:
            raise ShapeError("an Mlp needs at least one layer")
        for index in range(1, len(self.layers)):
            previous, current = self.layers[index - 1], self.layers[index]
            if previous.out_dim != current.in_dim:
                raise ShapeError(
                    f"layer {index} expects {current.in_dim} inputs but layer "
                    f"{index - 1} produces {previous.out_dim}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def widths(self) -> list[int]:
        return [self.input_dim] + [layer.out_dim for layer in self.layers]

    def parameters(self) -> list[np.ndarray]:
        params: list[np.ndarray] = []
        for layer in self.layers:
            params.extend((layer.weights, layer.bias))
        return params

    def tail(self, start: int) -> "Mlp":
        """Return the sub-network made of ``layers[start:]`` (parameters shared)."""
        return Mlp(self.layers[start:])

    def copy(self) -> "Mlp":
        return Mlp(
            [
                DenseLayer(layer.weights.copy(), layer.bias.copy(), layer.activation)
                for layer in self.layers
            ]
        )


class Parameterized(Protocol):
    def parameters(self) -> list[np.ndarray]: ...


@dataclass(slots=True)
class ActivationTrace:
    inputs: np.ndarray
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)

    @property
    def output(self) -> np.ndarray:
        return self.post[-1]


@dataclass(slots=True)
class MomentumState:
    buffers: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "MomentumState":
        return cls([np.zeros_like(param) for param in params])


def he_init(shape: tuple[int, int], seed: Seed) -> np.ndarray:
    """He-uniform matrix of shape ``(out, in)``: U(-sqrt(6/in), +sqrt(6/in))."""
    out_dim, in_dim = shape
    if out_dim < 1 or in_dim < 1:
        raise ShapeError(f"he_init needs positive dimensions, got {shape}")
    bound = np.sqrt(6.0 / in_dim)
    rng = np.random.default_rng(seed)
    return rng.uniform(-bound, bound, size=(out_dim, in_dim))


def build_mlp(
    widths: Sequence[int],
    seed: Seed,
    final_activation: Activation = Activation.IDENTITY,
) -> Mlp:
    if len(widths) < 2:
        raise ShapeError("an Mlp needs an input width and at least one output width")
    base = [seed] if isinstance(seed, int) else list(seed)
    layers = []
    for index in range(len(widths) - 1):
        activation = Activation.RELU if index < len(widths) - 2 else final_activation
        weights = he_init((widths[index + 1], widths[index]), seed=[*base, index])
        layers.append(DenseLayer(weights, np.zeros(widths[index + 1]), activation))
    return Mlp(layers)


def _as_batch(values: np.ndarray) -> np.ndarray:
    batch = np.asarray(values, dtype=np.float64)
    if batch.ndim == 1:
        batch = batch[np.newaxis, :]
    if batch.ndim != 2:
        raise ShapeError(f"expected a 2-D batch, got shape {batch.shape}")
    return batch


def forward(net: Mlp, inputs: np.ndarray) -> ActivationTrace:
    batch = _as_batch(inputs)
    trace = ActivationTrace(inputs=batch)
    current = batch
    for index, layer in enumerate(net.layers):
        if current.shape[1] != layer.in_dim:
            raise ShapeError(
                f"layer {index} expects {layer.in_dim} inputs, got {current.shape[1]}"
            )
        pre = current @ layer.weights.T + layer.bias
        post = np.maximum(pre, 0.0) if layer.activation is Activation.RELU else pre
        trace.pre.append(pre)
        trace.post.append(post)
        current = post
    if not np.all(np.isfinite(current)):
        raise NumericError("forward pass produced non-finite activations")
    return trace


def backward(
    net: Mlp, trace: ActivationTrace, output_grad: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    """Return parameter gradients (ordered like ``net.parameters()``) and the input gradient."""
    grad = _as_batch(output_grad)
    if grad.shape != trace.output.shape:
        raise ShapeError(
            f"output gradient of shape {grad.shape} does not match output {trace.output.shape}"
        )
    param_grads: list[np.ndarray] = [np.empty(0)] * (2 * len(net.layers))
    for index in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[index]
        if layer.activation is Activation.RELU:
            grad = grad * (trace.pre[index] > 0.0)
        layer_input = trace.inputs if index == 0 else trace.post[index - 1]
        param_grads[2 * index] = grad.T @ layer_input
        param_grads[2 * index + 1] = grad.sum(axis=0)
        grad = grad @ layer.weights
    return param_grads, grad


def sgd_step(
    net: Parameterized,
    grads: Sequence[np.ndarray],
    state: MomentumState,
    cfg: SgdConfig,
) -> tuple[Parameterized, MomentumState]:
    """Heavy-ball SGD with L2 weight decay folded into the gradient.

    v <- m*v + grad + wd*param ; param <- param - lr*v
    """
    params = net.parameters()
    if len(grads) != len(params) or len(state.buffers) != len(params):
        raise ShapeError(
            f"{len(params)} parameters but {len(grads)} gradients and {len(state.buffers)} buffers"
        )
    for index, (param, grad) in enumerate(zip(params, grads)):
        if grad.shape != param.shape:
            raise ShapeError(
                f"gradient {index} has shape {grad.shape}, parameter has {param.shape}"
            )
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient for parameter {index}; step aborted")
    for param, grad, buffer in zip(params, grads, state.buffers):
        buffer *= cfg.momentum
        buffer += grad + cfg.weight_decay * param
        param -= cfg.learning_rate * buffer
    return net, state


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Rescale ``grads`` so their joint L2 norm is at most ``max_norm``; returns the original norm."""
    if not max_norm > 0:
        raise InputError("max_norm must be positive")
    norm = float(np.sqrt(sum(float(np.vdot(grad, grad)) for grad in grads)))
    if not np.isfinite(norm):
        raise NumericError("gradient norm is not finite")
    if norm <= max_norm:
        return list(grads), norm
    factor = max_norm / norm
    return [grad * factor for grad in grads], norm


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    batch = _as_batch(logits)
    targets = np.asarray(labels, dtype=np.int64).reshape(-1)
    n_samples, n_classes = batch.shape
    if targets.shape[0] != n_samples:
        raise ShapeError(f"{targets.shape[0]} labels for {n_samples} logit rows")
    if n_samples and (targets.min() < 0 or targets.max() >= n_classes):
        raise InputError(f"labels must lie in [0, {n_classes})")
    log_probs = batch - logsumexp(batch, axis=1, keepdims=True)
    rows = np.arange(n_samples)
    loss = float(-log_probs[rows, targets].mean())
    grad = np.exp(log_probs)
    grad[rows, targets] -= 1.0
    grad /= n_samples
    return loss, grad


def epoch_batches(n_samples: int, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    """Seeded shuffle for one epoch; the stream is keyed by ``(seed, epoch)``."""
    order = np.random.default_rng([seed, epoch]).permutation(n_samples)
    for start in range(0, n_samples, batch_size):
        yield order[start : start + batch_size]


def parameter_checksum(params: Sequence[np.ndarray]) -> str:
    digest = hashlib.sha256()
    for param in params:
        digest.update(np.ascontiguousarray(param, dtype="<f8").tobytes())
    return digest.hexdigest()


def freeze(params: Sequence[np.ndarray]) -> None:
    for param in params:
        param.setflags(write=False)
