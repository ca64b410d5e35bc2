"""Minimal feed-forward network with batch normalization and SGD-momentum.

Dense / BatchNorm / ReLU layers carry hand-written backward passes. Forward
passes can capture per-layer batch-norm activations (standardized and
post-affine) for the scoring modules. The output head can grow rows as new
classes appear, preserving existing logits exactly.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .serialization import read_tensors, write_tensors


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/inf loss; the run must abort."""


class Param:
    """A trainable array together with its gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray):
        self.data = data
        self.grad = np.zeros_like(data)


class Dense:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 dtype=np.float32):
        limit = 1.0 / np.sqrt(in_dim)
        weight = rng.uniform(-limit, limit, size=(in_dim, out_dim))
        self.weight = Param(weight.astype(dtype))
        self.bias = Param(np.zeros(out_dim, dtype=dtype))
        self._x: np.ndarray | None = None

    @property
    def in_dim(self) -> int:
        return self.weight.data.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.data.shape[1]

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if x.shape[1] != self.in_dim:
            raise ValueError(f"dense layer expects {self.in_dim} inputs, got {x.shape[1]}")
        if train:
            self._x = x
        return x @ self.weight.data + self.bias.data

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._x
        self.weight.grad[...] = x.T @ dy
        self.bias.grad[...] = dy.sum(axis=0)
        return dy @ self.weight.data.T

    def params(self, prefix: str) -> list[tuple[str, Param]]:
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


class BatchNorm:
    """Per-channel normalization with tracked running statistics.

    Train mode normalizes with batch statistics (biased variance) and updates
    the running estimates by EMA ``running <- (1 - m) * running + m * batch``.
    Eval mode normalizes with the running estimates and never mutates state.
    """

    def __init__(self, dim: int, eps: float = 1e-5, stat_momentum: float = 0.1,
                 dtype=np.float32):
        if not 0.0 < stat_momentum <= 1.0:
            raise ValueError("stat_momentum must be in (0, 1]")
        self.gamma = Param(np.ones(dim, dtype=dtype))
        self.beta = Param(np.zeros(dim, dtype=dtype))
        self.running_mean = np.zeros(dim, dtype=dtype)
        self.running_var = np.ones(dim, dtype=dtype)
        self.eps = eps
        self.stat_momentum = stat_momentum
        self._cache: tuple[np.ndarray, np.ndarray] | None = None
        self.captured: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def dim(self) -> int:
        return self.gamma.data.shape[0]

    def forward(self, x: np.ndarray, train: bool, keep: bool = False) -> np.ndarray:
        if x.shape[1] != self.dim:
            raise ValueError(f"batchnorm expects {self.dim} channels, got {x.shape[1]}")
        if train:
            if x.shape[0] < 2:
                raise ValueError("train-mode batch norm needs batch size >= 2")
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            inv = 1.0 / np.sqrt(var + self.eps)
            z = (x - mean) * inv
            m = self.stat_momentum
            self.running_mean = ((1.0 - m) * self.running_mean + m * mean).astype(x.dtype)
            self.running_var = ((1.0 - m) * self.running_var + m * var).astype(x.dtype)
            self._cache = (z, inv)
        else:
            z = (x - self.running_mean) / np.sqrt(self.running_var + self.eps)
        y = self.gamma.data * z + self.beta.data
        if keep:
            self.captured = (z, y)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        z, inv = self._cache
        n = z.shape[0]
        self.gamma.grad[...] = (dy * z).sum(axis=0)
        self.beta.grad[...] = dy.sum(axis=0)
        dz = dy * self.gamma.data
        # Gradient through the batch statistics themselves.
        return (inv / n) * (n * dz - dz.sum(axis=0) - z * (dz * z).sum(axis=0))

    def params(self, prefix: str) -> list[tuple[str, Param]]:
        return [(f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta)]


class ReLU:
    def __init__(self):
        self._mask: np.ndarray | None = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if train:
            self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy * self._mask

    def params(self, prefix: str) -> list[tuple[str, Param]]:
        return []


@dataclass
class ActivationTrace:
    """Per-batch-norm-layer activations captured during one forward pass.

    ``standardized`` holds z = (x - mean) / sqrt(var + eps) and ``activated``
    the post-affine gamma * z + beta, each (n_samples, channels), ordered as
    the network's batch-norm layers.
    """

    standardized: list[np.ndarray]
    activated: list[np.ndarray]

    @property
    def n_samples(self) -> int:
        return self.standardized[0].shape[0]

    @property
    def total_dim(self) -> int:
        """Scalar entries per sample summed over all batch-norm layers."""
        return sum(int(np.prod(z.shape[1:])) for z in self.standardized)

    def concat(self, other: "ActivationTrace") -> "ActivationTrace":
        return ActivationTrace(
            [np.concatenate([a, b]) for a, b in zip(self.standardized, other.standardized)],
            [np.concatenate([a, b]) for a, b in zip(self.activated, other.activated)],
        )


class Network:
    """Ordered layers plus a dense output head mapping to known class ids."""

    def __init__(self, layers: list, head: Dense, class_ids: list[int] | None = None):
        if not any(isinstance(l, BatchNorm) for l in layers):
            raise ValueError("network requires at least one batch-norm layer")
        self.layers = layers
        self.head = head
        self.class_ids = list(class_ids) if class_ids is not None else list(range(head.out_dim))
        if len(self.class_ids) != head.out_dim:
            raise ValueError("class_ids length must match head width")
        self.training = True

    def train(self) -> None:
        self.training = True

    def eval(self) -> None:
        self.training = False

    @property
    def in_dim(self) -> int:
        for layer in self.layers:
            if isinstance(layer, Dense):
                return layer.in_dim
        return self.head.in_dim

    @property
    def n_classes(self) -> int:
        return self.head.out_dim

    def class_index(self, label: int) -> int:
        return self.class_ids.index(label)

    def class_index_map(self) -> dict[int, int]:
        return {c: i for i, c in enumerate(self.class_ids)}

    def forward(self, x: np.ndarray, capture: bool = False):
        """Run the network; returns (logits, trace) with trace None unless captured."""
        x = np.asarray(x)
        if x.ndim > 2:
            x = x.reshape(x.shape[0], -1)
        elif x.ndim == 1:
            x = x.reshape(1, -1)
        if x.shape[1] != self.in_dim:
            raise ValueError(f"input dim {x.shape[1]} does not match network dim {self.in_dim}")
        standardized: list[np.ndarray] = []
        activated: list[np.ndarray] = []
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                x = layer.forward(x, self.training, keep=capture)
                if capture:
                    z, a = layer.captured
                    standardized.append(z)
                    activated.append(a)
                    layer.captured = None
            else:
                x = layer.forward(x, self.training)
        logits = self.head.forward(x, self.training)
        trace = ActivationTrace(standardized, activated) if capture else None
        return logits, trace

    def backward(self, dlogits: np.ndarray) -> None:
        dy = self.head.backward(dlogits)
        for layer in reversed(self.layers):
            dy = layer.backward(dy)

    def named_parameters(self) -> list[tuple[str, Param]]:
        out: list[tuple[str, Param]] = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.params(f"layer{i}"))
        out.extend(self.head.params("head"))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, BatchNorm):
                state[f"layer{i}.running_mean"] = layer.running_mean
                state[f"layer{i}.running_var"] = layer.running_var
        state["head.class_ids"] = np.asarray(self.class_ids, dtype=np.uint32)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        for name, p in params.items():
            if name not in state:
                raise ValueError(f"checkpoint missing tensor {name!r}")
            if state[name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name!r}: "
                                 f"{state[name].shape} vs {p.data.shape}")
            p.data[...] = state[name].astype(p.data.dtype)
        for i, layer in enumerate(self.layers):
            if isinstance(layer, BatchNorm):
                layer.running_mean[...] = state[f"layer{i}.running_mean"].astype(
                    layer.running_mean.dtype)
                layer.running_var[...] = state[f"layer{i}.running_var"].astype(
                    layer.running_var.dtype)
        if "head.class_ids" in state:
            self.class_ids = [int(c) for c in state["head.class_ids"]]


def build_mlp(in_dim: int, hidden: list[int], n_classes: int,
              rng: np.random.Generator, eps: float = 1e-5,
              stat_momentum: float = 0.1, dtype=np.float32,
              class_ids: list[int] | None = None) -> Network:
    """Dense -> BatchNorm -> ReLU stack for each hidden width, then a head."""
    if not hidden:
        raise ValueError("need at least one hidden layer to host batch norm")
    layers: list = []
    prev = in_dim
    for width in hidden:
        layers.append(Dense(prev, width, rng, dtype=dtype))
        layers.append(BatchNorm(width, eps=eps, stat_momentum=stat_momentum, dtype=dtype))
        layers.append(ReLU())
        prev = width
    head = Dense(prev, n_classes, rng, dtype=dtype)
    return Network(layers, head, class_ids)


@contextlib.contextmanager
def eval_mode(net: Network):
    """Temporarily switch to eval mode (scoring must not touch running stats)."""
    was_training = net.training
    net.eval()
    try:
        yield net
    finally:
        net.training = was_training


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. logits.

    ``targets`` are head-row indices. Accumulates in float64 for stability,
    returns the gradient in the logits dtype.
    """
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    expz = np.exp(z)
    probs = expz / expz.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = float(-np.log(probs[np.arange(n), targets] + 1e-300).mean())
    dlogits = probs
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n
    return loss, dlogits.astype(logits.dtype)


class SgdOptimizer:
    """SGD with momentum and weight decay; velocities keyed by parameter name."""

    def __init__(self, learning_rate: float = 0.1, momentum: float = 0.9,
                 weight_decay: float = 0.0005):
        if learning_rate < 0 or momentum < 0 or weight_decay < 0:
            raise ValueError("optimizer hyperparameters must be nonnegative")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self, named_params: list[tuple[str, Param]]) -> None:
        for name, p in named_params:
            g = p.grad + self.weight_decay * p.data
            v = self._velocity.get(name)
            if v is None or v.shape != g.shape:
                v = np.zeros_like(g)
            v = self.momentum * v + g
            self._velocity[name] = v
            p.data -= (self.learning_rate * v).astype(p.data.dtype)
        self.step_count += 1


def backward_and_step(net: Network, x: np.ndarray, targets: np.ndarray,
                      opt: SgdOptimizer) -> float:
    """One gradient step on a batch; returns the pre-step mean cross-entropy."""
    if not net.training:
        raise ValueError("backward_and_step requires train mode")
    logits, _ = net.forward(x)
    loss, dlogits = softmax_cross_entropy(logits, np.asarray(targets))
    if not np.isfinite(loss):
        raise NonFiniteLossError(f"loss diverged: {loss}")
    net.backward(dlogits)
    opt.step(net.named_parameters())
    return loss


def train_one_epoch(net: Network, buffer, opt: SgdOptimizer, minibatch_size: int,
                    rng: np.random.Generator) -> tuple[int, float]:
    """One shuffled pass over a memory buffer; returns (steps, mean loss).

    Visits every buffer entry exactly once in ceil(len/minibatch) minibatches.
    """
    n = len(buffer)
    if n == 0:
        raise ValueError("cannot train on an empty buffer")
    net.train()
    inputs = buffer.inputs_matrix()
    index_of = net.class_index_map()
    targets = np.asarray([index_of[e.label] for e in buffer.entries], dtype=np.int64)
    order = rng.permutation(n)
    steps = 0
    total_loss = 0.0
    for start in range(0, n, minibatch_size):
        sel = order[start:start + minibatch_size]
        if sel.size == 1:
            # Batch variance needs >= 2 rows; a duplicated sample has a
            # well-defined (zero) batch variance and the same mean loss.
            sel = np.repeat(sel, 2)
        total_loss += backward_and_step(net, inputs[sel], targets[sel], opt)
        steps += 1
    return steps, total_loss / steps


def expand_head(net: Network, n_new_classes: int, rng: np.random.Generator,
                new_class_ids: list[int] | None = None) -> Network:
    """Grow the output head by ``n_new_classes`` rows, keeping old rows bit-identical.

    New rows use the fresh-dense init scheme (uniform +-1/sqrt(fan_in), zero bias).
    """
    if n_new_classes < 1:
        raise ValueError("head expansion requires at least one new class")
    head = net.head
    dtype = head.weight.data.dtype
    limit = 1.0 / np.sqrt(head.in_dim)
    new_cols = rng.uniform(-limit, limit, size=(head.in_dim, n_new_classes)).astype(dtype)
    head.weight = Param(np.concatenate([head.weight.data, new_cols], axis=1))
    head.bias = Param(np.concatenate([head.bias.data,
                                      np.zeros(n_new_classes, dtype=dtype)]))
    if new_class_ids is None:
        start = max(net.class_ids) + 1 if net.class_ids else 0
        new_class_ids = list(range(start, start + n_new_classes))
    if len(new_class_ids) != n_new_classes:
        raise ValueError("new_class_ids length must equal n_new_classes")
    net.class_ids.extend(int(c) for c in new_class_ids)
    return net


def save_checkpoint(net: Network, path: str) -> None:
    write_tensors(path, {k: _as_storable(v) for k, v in net.state_dict().items()})


def load_checkpoint(net: Network, path: str) -> None:
    net.load_state_dict(read_tensors(path))


def checkpoint_head_size(path: str) -> int:
    """Number of head rows stored in a checkpoint (for rebuilding before load)."""
    state = read_tensors(path)
    return int(state["head.bias"].shape[0])


def checkpoint_class_ids(path: str) -> list[int]:
    state = read_tensors(path)
    return [int(c) for c in state["head.class_ids"]]


def _as_storable(array: np.ndarray) -> np.ndarray:
    if array.dtype == np.uint32:
        return array
    return array.astype(np.float32)
