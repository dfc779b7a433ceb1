"""Layers and classification heads.

A dense layer computes per unit ``y_i = phi(gamma_i * (w_i . x) + b_i)``
where ``w_i`` is the i-th column of the weight matrix; with batch
normalization enabled the pre-activation becomes
``phi(gamma_i * BN(w_i . x) + b_i)`` with BN applied without scale or shift.
The batch-normalized softmax head standardizes the logits per class and
rescales them by a single shared hyperparameter.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import (
    Tensor,
    active_tape,
    add,
    div,
    matmul,
    mul,
    reduce_mean,
    relu,
    sigmoid,
    sqrt,
    sub,
    tanh,
)

__all__ = [
    "ACTIVATIONS",
    "BatchNorm",
    "DenseUnitLayer",
    "SoftmaxHead",
    "BnSoftmaxHead",
    "MLP",
    "batchnorm",
    "dense_forward",
    "softmax_cross_entropy",
    "softmax_probs",
    "weight_norm_equivalence_check",
]


def _identity(t: Tensor) -> Tensor:
    return t


ACTIVATIONS = {
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "identity": _identity,
}


class BatchNorm:
    """Per-feature standardization without scale or shift.

    Train mode standardizes with the batch mean and biased (population)
    variance and updates the running statistics as
    ``running <- momentum * running + (1 - momentum) * batch``.  Eval mode
    uses the running statistics only.
    """

    def __init__(self, num_features: int, momentum: float = 0.9, eps: float = 1e-5,
                 name: str = "bn"):
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must be in (0, 1), got {momentum}")
        if eps < 0.0:
            raise ValueError(f"eps must be nonnegative, got {eps}")
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.mode = "train"
        self.name = name
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def __call__(self, x: Tensor, update_running: bool = True) -> Tensor:
        if x.data.ndim != 2 or x.data.shape[1] != self.num_features:
            raise ValueError(
                f"batchnorm expects shape [batch, {self.num_features}], got {x.shape}"
            )
        if self.mode == "train":
            if x.data.shape[0] < 2:
                raise ValueError("batchnorm train mode needs a batch of at least 2")
            mean = reduce_mean(x, axis=0)
            centered = sub(x, mean)
            var = reduce_mean(mul(centered, centered), axis=0)
            out = div(centered, sqrt(add(var, Tensor(self.eps))))
            if update_running:
                m = self.momentum
                self.running_mean = m * self.running_mean + (1.0 - m) * mean.data
                self.running_var = m * self.running_var + (1.0 - m) * var.data
            return out
        if self.mode == "eval":
            denom = Tensor(np.sqrt(self.running_var + self.eps))
            return div(sub(x, Tensor(self.running_mean)), denom)
        raise ValueError(f"unknown batchnorm mode {self.mode!r}")


def batchnorm(x: Tensor, state: BatchNorm, update_running: bool = True) -> Tensor:
    """Apply ``state`` to ``x`` in the state's current mode."""
    return state(x, update_running=update_running)


class DenseUnitLayer:
    """Fully connected layer whose weight columns are per-unit input vectors.

    Weight columns are initialized Gaussian and normalized to unit L2 norm;
    the post-normalization Gaussian scale is immaterial.
    """

    def __init__(
        self,
        fan_in: int,
        fan_out: int,
        activation: str = "relu",
        use_batch_norm: bool = False,
        use_gamma: bool = True,
        bn_momentum: float = 0.9,
        bn_eps: float = 1e-5,
        rng: np.random.Generator | None = None,
        name: str = "dense",
    ):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng or np.random.default_rng()
        w = rng.standard_normal((fan_in, fan_out))
        w /= np.linalg.norm(w, axis=0)
        self.fan_in = fan_in
        self.fan_out = fan_out
        self.name = name
        self.weights = Tensor(w, requires_grad=True, name=f"{name}.weights")
        self.gamma = (
            Tensor(np.ones(fan_out), requires_grad=True, name=f"{name}.gamma")
            if use_gamma
            else None
        )
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.bias")
        self.activation = activation
        self.bn = (
            BatchNorm(fan_out, momentum=bn_momentum, eps=bn_eps, name=f"{name}.bn")
            if use_batch_norm
            else None
        )

    def __call__(self, x: Tensor, update_running: bool = True) -> Tensor:
        if x.data.ndim != 2 or x.data.shape[1] != self.fan_in:
            raise ValueError(
                f"{self.name}: expected input shape [batch, {self.fan_in}], got {x.shape}"
            )
        pre = matmul(x, self.weights)
        if self.bn is not None:
            pre = self.bn(pre, update_running=update_running)
        if self.gamma is not None:
            pre = mul(pre, self.gamma)
        pre = add(pre, self.bias)
        return ACTIVATIONS[self.activation](pre)

    def trainable_scalars(self) -> list[Tensor]:
        return [self.bias] if self.gamma is None else [self.gamma, self.bias]


def dense_forward(layer: DenseUnitLayer, x: Tensor, update_running: bool = True) -> Tensor:
    return layer(x, update_running=update_running)


class SoftmaxHead:
    """Pass-through head: raw logits feed the cross-entropy directly."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.mode = "train"

    def __call__(self, logits: Tensor, update_running: bool = True) -> Tensor:
        return logits


class BnSoftmaxHead:
    """Standardizes logits per class, then scales all classes by one factor.

    The scaling factor is a positive hyperparameter shared by every class,
    not a trainable parameter.
    """

    def __init__(self, num_classes: int, gamma: float = 1.0,
                 bn_momentum: float = 0.9, bn_eps: float = 1e-5):
        if gamma <= 0:
            raise ValueError(f"logit scaling factor must be positive, got {gamma}")
        self.num_classes = num_classes
        self.gamma = float(gamma)
        self.bn = BatchNorm(num_classes, momentum=bn_momentum, eps=bn_eps, name="head.bn")

    @property
    def mode(self) -> str:
        return self.bn.mode

    @mode.setter
    def mode(self, value: str) -> None:
        self.bn.mode = value

    def __call__(self, raw_logits: Tensor, update_running: bool = True) -> Tensor:
        return mul(self.bn(raw_logits, update_running=update_running), Tensor(self.gamma))


def bn_softmax_forward(head: BnSoftmaxHead, raw_logits: Tensor,
                       update_running: bool = True) -> Tensor:
    return head(raw_logits, update_running=update_running)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray | Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of the target classes.

    Numerically stable via max subtraction; the gradient with respect to the
    logits is ``(softmax - onehot) / batch`` and sums to zero per sample.
    """
    targets = np.asarray(targets, dtype=np.int64)
    z = logits.data
    if z.ndim != 2:
        raise ValueError(f"logits must be [batch, classes], got shape {logits.shape}")
    batch, num_classes = z.shape
    if targets.shape != (batch,):
        raise ValueError(f"targets must have shape ({batch},), got {targets.shape}")
    if np.any(targets < 0) or np.any(targets >= num_classes):
        raise ValueError(
            f"target indices must lie in [0, {num_classes}), got range "
            f"[{targets.min()}, {targets.max()}]"
        )
    shifted = z - z.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss_value = -log_probs[np.arange(batch), targets].mean()
    out = Tensor(loss_value)
    probs = np.exp(log_probs)

    def grad_fn(g):
        grad = probs.copy()
        grad[np.arange(batch), targets] -= 1.0
        return (float(g) * grad / batch,)

    tape = active_tape()
    if tape is not None:
        tape.record(out, (logits,), grad_fn)
    return out


def weight_norm_equivalence_check(
    w: np.ndarray, gamma: float, x: np.ndarray, b: float,
    activation: str = "identity", tol: float = 1e-12,
) -> bool:
    """Test-only oracle: scaling by gamma/|w| equals scaling the unit vector.

    Compares ``phi((gamma/|w|) * w.x + b)`` against ``phi(gamma * (w/|w|).x + b)``.
    """
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(w)
    if norm == 0.0:
        raise ValueError("weight vector must be nonzero")
    phi = ACTIVATIONS[activation]
    lhs = phi(Tensor((gamma / norm) * float(w @ x) + b)).item()
    rhs = phi(Tensor(gamma * float((w / norm) @ x) + b)).item()
    return abs(lhs - rhs) <= tol


class MLP:
    """Stack of dense layers with a softmax or batch-normalized softmax head.

    Hidden-layer and output-layer weight matrices form the vector parameter
    set (columns are per-unit vectors); per-unit scaling factors and biases
    form the scalar set.  Batch-norm running statistics are not trainable.
    """

    def __init__(
        self,
        feature_dim: int,
        hidden_widths: Sequence[int],
        num_classes: int,
        activation: str = "relu",
        use_batch_norm: bool = True,
        use_gamma: bool = True,
        head: str = "softmax",
        head_gamma: float = 1.0,
        bn_momentum: float = 0.9,
        bn_eps: float = 1e-5,
        rng: np.random.Generator | None = None,
    ):
        rng = rng or np.random.default_rng()
        self.layers: list[DenseUnitLayer] = []
        fan_in = feature_dim
        for i, width in enumerate(hidden_widths):
            self.layers.append(
                DenseUnitLayer(
                    fan_in,
                    width,
                    activation=activation,
                    use_batch_norm=use_batch_norm,
                    use_gamma=use_gamma,
                    bn_momentum=bn_momentum,
                    bn_eps=bn_eps,
                    rng=rng,
                    name=f"dense{i}",
                )
            )
            fan_in = width
        self.layers.append(
            DenseUnitLayer(
                fan_in,
                num_classes,
                activation="identity",
                use_batch_norm=False,
                use_gamma=use_gamma,
                rng=rng,
                name=f"dense{len(hidden_widths)}",
            )
        )
        if head == "softmax":
            self.head = SoftmaxHead(num_classes)
        elif head == "bn_softmax":
            self.head = BnSoftmaxHead(
                num_classes, gamma=head_gamma, bn_momentum=bn_momentum, bn_eps=bn_eps
            )
        else:
            raise ValueError(f"unknown head {head!r}")
        self.num_classes = num_classes

    def set_mode(self, mode: str) -> None:
        for layer in self.layers:
            if layer.bn is not None:
                layer.bn.mode = mode
        self.head.mode = mode

    def forward(self, x: Tensor, training: bool, update_running: bool = True) -> Tensor:
        self.set_mode("train" if training else "eval")
        h = x
        for layer in self.layers:
            h = layer(h, update_running=update_running)
        return self.head(h, update_running=update_running)

    def loss(self, x: Tensor, targets: np.ndarray, training: bool,
             update_running: bool = True) -> Tensor:
        return softmax_cross_entropy(self.forward(x, training, update_running), targets)

    def predict(self, features: np.ndarray) -> np.ndarray:
        logits = self.forward(Tensor(features), training=False)
        return np.argmax(logits.data, axis=1)

    def vector_params(self) -> list[Tensor]:
        return [layer.weights for layer in self.layers]

    def scalar_params(self) -> list[Tensor]:
        params: list[Tensor] = []
        for layer in self.layers:
            params.extend(layer.trainable_scalars())
        return params

    def trainable_params(self) -> list[Tensor]:
        return self.vector_params() + self.scalar_params()

    def state_dict(self) -> dict:
        state = {"params": {}, "bn": {}}
        for p in self.trainable_params():
            state["params"][p.name] = p.data.tolist()
        for layer in self.layers:
            if layer.bn is not None:
                state["bn"][layer.bn.name] = {
                    "running_mean": layer.bn.running_mean.tolist(),
                    "running_var": layer.bn.running_var.tolist(),
                }
        if isinstance(self.head, BnSoftmaxHead):
            state["bn"][self.head.bn.name] = {
                "running_mean": self.head.bn.running_mean.tolist(),
                "running_var": self.head.bn.running_var.tolist(),
            }
        return state

    def load_state_dict(self, state: dict) -> None:
        by_name = {p.name: p for p in self.trainable_params()}
        for name, values in state["params"].items():
            p = by_name[name]
            arr = np.asarray(values, dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr
        bns = {layer.bn.name: layer.bn for layer in self.layers if layer.bn is not None}
        if isinstance(self.head, BnSoftmaxHead):
            bns[self.head.bn.name] = self.head.bn
        for name, stats in state["bn"].items():
            bn = bns[name]
            bn.running_mean = np.asarray(stats["running_mean"], dtype=np.float64)
            bn.running_var = np.asarray(stats["running_var"], dtype=np.float64)
