"""Optimizers: SGD with momentum and L2 decay, Adam, and NDAdam.

NDAdam treats each hidden unit's input weight vector as a point on the unit
sphere: the raw gradient is projected onto the tangent plane, first moments
are kept per vector and the second moment collapses to one scalar per vector
(the running average of the squared projected-gradient norm), and every
update ends with an explicit renormalization so the vector stays unit-norm.
Scalars (gains, biases) follow the ordinary Adam rule with a separate
learning rate.

Per step t (1-based, shared by both paths), for each vector w with raw
gradient gr:

    g     = gr - (gr . w) w
    m     = b1 m + (1 - b1) g
    v     = b2 v + (1 - b2) |g|^2
    m_hat = m / (1 - b1^t);  v_hat = v / (1 - b2^t)
    w_bar = w - alpha_v * m_hat / (sqrt(v_hat) + eps)
    w     = w_bar / |w_bar|

A 2-D vector parameter of shape [n, k] is treated as k independent columns.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

__all__ = [
    "LrSchedule",
    "lr_at",
    "ParamGroup",
    "SGD",
    "Adam",
    "NDAdam",
    "project_to_sphere",
    "nd_adam_vector_step",
    "adam_scalar_step",
    "relative_update_magnitude",
    "MissingGradientError",
    "DegenerateUpdateError",
    "save_checkpoint",
    "load_checkpoint",
]

UNIT_NORM_TOL = 1e-6


class MissingGradientError(KeyError):
    """A trainable parameter was stepped without a gradient."""


class DegenerateUpdateError(RuntimeError):
    """A sphere update landed exactly on the origin; never renormalize zero."""


@dataclass
class LrSchedule:
    """Learning-rate schedule: constant, or cosine annealed to zero.

    The cosine form is ``alpha0 * 0.5 * (1 + cos(pi * t / total_steps))``,
    monotone nonincreasing with no restarts.
    """

    alpha0: float
    total_steps: int = 0
    kind: str = "constant"

    def __post_init__(self):
        if self.alpha0 < 0:
            raise ValueError(f"alpha0 must be nonnegative, got {self.alpha0}")
        if self.kind not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "cosine" and self.total_steps < 1:
            raise ValueError("cosine schedule needs total_steps >= 1")


def lr_at(schedule: LrSchedule, t: int) -> float:
    """Rate at step ``t``; past the horizon, cosine clamps to 0."""
    if schedule.kind == "constant":
        return schedule.alpha0
    if t >= schedule.total_steps:
        return 0.0
    return schedule.alpha0 * 0.5 * (1.0 + math.cos(math.pi * t / schedule.total_steps))


@dataclass
class ParamGroup:
    """Partition of the trainable parameters.

    ``vector_params`` hold unit-norm weight vectors (1-D, or 2-D with
    columns as the vectors); ``scalar_params`` hold everything else.  The
    two sets must be disjoint and each vector needs at least 2 components.
    """

    vector_params: list[Tensor] = field(default_factory=list)
    scalar_params: list[Tensor] = field(default_factory=list)

    def __post_init__(self):
        vec_ids = {id(p) for p in self.vector_params}
        if vec_ids & {id(p) for p in self.scalar_params}:
            raise ValueError("vector and scalar parameter sets must be disjoint")
        for p in self.vector_params:
            if p.data.ndim not in (1, 2):
                raise ValueError(f"vector param {p.name!r} must be 1-D or 2-D, got {p.shape}")
            if p.data.shape[0] < 2:
                raise ValueError(f"vector param {p.name!r} needs dimension >= 2, got {p.shape}")


def _param_label(p: Tensor) -> str:
    return p.name if p.name else f"<tensor {p.shape}>"


def _require_grad(grads: dict, p: Tensor) -> np.ndarray:
    try:
        g = grads[p]
    except KeyError:
        raise MissingGradientError(f"no gradient supplied for parameter {_param_label(p)}") from None
    return g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)


def project_to_sphere(g_raw: Tensor, w: Tensor) -> Tensor:
    """Tangent projection ``g_raw - (g_raw . w) w`` for unit-norm ``w``."""
    g = g_raw.data if isinstance(g_raw, Tensor) else np.asarray(g_raw, dtype=np.float64)
    wv = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    norm = np.linalg.norm(wv)
    if abs(norm - 1.0) > UNIT_NORM_TOL:
        raise ValueError(f"w must be unit-norm within {UNIT_NORM_TOL}, got norm {norm}")
    return Tensor(g - (g @ wv) * wv)


def _project_columns(g_raw: np.ndarray, w: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(w, axis=0)
    if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise ValueError(f"weight columns must be unit-norm within {UNIT_NORM_TOL} "
                         f"(worst deviation {worst:.3e})")
    radial = np.sum(g_raw * w, axis=0)
    return g_raw - radial * w


def _nd_adam_columns(w, g_raw, m, v, t, alpha, beta1, beta2, eps):
    """One sphere step on columns; returns (w_new, m_new, v_new, projected)."""
    g = _project_columns(g_raw, w)
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * np.sum(g * g, axis=0)
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    w_bar = w - alpha * m_hat / (np.sqrt(v_hat) + eps)
    norms = np.linalg.norm(w_bar, axis=0)
    if np.any(norms == 0.0):
        dead = int(np.argmin(norms))
        raise DegenerateUpdateError(
            f"update at t={t} drove column {dead} to the origin "
            f"(alpha={alpha}, |m_hat|={float(np.linalg.norm(m_hat[:, dead])):.3e}, "
            f"v_hat={float(v_hat[dead]):.3e}); refusing to renormalize zero"
        )
    return w_bar / norms, m, v


def nd_adam_vector_step(
    w: Tensor,
    g_raw: Tensor,
    state: dict,
    alpha_v: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tensor:
    """Single-vector sphere step; increments ``state['t']`` itself.

    ``state`` holds ``m`` (same shape as ``w``), scalar ``v``, and the step
    counter ``t``.  The result is exactly unit-norm after renormalization.
    """
    wv = w.data.reshape(-1, 1)
    gv = (g_raw.data if isinstance(g_raw, Tensor) else np.asarray(g_raw, dtype=np.float64)).reshape(-1, 1)
    state["t"] = state.get("t", 0) + 1
    m = np.asarray(state["m"], dtype=np.float64).reshape(-1, 1)
    v = np.array([float(state["v"])])
    w_new, m_new, v_new = _nd_adam_columns(
        wv, gv, m, v, state["t"], alpha_v, beta1, beta2, eps
    )
    state["m"] = m_new.reshape(w.data.shape)
    state["v"] = float(v_new[0])
    return Tensor(w_new.reshape(w.data.shape))


def adam_scalar_step(
    theta: float,
    g: float,
    state: dict,
    alpha_s: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> float:
    """Standard Adam update of one scalar; ``state['t']`` is pre-incremented."""
    t = state["t"]
    state["m"] = beta1 * state["m"] + (1.0 - beta1) * g
    state["v"] = beta2 * state["v"] + (1.0 - beta2) * g * g
    m_hat = state["m"] / (1.0 - beta1 ** t)
    v_hat = state["v"] / (1.0 - beta2 ** t)
    return theta - alpha_s * m_hat / (math.sqrt(v_hat) + eps)


def relative_update_magnitude(w_before, w_after) -> float:
    """``|w_after - w_before| / |w_before|``; errors on zero ``w_before``."""
    before = w_before.data if isinstance(w_before, Tensor) else np.asarray(w_before, dtype=np.float64)
    after = w_after.data if isinstance(w_after, Tensor) else np.asarray(w_after, dtype=np.float64)
    norm = np.linalg.norm(before)
    if norm == 0.0:
        raise ValueError("relative update magnitude undefined for zero vector")
    return float(np.linalg.norm(after - before) / norm)


class SGD:
    """SGD with momentum and L2 weight decay folded into the gradient.

    The effective gradient for a decayed parameter is ``dL/dw + lam * w``.
    Loss and decay contributions run through separate momentum buffers whose
    sum is the classical velocity, so the last step's loss component and
    decay component stay retrievable per parameter (``last_loss_delta`` /
    ``last_decay_delta``).

    ``decay_params`` restricts the L2 penalty to a subset (the hidden-unit
    input weight matrices, typically); by default every parameter decays.
    """

    kind = "sgd"

    def __init__(
        self,
        params: list[Tensor],
        lr: LrSchedule,
        momentum: float = 0.0,
        weight_decay: float = 0.0,
        decay_params: list[Tensor] | None = None,
    ):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        if weight_decay < 0.0:
            raise ValueError(f"weight_decay must be nonnegative, got {weight_decay}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._decay_ids = {id(p) for p in (self.params if decay_params is None else decay_params)}
        self.t = 0
        self._vel_loss = {id(p): np.zeros_like(p.data) for p in self.params}
        self._vel_decay = {id(p): np.zeros_like(p.data) for p in self.params}
        self.last_loss_delta: dict[int, np.ndarray] = {}
        self.last_decay_delta: dict[int, np.ndarray] = {}

    def step(self, grads: dict) -> None:
        alpha = lr_at(self.lr, self.t)
        self.t += 1
        mu = self.momentum
        for p in self.params:
            g = _require_grad(grads, p)
            vl = self._vel_loss[id(p)]
            vp = self._vel_decay[id(p)]
            vl[...] = mu * vl + g
            if id(p) in self._decay_ids and self.weight_decay > 0.0:
                vp[...] = mu * vp + self.weight_decay * p.data
            delta_l = -alpha * vl
            delta_p = -alpha * vp
            p.data = p.data + delta_l + delta_p
            self.last_loss_delta[id(p)] = delta_l
            self.last_decay_delta[id(p)] = delta_p

    def state_dict(self) -> dict:
        return {
            "version": 1,
            "kind": self.kind,
            "t": self.t,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "lr": {"alpha0": self.lr.alpha0, "total_steps": self.lr.total_steps, "kind": self.lr.kind},
            "velocity_loss": [self._vel_loss[id(p)].tolist() for p in self.params],
            "velocity_decay": [self._vel_decay[id(p)].tolist() for p in self.params],
        }

    def load_state_dict(self, state: dict) -> None:
        _check_header(state, self.kind)
        self.t = state["t"]
        self.momentum = state["momentum"]
        self.weight_decay = state["weight_decay"]
        self.lr = LrSchedule(**state["lr"])
        for p, vl, vp in zip(self.params, state["velocity_loss"], state["velocity_decay"]):
            self._vel_loss[id(p)] = np.asarray(vl, dtype=np.float64).reshape(p.data.shape)
            self._vel_decay[id(p)] = np.asarray(vp, dtype=np.float64).reshape(p.data.shape)


class Adam:
    """Reference Adam: per-coordinate moments with bias correction."""

    kind = "adam"

    def __init__(
        self,
        params: list[Tensor],
        lr: LrSchedule,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {id(p): np.zeros_like(p.data) for p in self.params}
        self._v = {id(p): np.zeros_like(p.data) for p in self.params}

    def step(self, grads: dict) -> None:
        alpha = lr_at(self.lr, self.t)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = _require_grad(grads, p)
            m = self._m[id(p)]
            v = self._v[id(p)]
            m[...] = b1 * m + (1.0 - b1) * g
            v[...] = b2 * v + (1.0 - b2) * g * g
            p.data = p.data - alpha * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def second_moment_scalar_count(self, p: Tensor) -> int:
        return int(self._v[id(p)].size)

    def state_dict(self) -> dict:
        return {
            "version": 1,
            "kind": self.kind,
            "t": self.t,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "lr": {"alpha0": self.lr.alpha0, "total_steps": self.lr.total_steps, "kind": self.lr.kind},
            "m": [self._m[id(p)].tolist() for p in self.params],
            "v": [self._v[id(p)].tolist() for p in self.params],
        }

    def load_state_dict(self, state: dict) -> None:
        _check_header(state, self.kind)
        self.t = state["t"]
        self.beta1 = state["beta1"]
        self.beta2 = state["beta2"]
        self.eps = state["eps"]
        self.lr = LrSchedule(**state["lr"])
        for p, m, v in zip(self.params, state["m"], state["v"]):
            self._m[id(p)] = np.asarray(m, dtype=np.float64).reshape(p.data.shape)
            self._v[id(p)] = np.asarray(v, dtype=np.float64).reshape(p.data.shape)


class NDAdam:
    """Sphere-constrained, direction-preserving Adam.

    Vector parameters are renormalized column-wise at construction (zero
    columns are rejected) and stay unit-norm after every step.  Scalar
    parameters follow Adam with the scalar-path schedule.  One step counter
    is shared by both paths and increments once per :meth:`step`.
    """

    kind = "nd_adam"

    def __init__(
        self,
        group: ParamGroup,
        lr_vector: LrSchedule,
        lr_scalar: LrSchedule,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.group = group
        self.lr_vector = lr_vector
        self.lr_scalar = lr_scalar
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        for w in group.vector_params:
            cols = w.data.reshape(w.data.shape[0], -1)
            norms = np.linalg.norm(cols, axis=0)
            if np.any(norms == 0.0):
                raise ValueError(f"vector param {_param_label(w)} has a zero column")
            w.data = (cols / norms).reshape(w.data.shape)
        self._vm = {id(w): np.zeros_like(w.data) for w in group.vector_params}
        self._vv = {
            id(w): np.zeros(w.data.reshape(w.data.shape[0], -1).shape[1])
            for w in group.vector_params
        }
        self._sm = {id(p): np.zeros_like(p.data) for p in group.scalar_params}
        self._sv = {id(p): np.zeros_like(p.data) for p in group.scalar_params}

    @property
    def params(self) -> list[Tensor]:
        return list(self.group.vector_params) + list(self.group.scalar_params)

    def step(self, grads: dict) -> None:
        alpha_v = lr_at(self.lr_vector, self.t)
        alpha_s = lr_at(self.lr_scalar, self.t)
        self.t += 1
        for w in self.group.vector_params:
            g = _require_grad(grads, w)
            shape = w.data.shape
            cols = w.data.reshape(shape[0], -1)
            gcols = g.reshape(shape[0], -1)
            m = self._vm[id(w)].reshape(shape[0], -1)
            w_new, m_new, v_new = _nd_adam_columns(
                cols, gcols, m, self._vv[id(w)], self.t,
                alpha_v, self.beta1, self.beta2, self.eps,
            )
            w.data = w_new.reshape(shape)
            self._vm[id(w)] = m_new.reshape(shape)
            self._vv[id(w)] = v_new
        for p in self.group.scalar_params:
            g = _require_grad(grads, p)
            m = self._sm[id(p)]
            v = self._sv[id(p)]
            m[...] = self.beta1 * m + (1.0 - self.beta1) * g
            v[...] = self.beta2 * v + (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** self.t)
            v_hat = v / (1.0 - self.beta2 ** self.t)
            p.data = p.data - alpha_s * m_hat / (np.sqrt(v_hat) + self.eps)

    def expected_vector_rel_update(self, w: Tensor, alpha_v: float) -> np.ndarray:
        """Per-column ``alpha_v * |m_hat| / sqrt(v_hat)`` from the current state."""
        shape = w.data.shape
        m_hat = self._vm[id(w)].reshape(shape[0], -1) / (1.0 - self.beta1 ** self.t)
        v_hat = self._vv[id(w)] / (1.0 - self.beta2 ** self.t)
        return alpha_v * np.linalg.norm(m_hat, axis=0) / np.sqrt(v_hat)

    def second_moment_scalar_count(self, w: Tensor) -> int:
        if id(w) in self._vv:
            return int(self._vv[id(w)].size)
        return int(self._sv[id(w)].size)

    def state_dict(self) -> dict:
        return {
            "version": 1,
            "kind": self.kind,
            "t": self.t,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "lr_vector": {
                "alpha0": self.lr_vector.alpha0,
                "total_steps": self.lr_vector.total_steps,
                "kind": self.lr_vector.kind,
            },
            "lr_scalar": {
                "alpha0": self.lr_scalar.alpha0,
                "total_steps": self.lr_scalar.total_steps,
                "kind": self.lr_scalar.kind,
            },
            "vector_m": [self._vm[id(w)].tolist() for w in self.group.vector_params],
            "vector_v": [self._vv[id(w)].tolist() for w in self.group.vector_params],
            "scalar_m": [self._sm[id(p)].tolist() for p in self.group.scalar_params],
            "scalar_v": [self._sv[id(p)].tolist() for p in self.group.scalar_params],
        }

    def load_state_dict(self, state: dict) -> None:
        _check_header(state, self.kind)
        self.t = state["t"]
        self.beta1 = state["beta1"]
        self.beta2 = state["beta2"]
        self.eps = state["eps"]
        self.lr_vector = LrSchedule(**state["lr_vector"])
        self.lr_scalar = LrSchedule(**state["lr_scalar"])
        for w, m, v in zip(self.group.vector_params, state["vector_m"], state["vector_v"]):
            self._vm[id(w)] = np.asarray(m, dtype=np.float64).reshape(w.data.shape)
            self._vv[id(w)] = np.asarray(v, dtype=np.float64).reshape(-1)
        for p, m, v in zip(self.group.scalar_params, state["scalar_m"], state["scalar_v"]):
            self._sm[id(p)] = np.asarray(m, dtype=np.float64).reshape(p.data.shape)
            self._sv[id(p)] = np.asarray(v, dtype=np.float64).reshape(p.data.shape)


def _check_header(state: dict, kind: str) -> None:
    if state.get("version") != 1:
        raise ValueError(f"unsupported checkpoint version {state.get('version')!r}")
    if state.get("kind") != kind:
        raise ValueError(f"checkpoint kind {state.get('kind')!r} does not match {kind!r}")


def save_checkpoint(optimizer, path) -> None:
    """Write the optimizer state as JSON; floats round-trip exactly."""
    with open(path, "w") as f:
        json.dump(optimizer.state_dict(), f)


def load_checkpoint(optimizer, path) -> None:
    with open(path) as f:
        optimizer.load_state_dict(json.load(f))
