"""Measurement of weight-update dynamics and softmax gradient ratios.

These routines work on parameter snapshots taken around optimizer steps;
the optimizers themselves stay measurement-free.  A recorder samples a
configurable subset of layers every ``stride`` steps and emits one CSV row
per record with a mandatory header and deterministic row order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

__all__ = [
    "DiagnosticsRecord",
    "DiagnosticsRecorder",
    "decompose_gradient",
    "projection_ratio",
    "expected_rel_update_sgd",
    "softmax_grad_ratio_probe",
]

CSV_HEADER = ["step", "layer_id", "rel_update", "proj_ratio", "l_par_norm", "l_perp_norm"]

# ties among non-target logits only matter once the scaling saturates softmax
LARGE_ETA = 10.0


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def decompose_gradient(g, w) -> tuple[np.ndarray, np.ndarray]:
    """Split ``g`` into its projection onto ``w`` and the rejection.

    Returns ``(l_par, l_perp)`` with ``l_par + l_perp == g`` exactly and the
    two parts orthogonal.
    """
    g = _as_array(g)
    w = _as_array(w)
    norm = np.linalg.norm(w)
    if norm == 0.0:
        raise ValueError("cannot decompose against a zero vector")
    unit = w / norm
    l_par = (g @ unit) * unit
    return l_par, g - l_par


def projection_ratio(delta_l, delta_p) -> float:
    """Scalar projection of ``delta_l`` on ``delta_p`` over ``|delta_p|``.

    Equals -1 when the loss component exactly cancels the decay component
    (the decay component points along ``-w``, hence the sign convention).
    """
    dl = _as_array(delta_l)
    dp = _as_array(delta_p)
    denom = float(dp @ dp)
    if denom == 0.0:
        raise ValueError("projection ratio undefined for zero decay component")
    return float(dl @ dp) / denom


def expected_rel_update_sgd(l_perp_norm: float, l_par_norm: float,
                            alpha: float, lam: float) -> float:
    """Decay-equilibrium prediction ``(|l_perp| / |l_par|) * alpha * lam``."""
    if l_par_norm <= 0.0:
        raise ValueError("prediction undefined for zero parallel component")
    return (l_perp_norm / l_par_norm) * alpha * lam


def softmax_grad_ratio_probe(logits, target: int, eta: float) -> np.ndarray:
    """Per non-target class ``|dL/dz_c| / |dL/dz_target|`` at logit scale eta.

    For cross entropy on softmax(eta * z) the ratio reduces to the softmax
    of the scaled non-target logits, so it is computed that way (max
    subtraction over the non-target classes keeps it finite at any eta).
    As eta -> 0 every ratio tends to 1/(num_classes - 1); as eta -> inf the
    largest non-target ratio tends to 1 and the rest to 0.
    """
    z = _as_array(logits).reshape(-1)
    if eta <= 0.0:
        raise ValueError(f"eta must be positive, got {eta}")
    if not 0 <= target < z.size:
        raise ValueError(f"target {target} out of range for {z.size} classes")
    if z.size < 2:
        raise ValueError("probe needs at least two classes")
    others = np.delete(z, target)
    if eta >= LARGE_ETA:
        top = np.sort(others)[-2:]
        if top[0] == top[1]:
            raise ValueError(
                "two non-target logits share the maximum; the large-eta probe "
                "requires pairwise distinct logits"
            )
    scaled = eta * others
    e = np.exp(scaled - scaled.max())
    return e / e.sum()


@dataclass
class DiagnosticsRecord:
    """One sampled measurement of a layer's update dynamics."""

    step: int
    layer_id: str
    rel_update: float
    proj_ratio: float
    l_par_norm: float
    l_perp_norm: float


def _per_column(arr: np.ndarray) -> np.ndarray:
    return arr.reshape(arr.shape[0], -1)


class DiagnosticsRecorder:
    """Collects per-layer update measurements every ``stride`` steps.

    A layer's weight matrix is read column-wise (one column per hidden
    unit).  By default a record holds the mean over the layer's units;
    ``per_unit=True`` emits one record per unit instead, with layer ids
    suffixed ``:unit<i>``.
    """

    def __init__(self, layer_ids=None, stride: int = 10, per_unit: bool = False):
        if stride < 1:
            raise ValueError("stride must be >= 1")
        self.layer_ids = None if layer_ids is None else set(layer_ids)
        self.stride = stride
        self.per_unit = per_unit
        self.records: list[DiagnosticsRecord] = []

    def wants(self, step: int, layer_id: str | None = None) -> bool:
        if step % self.stride != 0:
            return False
        return self.layer_ids is None or layer_id is None or layer_id in self.layer_ids

    def record_layer(
        self,
        step: int,
        layer_id: str,
        w_before,
        w_after,
        loss_grad=None,
        loss_delta=None,
        decay_delta=None,
    ) -> None:
        """Measure one layer from snapshots around a step.

        ``loss_delta``/``decay_delta`` are the loss and decay components of
        the applied update (available for SGD with decay); without them the
        projection ratio is recorded as NaN.
        """
        before = _per_column(_as_array(w_before))
        after = _per_column(_as_array(w_after))
        norms_before = np.linalg.norm(before, axis=0)
        rel = np.linalg.norm(after - before, axis=0) / norms_before

        if loss_grad is not None:
            gcols = _per_column(_as_array(loss_grad))
            radial = np.sum(gcols * before, axis=0) / norms_before
            l_par = np.abs(radial)
            l_perp = np.sqrt(np.maximum(np.sum(gcols * gcols, axis=0) - radial * radial, 0.0))
        else:
            l_par = np.full(before.shape[1], np.nan)
            l_perp = np.full(before.shape[1], np.nan)

        if loss_delta is not None and decay_delta is not None:
            dl = _per_column(_as_array(loss_delta))
            dp = _per_column(_as_array(decay_delta))
            denom = np.sum(dp * dp, axis=0)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.sum(dl * dp, axis=0) / denom
            ratio = np.where(denom == 0.0, np.nan, ratio)
        else:
            ratio = np.full(before.shape[1], np.nan)

        if self.per_unit:
            for i in range(before.shape[1]):
                self.records.append(
                    DiagnosticsRecord(
                        step, f"{layer_id}:unit{i}",
                        float(rel[i]), float(ratio[i]), float(l_par[i]), float(l_perp[i]),
                    )
                )
        else:
            self.records.append(
                DiagnosticsRecord(
                    step, layer_id,
                    float(np.mean(rel)), float(np.nanmean(ratio)) if not np.all(np.isnan(ratio)) else float("nan"),
                    float(np.mean(l_par)), float(np.mean(l_perp)),
                )
            )

    def rel_updates(self, layer_id: str | None = None) -> list[tuple[int, float]]:
        """(step, rel_update) pairs, optionally filtered to one layer."""
        return [
            (r.step, r.rel_update)
            for r in self.records
            if layer_id is None or r.layer_id == layer_id
        ]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(CSV_HEADER)
            for r in self.records:
                writer.writerow(
                    [r.step, r.layer_id, repr(r.rel_update), repr(r.proj_ratio),
                     repr(r.l_par_norm), repr(r.l_perp_norm)]
                )
