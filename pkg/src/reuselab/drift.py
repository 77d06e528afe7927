"""Drift scoring, layerwise statistics, and reuse-budget allocation.

A token's drift between consecutive denoising steps is one minus the cosine
of its head-0 query vectors. Layers with low average drift get a larger
share of the global reuse budget phi_bar via a temperature softmax, and
each layer's threshold tau is an order statistic of its calibration scores.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, DimensionError
from .linalg import cosine, softmax_rows

log = logging.getLogger(__name__)

# JSON spelling of the "no reuse at this layer" threshold (None in memory).
DISABLED = "disabled"


@dataclass(frozen=True)
class DriftProfile:
    """Calibration result: per-layer drift scores, quantiles, thresholds.

    ``tau_layer`` entries are floats, or None where the layer's budget
    rounded down to zero tokens (reuse disabled there).
    """

    s_layer: tuple[float, ...]
    phi_layer: tuple[float, ...]
    tau_layer: tuple  # float | None per layer
    phi_bar: float
    epsilon: float
    skipped_pairs: int = 0

    @property
    def L(self) -> int:
        return len(self.s_layer)

    def to_json(self) -> str:
        return json.dumps({
            "s_layer": list(self.s_layer),
            "phi_layer": list(self.phi_layer),
            "tau_layer": [DISABLED if t is None else t
                          for t in self.tau_layer],
            "phi_bar": self.phi_bar,
            "epsilon": self.epsilon,
            "skipped_pairs": self.skipped_pairs,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DriftProfile":
        data = json.loads(text)
        return cls(
            s_layer=tuple(data["s_layer"]),
            phi_layer=tuple(data["phi_layer"]),
            tau_layer=tuple(None if t == DISABLED else float(t)
                            for t in data["tau_layer"]),
            phi_bar=data["phi_bar"],
            epsilon=data["epsilon"],
            skipped_pairs=data["skipped_pairs"],
        )


def drift_score(x_t, x_prev) -> float:
    """1 - cosine(x_t, x_prev); 0 means no rotation, 2 means antipodal."""
    return 1.0 - cosine(x_t, x_prev)


def layerwise_drift(calibration_traces):
    """Mean drift per layer over all (step, token) pairs of all traces.

    Args:
        calibration_traces: iterable of traces; a trace is a list over
            timesteps of lists over layers of head-0 query matrices
            (token rows).

    Returns:
        (s_layer, skipped_pairs): per-layer mean drift as a float array,
        and the number of (t, i) pairs skipped because either query row
        had zero norm.

    Raises:
        DegenerateInputError: no traces, or a trace with < 2 timesteps.
    """
    traces = list(calibration_traces)
    if not traces:
        raise DegenerateInputError("calibration requires at least one trace")
    n_layers = None
    totals = None
    counts = None
    skipped = 0
    for trace in traces:
        if len(trace) < 2:
            raise DegenerateInputError(
                "calibration traces need >= 2 timesteps")
        if n_layers is None:
            n_layers = len(trace[0])
            totals = np.zeros(n_layers)
            counts = np.zeros(n_layers, dtype=np.int64)
        for prev_layers, cur_layers in zip(trace, trace[1:]):
            if len(cur_layers) != n_layers or len(prev_layers) != n_layers:
                raise DimensionError("inconsistent layer count in trace")
            for ell in range(n_layers):
                q_prev = np.asarray(prev_layers[ell], dtype=np.float64)
                q_cur = np.asarray(cur_layers[ell], dtype=np.float64)
                if q_prev.shape != q_cur.shape:
                    raise DimensionError(
                        "query shape changed between steps")
                for i in range(q_cur.shape[0]):
                    if (np.linalg.norm(q_cur[i]) == 0.0
                            or np.linalg.norm(q_prev[i]) == 0.0):
                        skipped += 1
                        continue
                    totals[ell] += drift_score(q_cur[i], q_prev[i])
                    counts[ell] += 1
    if np.any(counts == 0):
        raise DegenerateInputError(
            "a layer had no usable (step, token) pairs")
    return totals / counts, skipped


def allocate_quantiles(s_layer, phi_bar: float, epsilon: float,
                       clamp: bool = True) -> np.ndarray:
    """Per-layer reuse quantiles phi = L * phi_bar * softmax(-s / epsilon).

    Low-drift layers receive more budget. With clamp=True (the default)
    each phi is clipped into [0, 1] and clip events are logged; the
    unclamped values always sum to L * phi_bar.
    """
    s = np.asarray(s_layer, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise DimensionError("s_layer must be a non-empty vector")
    if epsilon <= 0.0:
        raise DegenerateInputError("epsilon must be > 0")
    if not 0.0 <= phi_bar <= 1.0:
        raise DegenerateInputError("phi_bar must lie in [0, 1]")
    weights = softmax_rows((-s / epsilon)[None, :])[0]
    phi = s.size * phi_bar * weights
    if clamp:
        over = int((phi > 1.0).sum())
        if over:
            log.info("allocate_quantiles: clamped %d layer(s) to 1.0", over)
        phi = np.clip(phi, 0.0, 1.0)
    return phi


def quantile_threshold(scores, phi: float):
    """The floor(phi * n)-th smallest score, or None when that is zero.

    A stable sort resolves ties, so at least floor(phi * n) scores are
    <= the returned threshold.
    """
    a = np.asarray(scores, dtype=np.float64)
    if a.ndim != 1 or a.size == 0:
        raise DimensionError("scores must be a non-empty vector")
    if not 0.0 <= phi <= 1.0:
        raise DegenerateInputError("phi must lie in [0, 1]")
    k = math.floor(phi * a.size)
    if k == 0:
        return None
    ordered = np.sort(a, kind="stable")
    return float(ordered[k - 1])


def reuse_set(q_t, q_prev, tau) -> np.ndarray:
    """Token indices whose head-0 query drift is <= tau.

    Returns an empty set when tau is the disabled sentinel (None) or when
    there is no previous step yet. Rows with zero norm on either side are
    never reused (their drift is undefined).
    """
    if tau is None or q_prev is None:
        return np.empty(0, dtype=np.int64)
    cur = np.asarray(q_t, dtype=np.float64)
    prev = np.asarray(q_prev, dtype=np.float64)
    if cur.shape != prev.shape:
        raise DimensionError(
            f"query shape mismatch: {cur.shape} vs {prev.shape}")
    keep = []
    for i in range(cur.shape[0]):
        if (np.linalg.norm(cur[i]) == 0.0
                or np.linalg.norm(prev[i]) == 0.0):
            continue
        if drift_score(cur[i], prev[i]) <= tau:
            keep.append(i)
    return np.asarray(keep, dtype=np.int64)
