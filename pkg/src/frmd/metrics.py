"""Evaluation metrics: motion smoothness, success rates, inference timing.

Smoothness follows the circumscribed-circle (Menger) curvature of consecutive
point triples; a trace point is non-smooth when its curvature exceeds k_max.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ReportError

__all__ = [
    "SmoothnessReport",
    "LatencyStats",
    "EvalReport",
    "curvature",
    "nonsmooth_count",
    "success_rate",
    "bench_inference",
    "assemble_report",
]

#: Consecutive displacements shorter than this are treated as stationary;
#: curvature estimates from sub-resolution steps are noise, not geometry.
DEGENERATE_TOL = 1e-3

DEFAULT_K_MAX = 1.0


@dataclass
class SmoothnessReport:
    curvatures: np.ndarray
    k_max: float
    nonsmooth_indices: np.ndarray
    degenerate: np.ndarray

    @property
    def nonsmooth_count(self) -> int:
        return int(len(self.nonsmooth_indices))


@dataclass
class LatencyStats:
    mean_ms: float
    std_ms: float
    min_ms: float
    max_ms: float
    samples_ms: list[float] = field(default_factory=list)


@dataclass
class EvalReport:
    tasks: dict
    latency: dict
    smoothness: dict
    metadata: dict


def curvature(trace: np.ndarray, degenerate_tol: float = DEGENERATE_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Menger curvature at each interior point of a 2-D polyline.

    Returns (k, degenerate): k[i] is the reciprocal circumradius of points
    (i, i+1, i+2); triples with any side shorter than degenerate_tol get
    k = 0 and a raised degeneracy flag, so dwell segments never register as
    corners.  Collinear triples give 0 naturally (zero triangle area).
    """
    trace = np.asarray(trace, dtype=float)
    if trace.ndim != 2 or trace.shape[1] != 2 or trace.shape[0] < 3:
        raise ValueError(f"trace must be (n>=3, 2), got {trace.shape}")
    p, q, r = trace[:-2], trace[1:-1], trace[2:]
    a = np.linalg.norm(q - p, axis=1)
    b = np.linalg.norm(r - q, axis=1)
    c = np.linalg.norm(r - p, axis=1)
    cross = (q[:, 0] - p[:, 0]) * (r[:, 1] - p[:, 1]) - (q[:, 1] - p[:, 1]) * (r[:, 0] - p[:, 0])
    degenerate = (a < degenerate_tol) | (b < degenerate_tol) | (c < degenerate_tol)
    denom = a * b * c
    k = np.zeros(len(denom))
    ok = ~degenerate & (denom > 0.0)
    k[ok] = 2.0 * np.abs(cross[ok]) / denom[ok]
    return k, degenerate


def nonsmooth_count(
    trace: np.ndarray,
    k_max: float = DEFAULT_K_MAX,
    degenerate_tol: float = DEGENERATE_TOL,
) -> SmoothnessReport:
    """Threshold the curvature sequence and collect offending interior indices."""
    k, degenerate = curvature(trace, degenerate_tol)
    over = np.nonzero(k > k_max)[0]
    # interior point i+1 of the trace owns curvature entry i
    return SmoothnessReport(k, k_max, over + 1, degenerate)


def success_rate(results_by_seed: dict[int, Sequence[bool]]) -> tuple[float, float, dict[int, float]]:
    """Mean and population std of per-seed success fractions."""
    if not results_by_seed:
        raise ValueError("no results to aggregate")
    per_seed = {}
    for seed, flags in results_by_seed.items():
        flags = list(flags)
        if not flags:
            raise ValueError(f"seed {seed} has no episodes")
        per_seed[seed] = float(np.mean([bool(f) for f in flags]))
    rates = np.array(list(per_seed.values()))
    return float(rates.mean()), float(rates.std()), per_seed


def bench_inference(
    sample_fn: Callable[[], object],
    reps: int = 100,
    warmup: int = 3,
) -> LatencyStats:
    """Wall-clock latency of repeated calls, first ``warmup`` runs discarded."""
    if reps < 10:
        raise ValueError(f"reps must be >= 10, got {reps}")
    for _ in range(warmup):
        sample_fn()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        sample_fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    arr = np.array(samples)
    return LatencyStats(float(arr.mean()), float(arr.std()), float(arr.min()), float(arr.max()), samples)


def assemble_report(runs: list[dict]) -> EvalReport:
    """Merge per-policy evaluation runs into one report.

    Each run is a dict with keys: policy, task_kind, results_by_seed,
    and optionally latency (LatencyStats) and smoothness (list of
    per-episode SmoothnessReport).  Runs must cover a consistent task set.
    """
    if not runs:
        raise ReportError("no runs to assemble")
    kinds_per_policy: dict[str, set] = {}
    for run in runs:
        kinds_per_policy.setdefault(run["policy"], set()).add(run["task_kind"])
    kind_sets = {frozenset(v) for v in kinds_per_policy.values()}
    if len(kind_sets) > 1:
        raise ReportError(f"inconsistent task sets across policies: {kinds_per_policy}")

    tasks: dict = {}
    latency: dict = {}
    smoothness: dict = {}
    for run in runs:
        mean, std, per_seed = success_rate(run["results_by_seed"])
        tasks.setdefault(run["task_kind"], {})[run["policy"]] = {
            "success_rate_mean": mean,
            "success_rate_std": std,
            "per_seed": per_seed,
        }
        lat = run.get("latency")
        if lat is not None:
            latency.setdefault(run["policy"], {})[run["task_kind"]] = {
                "mean_ms": lat.mean_ms,
                "std_ms": lat.std_ms,
                "min_ms": lat.min_ms,
                "max_ms": lat.max_ms,
            }
        smooth = run.get("smoothness")
        if smooth is not None:
            counts = [s.nonsmooth_count for s in smooth]
            smoothness.setdefault(run["policy"], {})[run["task_kind"]] = {
                "nonsmooth_counts": counts,
                "median_nonsmooth": float(np.median(counts)),
                "nonsmooth_indices": [s.nonsmooth_indices.tolist() for s in smooth],
            }
    metadata = {}
    for run in runs:
        for key in ("seeds", "checkpoint", "config_hash"):
            if key in run:
                metadata.setdefault(key, {})[run["policy"]] = run[key]
    return EvalReport(tasks, latency, smoothness, metadata)
