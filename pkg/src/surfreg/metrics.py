"""Evaluation metrics: Jaccard overlap, interface surface distances, memory."""

from __future__ import annotations

import logging
import resource
import sys

import numpy as np
from scipy.spatial import cKDTree

from .geometry import LabelVolume, RegionSurface, extract_interfaces

logger = logging.getLogger(__name__)


def jaccard(a: LabelVolume, b: LabelVolume, label: int) -> float:
    """Intersection over union of one label's voxel supports."""
    if a.dims != b.dims:
        raise ValueError("volumes have different grids")
    ma = a.data == label
    mb = b.data == label
    union = np.logical_or(ma, mb).sum()
    if union == 0:
        logger.warning("label %d empty in both volumes; Jaccard defined as 1", label)
        return 1.0
    return float(np.logical_and(ma, mb).sum() / union)


def symmetric_surface_distance(p: np.ndarray, q: np.ndarray,
                               brute_force: bool = False) -> float:
    """Symmetric mean of non-squared nearest-neighbor distances."""
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    if brute_force or len(p) * len(q) <= 4096:
        d2 = ((p[:, None, :] - q[None, :, :]) ** 2).sum(axis=2)
        d_pq = np.sqrt(d2.min(axis=1))
        d_qp = np.sqrt(d2.min(axis=0))
    else:
        ipq = cKDTree(q).query(p)[1]
        iqp = cKDTree(p).query(q)[1]
        d_pq = np.sqrt(((p - q[ipq]) ** 2).sum(axis=1))
        d_qp = np.sqrt(((q - p[iqp]) ** 2).sum(axis=1))
    return float((d_pq.mean() + d_qp.mean()) / 2.0)


def interface_chamfer_report(moved: list[RegionSurface],
                             reference: list[RegionSurface],
                             box_lo: np.ndarray, box_hi: np.ndarray,
                             moved_background: RegionSurface | None = None,
                             reference_background: RegionSurface | None = None
                             ) -> dict[tuple[int, int], float]:
    """Per region-pair surface distance (mm) between moved and reference interfaces.

    Only pairs adjacent on both sides are reported. Normalized coordinates
    are scaled back to world millimeters per axis before measuring.
    """
    scale = np.asarray(box_hi, dtype=np.float64) - np.asarray(box_lo, dtype=np.float64)
    ifaces_m = extract_interfaces(moved, moved_background)
    ifaces_r = extract_interfaces(reference, reference_background)
    common = sorted(set(ifaces_m) & set(ifaces_r))
    if not common:
        logger.warning("no region pair adjacent in both volumes")
        return {}
    report = {}
    for key in common:
        pm = ifaces_m[key] * scale[None, :]
        pr = ifaces_r[key] * scale[None, :]
        report[key] = symmetric_surface_distance(pm, pr)
    return report


def aggregate(report: dict[tuple[int, int], float]) -> dict[str, float]:
    vals = np.array(sorted(report.values()))
    if len(vals) == 0:
        return {"mean": float("nan"), "median": float("nan"), "count": 0}
    return {"mean": float(vals.mean()), "median": float(np.median(vals)),
            "count": len(vals)}


def peak_memory_bytes() -> int | None:
    """Peak resident set size of this process, or None if unavailable."""
    try:
        peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    except (ValueError, OSError):  # pragma: no cover
        return None
    # ru_maxrss is kilobytes on Linux, bytes on macOS
    return peak if sys.platform == "darwin" else peak * 1024


def memory_report(phase: str) -> dict:
    peak = peak_memory_bytes()
    if peak is None:  # pragma: no cover
        return {"phase": phase, "peak_bytes": "unavailable"}
    return {"phase": phase, "peak_bytes": peak}
