"""Centroid-based initialization onto a common reference template.

A global affine is least-squares fitted over region centroids, then the
per-region residual translations are attached as a sparse velocity field
(bandwidth from Silverman's rule by default). The result is a transform
chain [affine log, residual field] that composes with everything else in
the log domain and stays invertible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import LabelVolume, RegionSurface
from .svf import AffineLogTerm, SvfSample, SvfTerm, TransformChain, affine_log

logger = logging.getLogger(__name__)


@dataclass
class CentroidSet:
    """Per-region centroids (normalized units) and point counts."""

    centroids: dict[int, np.ndarray] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)

    def regions(self):
        return sorted(self.centroids)


def centroids_of_surfaces(surfaces: list[RegionSurface]) -> CentroidSet:
    """Arithmetic mean of each region surface's points."""
    cs = CentroidSet()
    for s in surfaces:
        if len(s.points) == 0:
            logger.warning("region %d has no points; omitted from centroids", s.region)
            continue
        cs.centroids[s.region] = s.points.mean(axis=0)
        cs.counts[s.region] = len(s.points)
    if not cs.centroids:
        raise ValueError("no non-empty regions")
    return cs


def centroids_of_volume(vol: LabelVolume, box_lo: np.ndarray, box_hi: np.ndarray,
                        skip_labels: tuple[int, ...] = ()) -> CentroidSet:
    """Mean voxel-center position per label, normalized by the world box."""
    lo = np.asarray(box_lo, dtype=np.float64)
    hi = np.asarray(box_hi, dtype=np.float64)
    cs = CentroidSet()
    for label in vol.labels():
        if int(label) in skip_labels:
            continue
        idx = np.argwhere(vol.data == label)
        world = vol.origin[None, :] + idx * vol.spacing[None, :]
        norm = (world - lo[None, :]) / (hi - lo)[None, :]
        cs.centroids[int(label)] = norm.mean(axis=0)
        cs.counts[int(label)] = len(idx)
    if not cs.centroids:
        raise ValueError("no non-empty regions")
    return cs


def fit_affine(moving: CentroidSet, reference: CentroidSet) -> AffineLogTerm:
    """Weighted least-squares affine over shared region centroids, as a log.

    Minimizes sum_r w_r ||A c_mov,r - c_ref,r||^2 with w_r the smaller of the
    two regions' point counts. Needs >= 4 shared regions with non-coplanar
    moving centroids.
    """
    shared = sorted(set(moving.centroids) & set(reference.centroids))
    if len(shared) < 4:
        raise ValueError("need at least 4 shared regions for an affine fit")
    cm = np.array([moving.centroids[r] for r in shared])
    cr = np.array([reference.centroids[r] for r in shared])
    w = np.array([min(moving.counts[r], reference.counts[r]) for r in shared],
                 dtype=np.float64)
    x = np.concatenate([cm, np.ones((len(shared), 1))], axis=1)  # (R,4)
    sw = np.sqrt(w)[:, None]
    xs = x * sw
    if np.linalg.matrix_rank(xs, tol=1e-9 * max(1.0, np.abs(xs).max())) < 4:
        raise ValueError("rank-deficient centroid configuration (coplanar centroids?)")
    sol, *_ = np.linalg.lstsq(xs, cr * sw, rcond=None)  # (4,3)
    a = np.eye(4)
    a[:3, :4] = sol.T
    return AffineLogTerm(affine_log(a))


def silverman_bandwidth(points: np.ndarray) -> float:
    """Silverman's rule-of-thumb bandwidth for 3D samples.

    h = (4/(d+2))^(1/(d+4)) * N^(-1/(d+4)) * sigma_hat, d = 3, with
    sigma_hat the root mean of the per-axis sample variances.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n < 2:
        raise ValueError("need at least 2 points")
    sigma_hat = np.sqrt(pts.var(axis=0, ddof=1).mean())
    if sigma_hat == 0:
        raise ValueError("all points identical; bandwidth undefined")
    d = 3
    return float((4.0 / (d + 2)) ** (1.0 / (d + 4)) * n ** (-1.0 / (d + 4)) * sigma_hat)


def polyaffine_residuals(moving: CentroidSet, reference: CentroidSet,
                         affine: AffineLogTerm, sigma: float,
                         epsilon: float = 1e-8, steps: int = 12) -> TransformChain:
    """Residual translation field on top of the global affine.

    Control points are the affine-mapped moving centroids; each carries the
    remaining offset to its reference centroid. Returns the chain
    [affine, residual field].
    """
    shared = sorted(set(moving.centroids) & set(reference.centroids))
    cm = np.array([moving.centroids[r] for r in shared])
    cr = np.array([reference.centroids[r] for r in shared])
    m = affine.matrix()
    mapped = cm @ m[:3, :3].T + m[:3, 3][None, :]
    svf = SvfSample(mapped, cr - mapped, sigma=sigma, epsilon=epsilon)
    return TransformChain([affine, SvfTerm(svf, steps=steps)])


def prealign_to_template(subject: CentroidSet, template: CentroidSet,
                         sigma: float | None = None, steps: int = 12
                         ) -> TransformChain:
    """Fit affine + polyaffine residuals mapping subject onto template."""
    aff = fit_affine(subject, template)
    if sigma is None:
        shared = sorted(set(subject.centroids) & set(template.centroids))
        sigma = silverman_bandwidth(
            np.array([subject.centroids[r] for r in shared]))
    return polyaffine_residuals(subject, template, aff, sigma, steps=steps)
