"""Inference pipeline: per-region velocities, fusion, warping.

register() runs both volumes through the surface pipeline, pre-aligns each
onto the template, feeds every shared region through the velocity estimator,
fuses the per-region fields into one, and emits the full moving-to-reference
chain under the forward point-mapping convention. warp_labels() resamples a
label volume through the inverse chain (backward coordinate mapping).
"""

from __future__ import annotations

import logging

import numpy as np

from . import model as model_mod
from .geometry import LabelVolume, RegionSurface, preprocess_volume
from .model import ModelParams
from .prealign import centroids_of_volume, prealign_to_template
from .svf import (SvfSample, SvfTerm, TransformChain, apply_chain,
                  fuse_regions)
from .training import TrainConfig

logger = logging.getLogger(__name__)


def normalize_points(world: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return (np.asarray(world, dtype=np.float64) - lo[None, :]) / (hi - lo)[None, :]


def denormalize_points(norm: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return np.asarray(norm, dtype=np.float64) * (hi - lo)[None, :] + lo[None, :]


def transform_surface(surface: RegionSurface, chain: TransformChain,
                      cutoff_radius=None) -> RegionSurface:
    """Surface with every point pushed through the chain (normalized coords)."""
    return RegionSurface(surface.region,
                         apply_chain(chain, surface.points, cutoff_radius),
                         surface.simplices.copy(),
                         dict(surface.duplicated_from))


def register(moving: LabelVolume, reference: LabelVolume, params: ModelParams,
             cfg: TrainConfig, template: LabelVolume,
             skip_labels: tuple[int, ...] = (),
             moving_surfaces: list[RegionSurface] | None = None,
             reference_surfaces: list[RegionSurface] | None = None,
             smooth_iterations: int = 30) -> TransformChain:
    """Full moving-to-reference transform chain.

    The chain is [psi_moving terms, fused field, inverted psi_reference
    terms]: a moving-space point is pre-aligned onto the template, moved by
    the fused per-region field, then carried into reference space.
    """
    lo, hi = template.world_box()
    if moving_surfaces is None:
        moving_surfaces = preprocess_volume(
            moving, cfg.target_points, cfg.target_simplices, lo, hi,
            seed=cfg.seed, smooth_iterations=smooth_iterations,
            skip_labels=skip_labels)
    if reference_surfaces is None:
        reference_surfaces = preprocess_volume(
            reference, cfg.target_points, cfg.target_simplices, lo, hi,
            seed=cfg.seed + 1, smooth_iterations=smooth_iterations,
            skip_labels=skip_labels)

    template_cents = centroids_of_volume(template, lo, hi, skip_labels)
    psi_p = prealign_to_template(
        centroids_of_volume(moving, lo, hi, skip_labels), template_cents,
        steps=cfg.steps)
    psi_q = prealign_to_template(
        centroids_of_volume(reference, lo, hi, skip_labels), template_cents,
        steps=cfg.steps)

    by_region_m = {s.region: s for s in moving_surfaces}
    by_region_r = {s.region: s for s in reference_surfaces}
    only_m = sorted(set(by_region_m) - set(by_region_r))
    only_r = sorted(set(by_region_r) - set(by_region_m))
    for r in only_m + only_r:
        logger.warning("region %d present in only one volume; skipped", r)
    shared = sorted(set(by_region_m) & set(by_region_r))
    if not shared:
        raise ValueError("no shared regions between the volumes")

    fields = []
    for r in shared:
        pm = transform_surface(by_region_m[r], psi_p)
        qr = transform_surface(by_region_r[r], psi_q)
        v, _ = model_mod.forward(params, pm.points, qr.points)
        fields.append(SvfSample(pm.points, v, sigma=cfg.sigma,
                                epsilon=cfg.epsilon))
    fused = fuse_regions(fields)
    terms = list(psi_p.terms) + [SvfTerm(fused, steps=cfg.steps)]
    terms += psi_q.inverted().terms
    return TransformChain(terms)


def warp_labels(moving: LabelVolume, chain: TransformChain,
                reference_grid: LabelVolume, box_lo: np.ndarray,
                box_hi: np.ndarray, cutoff_radius="auto") -> LabelVolume:
    """Resample the moving labels onto the reference grid through the chain.

    For every reference voxel center the inverse chain gives the moving-space
    position, which is sampled with nearest-neighbor interpolation;
    out-of-domain positions map to background.
    """
    dims = reference_grid.dims
    lo = np.asarray(box_lo, dtype=np.float64)
    hi = np.asarray(box_hi, dtype=np.float64)
    ax = [reference_grid.origin[i] + reference_grid.spacing[i] * np.arange(dims[i])
          for i in range(3)]
    xx, yy, zz = np.meshgrid(*ax, indexing="ij")
    world = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    norm = normalize_points(world, lo, hi)
    src = apply_chain(chain.inverted(), norm, cutoff_radius=cutoff_radius)
    src_world = denormalize_points(src, lo, hi)
    idx = np.rint((src_world - moving.origin[None, :]) / moving.spacing[None, :]).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.array(moving.dims)[None, :]), axis=1)
    out = np.zeros(len(world), dtype=np.int32)
    ii = idx[inside]
    out[inside] = moving.data[ii[:, 0], ii[:, 1], ii[:, 2]]
    return LabelVolume(out.reshape(dims), reference_grid.spacing.copy(),
                       reference_grid.origin.copy())


def prealign_only_chain(moving: LabelVolume, reference: LabelVolume,
                        template: LabelVolume, steps: int = 12,
                        skip_labels: tuple[int, ...] = ()) -> TransformChain:
    """Baseline chain with just the two pre-alignments (no learned field)."""
    lo, hi = template.world_box()
    template_cents = centroids_of_volume(template, lo, hi, skip_labels)
    psi_p = prealign_to_template(
        centroids_of_volume(moving, lo, hi, skip_labels), template_cents, steps=steps)
    psi_q = prealign_to_template(
        centroids_of_volume(reference, lo, hi, skip_labels), template_cents, steps=steps)
    return TransformChain(list(psi_p.terms) + psi_q.inverted().terms)
