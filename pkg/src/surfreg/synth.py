"""Synthetic labeled volumes with known ground-truth deformations.

A fixed template (nested ellipsoid shells around a core partitioned into
blob regions) is warped by a random invertible transform chain per subject.
Because the chain is returned alongside the volume, synthetic pairs come
with exact point correspondences for target-registration-error oracles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import LabelVolume
from .svf import (AffineLogTerm, GridField, SvfSample, SvfTerm, TransformChain,
                  affine_log, jacobian_determinant)


@dataclass
class SyntheticSpec:
    """Knobs for the generator; defaults give 64^3 volumes with 6 regions."""

    grid: int = 64
    regions: int = 6
    magnitude: float = 0.04      # max ground-truth velocity, normalized units
    bandwidth: float = 0.08      # ground-truth kernel sigma, normalized units
    controls: int = 48
    affine_jitter: float = 0.06  # rotation (rad), log-scale, translation range
    steps: int = 12
    template_seed: int = 1234

    def __post_init__(self):
        if self.regions < 2:
            raise ValueError("need at least 2 regions")
        if self.magnitude / self.steps >= self.bandwidth:
            raise ValueError("per-step displacement must stay below the bandwidth")


def template_volume(spec: SyntheticSpec) -> LabelVolume:
    """Deterministic template: two ellipsoid shells + blob-partitioned core."""
    n = spec.grid
    rng = np.random.default_rng(spec.template_seed)
    idx = np.stack(np.meshgrid(*[np.arange(n)] * 3, indexing="ij"), axis=-1)
    center = (n - 1) / 2.0
    rel = (idx - center) / n

    semi_out = np.array([0.42, 0.38, 0.35])
    semi_in = np.array([0.30, 0.27, 0.25])
    semi_core = np.array([0.19, 0.17, 0.16])
    r_out = ((rel / semi_out) ** 2).sum(axis=-1)
    r_in = ((rel / semi_in) ** 2).sum(axis=-1)
    r_core = ((rel / semi_core) ** 2).sum(axis=-1)

    data = np.zeros((n, n, n), dtype=np.int32)
    data[(r_out <= 1) & (r_in > 1)] = 1
    data[(r_in <= 1) & (r_core > 1)] = 2
    k_core = spec.regions - 2
    if k_core > 0:
        seeds = rng.uniform(-0.12, 0.12, size=(k_core, 3))
        core = r_core <= 1
        d2 = ((rel[core][:, None, :] - seeds[None, :, :]) ** 2).sum(axis=-1)
        data[core] = 3 + d2.argmin(axis=1).astype(np.int32)
    return LabelVolume(data, np.ones(3), np.zeros(3))


def random_chain(spec: SyntheticSpec, rng: np.random.Generator) -> TransformChain:
    """Small random affine + random velocity field, in normalized coordinates."""
    j = spec.affine_jitter
    angles = rng.uniform(-j, j, size=3)
    scales = np.exp(rng.uniform(-j, j, size=3))
    shift = rng.uniform(-j / 2, j / 2, size=3)
    rx, ry, rz = (_rot(0, angles[0]), _rot(1, angles[1]), _rot(2, angles[2]))
    linear = rx @ ry @ rz @ np.diag(scales)
    a = np.eye(4)
    a[:3, :3] = linear
    # rotate/scale about the domain center, then shift
    a[:3, 3] = 0.5 - linear @ np.full(3, 0.5) + shift
    ctrl = rng.uniform(0.15, 0.85, size=(spec.controls, 3))
    v = rng.uniform(-1, 1, size=(spec.controls, 3))
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    v = v / np.maximum(norm, 1e-12) * rng.uniform(0, spec.magnitude, size=(spec.controls, 1))
    svf = SvfSample(ctrl, v, sigma=spec.bandwidth)
    return TransformChain([AffineLogTerm(affine_log(a)),
                           SvfTerm(svf, steps=spec.steps)])


def _rot(axis: int, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    m = np.eye(3)
    i, j = [(1, 2), (0, 2), (0, 1)][axis]
    m[i, i] = c
    m[j, j] = c
    m[i, j] = -s
    m[j, i] = s
    return m


def synth_subject(spec: SyntheticSpec, seed: int, max_tries: int = 10
                  ) -> tuple[LabelVolume, TransformChain]:
    """Template warped by a verified positive-Jacobian random chain."""
    from .pipeline import warp_labels  # local import; pipeline depends on us

    template = template_volume(spec)
    lo, hi = template.world_box()
    for attempt in range(max_tries):
        rng = np.random.default_rng((spec.template_seed, seed, attempt))
        chain = random_chain(spec, rng)
        probe = GridField((12, 12, 12), np.full(3, 1.0 / 11), np.zeros(3))
        det = jacobian_determinant(chain, probe)
        if det.min() > 0:
            vol = warp_labels(template, chain, template, lo, hi)
            return vol, chain
    raise RuntimeError("could not draw a diffeomorphic ground-truth chain")
