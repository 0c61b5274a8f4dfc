"""Stationary velocity fields from sparse point velocities.

A field is defined by Gaussian kernel convolution of control-point
velocities, normalized by the local kernel mass (with an epsilon guard).
Integrating it for unit time with forward Euler yields an invertible
transformation whose inverse is the integral of the negated field. Multiple
regions fuse by concatenating their control points, and transformations
compose as ordered chains of affine-log and velocity-field terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import expm, logm
from scipy.spatial import cKDTree

DEFAULT_SIGMA = 1e-2
DEFAULT_EPSILON = 1e-8


@dataclass
class SvfSample:
    """Sparse velocity sample: control points, velocities, kernel bandwidth."""

    control_points: np.ndarray
    velocities: np.ndarray
    sigma: float = DEFAULT_SIGMA
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        self.control_points = np.asarray(self.control_points, dtype=np.float64).reshape(-1, 3)
        self.velocities = np.asarray(self.velocities, dtype=np.float64).reshape(-1, 3)
        if len(self.control_points) != len(self.velocities):
            raise ValueError("control point / velocity count mismatch")
        if len(self.control_points) < 1:
            raise ValueError("need at least one control point")
        if not (self.sigma > 0 and self.epsilon > 0):
            raise ValueError("sigma and epsilon must be positive")
        if not (np.isfinite(self.control_points).all()
                and np.isfinite(self.velocities).all()):
            raise ValueError("non-finite control points or velocities")


@dataclass
class AffineLogTerm:
    """Matrix logarithm of a homogeneous 4x4 affine, with a sign factor."""

    log_matrix: np.ndarray
    sign: float = 1.0

    def __post_init__(self):
        self.log_matrix = np.asarray(self.log_matrix, dtype=np.float64).reshape(4, 4)

    def matrix(self) -> np.ndarray:
        m = expm(self.sign * self.log_matrix)
        if not np.isfinite(m).all():
            raise ValueError("affine exponential is not finite")
        return m


@dataclass
class SvfTerm:
    """A velocity-field term of a chain, with a sign factor (for inverses)."""

    svf: SvfSample
    sign: float = 1.0
    steps: int = 12

    def signed(self) -> SvfSample:
        return replace(self.svf, velocities=self.sign * self.svf.velocities)


@dataclass
class TransformChain:
    """Ordered composition of affine-log and SVF terms; first term acts first."""

    terms: list = field(default_factory=list)

    def inverted(self) -> "TransformChain":
        out = []
        for t in reversed(self.terms):
            if isinstance(t, AffineLogTerm):
                out.append(AffineLogTerm(t.log_matrix, -t.sign))
            else:
                out.append(SvfTerm(t.svf, -t.sign, t.steps))
        return TransformChain(out)


@dataclass
class GridField:
    """Regular evaluation grid carrying one 3-vector per node."""

    dims: tuple[int, int, int]
    spacing: np.ndarray
    origin: np.ndarray
    values: np.ndarray | None = None


def _weights(svf: SvfSample, queries: np.ndarray) -> np.ndarray:
    diff = queries[:, None, :] - svf.control_points[None, :, :]
    d2 = np.einsum("mnc,mnc->mn", diff, diff)
    return np.exp(-d2 / (2.0 * svf.sigma ** 2))


def eval_velocity(svf: SvfSample, queries: np.ndarray,
                  cutoff_radius: float | None = None) -> np.ndarray:
    """Evaluate the normalized kernel-convolution field at the query points.

    V(x) = sum_i K(||x-p_i||) v_i / (eps + sum_i K(||x-p_i||)) with a
    Gaussian K of bandwidth sigma. The default path is exact; passing a
    cutoff radius switches to a KD-tree evaluation that ignores controls
    beyond the cutoff (an inference-only approximation).
    """
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if not np.isfinite(queries).all():
        raise ValueError("non-finite query points")
    if cutoff_radius is not None:
        return _eval_velocity_tree(svf, queries, cutoff_radius)
    n = len(svf.control_points)
    chunk = max(1, 4_000_000 // max(n, 1))
    if len(queries) <= chunk:
        w = _weights(svf, queries)
        return (w @ svf.velocities) / (svf.epsilon + w.sum(axis=1))[:, None]
    out = np.empty_like(queries)
    for start in range(0, len(queries), chunk):
        w = _weights(svf, queries[start:start + chunk])
        out[start:start + chunk] = (w @ svf.velocities) / (
            svf.epsilon + w.sum(axis=1))[:, None]
    return out


def _eval_velocity_tree(svf: SvfSample, queries: np.ndarray,
                        cutoff_radius: float) -> np.ndarray:
    tree = cKDTree(svf.control_points)
    groups = tree.query_ball_point(queries, cutoff_radius, return_sorted=True)
    counts = np.fromiter((len(g) for g in groups), dtype=np.int64,
                         count=len(groups))
    if counts.sum() == 0:
        return np.zeros_like(queries)
    flat_ctrl = np.concatenate([np.asarray(g, dtype=np.int64)
                                for g in groups if g])
    flat_query = np.repeat(np.arange(len(queries)), counts)
    diff = queries[flat_query] - svf.control_points[flat_ctrl]
    w = np.exp(-(diff * diff).sum(axis=1) / (2.0 * svf.sigma ** 2))
    num = np.zeros_like(queries)
    np.add.at(num, flat_query, w[:, None] * svf.velocities[flat_ctrl])
    den = np.full(len(queries), svf.epsilon)
    np.add.at(den, flat_query, w)
    return num / den[:, None]


def exp_svf(svf: SvfSample, queries: np.ndarray, steps: int = 12,
            cutoff_radius: float | None = None,
            return_trajectory: bool = False):
    """Integrate the field for unit time with forward Euler from the queries."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.asarray(queries, dtype=np.float64).reshape(-1, 3).copy()
    h = 1.0 / steps
    traj = [x.copy()]
    for k in range(steps):
        x = x + h * eval_velocity(svf, x, cutoff_radius=cutoff_radius)
        if not np.isfinite(x).all():
            raise FloatingPointError(f"non-finite positions at Euler step {k + 1}")
        if return_trajectory:
            traj.append(x.copy())
    if return_trajectory:
        return x, traj
    return x


def exp_svf_backward(svf: SvfSample, queries: np.ndarray, steps: int,
                     upstream_grads: np.ndarray) -> np.ndarray:
    """Reverse-mode gradient of exp_svf's output w.r.t. the velocities.

    Replays the Euler trajectory and back-propagates through both the direct
    velocity terms and the dependence of kernel weights on the moving
    positions across steps. Control points are treated as constants.
    """
    upstream = np.asarray(upstream_grads, dtype=np.float64).reshape(-1, 3)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if upstream.shape != queries.shape:
        raise ValueError("upstream gradient shape mismatch")
    _, traj = exp_svf(svf, queries, steps, return_trajectory=True)
    h = 1.0 / steps
    p = svf.control_points
    inv_s2 = 1.0 / (svf.sigma ** 2)
    g = upstream.copy()          # dL/dx at the current (later) time
    dv = np.zeros_like(svf.velocities)
    for k in range(steps - 1, -1, -1):
        x = traj[k]
        diff = x[:, None, :] - p[None, :, :]               # (M,N,3)
        w = np.exp(-np.einsum("mnc,mnc->mn", diff, diff) / (2.0 * svf.sigma ** 2))
        denom = svf.epsilon + w.sum(axis=1)                # (M,)
        vfield = (w @ svf.velocities) / denom[:, None]     # (M,3)
        # dL/dv_i += h * sum_m g_m * w_mi / denom_m
        dv += h * (w / denom[:, None]).T @ g
        # dL/dx_m (this step) = g + h * (dV/dx)^T g
        # dV_a/dx_b = sum_i dw_i/dx_b (v_ia - V_a) / denom,
        # dw_i/dx_b = -w_i (x_b - p_ib) / sigma^2
        gv = g @ svf.velocities.T                          # (M,N): g_m . v_i
        gV = np.einsum("mc,mc->m", g, vfield)              # (M,)
        coeff = w * (gv - gV[:, None]) / denom[:, None]    # (M,N)
        gx = -(coeff[:, :, None] * diff).sum(axis=1) * inv_s2
        g = g + h * gx
    return dv


def negate(svf: SvfSample) -> SvfSample:
    """The field of the inverse transformation: same controls, -velocities."""
    return replace(svf, velocities=-svf.velocities)


def fuse_regions(svfs: list[SvfSample]) -> SvfSample:
    """Concatenate region fields into one; normalization blends duplicates."""
    if not svfs:
        raise ValueError("no fields to fuse")
    sigma, epsilon = svfs[0].sigma, svfs[0].epsilon
    for s in svfs[1:]:
        if s.sigma != sigma or s.epsilon != epsilon:
            raise ValueError("kernel bandwidth mismatch between regions")
    return SvfSample(
        np.concatenate([s.control_points for s in svfs]),
        np.concatenate([s.velocities for s in svfs]),
        sigma, epsilon,
    )


def bch_first_order(a: SvfSample, b: SvfSample) -> SvfSample:
    """First-order combination of two fields on the union of their controls.

    Approximates log(exp(a) o exp(b)) by a + b, with each field sampled at
    the other's control points. Higher-order commutator terms are omitted.
    """
    if a.sigma != b.sigma or a.epsilon != b.epsilon:
        raise ValueError("kernel bandwidth mismatch")
    va = a.velocities + eval_velocity(b, a.control_points)
    vb = b.velocities + eval_velocity(a, b.control_points)
    return SvfSample(
        np.concatenate([a.control_points, b.control_points]),
        np.concatenate([va, vb]),
        a.sigma, a.epsilon,
    )


def affine_log(matrix: np.ndarray) -> np.ndarray:
    """Principal matrix logarithm of a homogeneous affine.

    Rejects affines whose linear part has a non-positive real eigenvalue
    (no real logarithm on the principal branch).
    """
    matrix = np.asarray(matrix, dtype=np.float64).reshape(4, 4)
    eig = np.linalg.eigvals(matrix[:3, :3])
    for ev in eig:
        if abs(ev.imag) < 1e-12 and ev.real <= 0:
            raise ValueError(
                "affine has a non-positive real eigenvalue; consider a rigid fallback")
    log = logm(matrix)
    if np.iscomplexobj(log):
        if np.abs(log.imag).max() > 1e-8:
            raise ValueError("affine logarithm is not real")
        log = log.real
    return np.ascontiguousarray(log)


def apply_chain(chain: TransformChain, points: np.ndarray,
                cutoff_radius=None) -> np.ndarray:
    """Apply each chain term in order to the points.

    cutoff_radius may be None (exact), a number, or "auto", which uses a
    4-sigma KD-tree cutoff for velocity-field terms with many controls and
    stays exact for small ones.
    """
    x = np.asarray(points, dtype=np.float64).reshape(-1, 3).copy()
    for term in chain.terms:
        if isinstance(term, AffineLogTerm):
            m = term.matrix()
            x = x @ m[:3, :3].T + m[:3, 3][None, :]
        elif isinstance(term, SvfTerm):
            if cutoff_radius == "auto":
                cutoff = (4.0 * term.svf.sigma
                          if len(term.svf.control_points) >= 64 else None)
            else:
                cutoff = cutoff_radius
            x = exp_svf(term.signed(), x, steps=term.steps,
                        cutoff_radius=cutoff)
        else:
            raise TypeError(f"unknown chain term {type(term)!r}")
        if not np.isfinite(x).all():
            raise FloatingPointError("non-finite points in chain application")
    return x


def jacobian_determinant(chain: TransformChain, grid: GridField,
                         cutoff_radius: float | None = None) -> np.ndarray:
    """Central-difference Jacobian determinants of the mapped grid positions.

    Returns one determinant per interior grid node, shape (nx-2, ny-2, nz-2).
    """
    dims = tuple(grid.dims)
    spacing = np.asarray(grid.spacing, dtype=np.float64)
    if min(dims) < 3:
        raise ValueError("need at least 3 nodes per axis for interior differences")
    if np.any(spacing <= 0):
        raise ValueError("degenerate grid spacing")
    ax = [np.asarray(grid.origin)[i] + spacing[i] * np.arange(dims[i]) for i in range(3)]
    xx, yy, zz = np.meshgrid(*ax, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    mapped = apply_chain(chain, pts, cutoff_radius=cutoff_radius).reshape(*dims, 3)
    jac = np.empty((dims[0] - 2, dims[1] - 2, dims[2] - 2, 3, 3))
    sl = slice(1, -1)
    jac[..., 0] = (mapped[2:, sl, sl] - mapped[:-2, sl, sl]) / (2 * spacing[0])
    jac[..., 1] = (mapped[sl, 2:, sl] - mapped[sl, :-2, sl]) / (2 * spacing[1])
    jac[..., 2] = (mapped[sl, sl, 2:] - mapped[sl, sl, :-2]) / (2 * spacing[2])
    return np.linalg.det(jac)
