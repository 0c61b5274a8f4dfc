"""Boundary-surface extraction and mesh processing for labeled volumes.

Regions are extracted one by one as iso-0.5 surfaces of their binary masks,
with vertices placed at exact grid-edge midpoints so that adjacent regions
produce bit-identical points along their shared interface. The per-region
meshes are then merged into one stitched mesh, smoothed as a whole (keeping
interfaces consistent), split back into regions, and brought to fixed
point/simplex counts by quadric decimation plus random duplication.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from skimage import measure


class EmptyRegionError(ValueError):
    """Raised when a requested label does not occur in the volume."""


@dataclass
class LabelVolume:
    """3D integer label grid with world spacing and origin.

    data is indexed [x, y, z]; label 0 is background. World coordinates of
    voxel centers are origin + index * spacing.
    """

    data: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data)
        self.spacing = np.asarray(self.spacing, dtype=np.float64)
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError("label volume must be 3D")
        if np.any(self.spacing <= 0):
            raise ValueError("spacing must be strictly positive")
        if self.data.min() < 0:
            raise ValueError("labels must be non-negative")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def labels(self) -> np.ndarray:
        """Sorted nonzero labels present in the volume."""
        lab = np.unique(self.data)
        return lab[lab > 0]

    def world_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned world bounding box of the voxel grid (voxel extents)."""
        lo = self.origin - 0.5 * self.spacing
        hi = self.origin + (np.array(self.dims) - 0.5) * self.spacing
        return lo, hi


@dataclass
class Mesh:
    """Triangle mesh: points (n,3), simplices (m,3), optional per-face region."""

    points: np.ndarray
    simplices: np.ndarray
    face_region: np.ndarray | None = None
    clipped: bool = False  # True when the source region touched the volume border

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.simplices = np.asarray(self.simplices, dtype=np.int64).reshape(-1, 3)
        if self.simplices.size:
            if self.simplices.max() >= len(self.points):
                raise ValueError("simplex index out of range")
            if np.any(
                (self.simplices[:, 0] == self.simplices[:, 1])
                | (self.simplices[:, 1] == self.simplices[:, 2])
                | (self.simplices[:, 0] == self.simplices[:, 2])
            ):
                raise ValueError("degenerate simplex with repeated vertex")
        if self.face_region is not None:
            self.face_region = np.asarray(self.face_region, dtype=np.int64)
            if len(self.face_region) != len(self.simplices):
                raise ValueError("face_region length mismatch")


@dataclass
class RegionSurface:
    """Fixed-size region surface in normalized [0,1] coordinates.

    Points beyond the decimated core are duplicates; duplicated_from maps
    each appended point index to its source index. Simplices reference only
    non-duplicated points.
    """

    region: int
    points: np.ndarray
    simplices: np.ndarray
    duplicated_from: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.simplices = np.asarray(self.simplices, dtype=np.int64).reshape(-1, 3)

    @property
    def core_count(self) -> int:
        return len(self.points) - len(self.duplicated_from)


def extract_region_surface(vol: LabelVolume, label: int) -> Mesh:
    """Extract the iso-0.5 boundary of {data == label} with midpoint vertices.

    Every vertex sits at the exact midpoint of a grid edge whose endpoints
    differ in mask membership, so adjacent regions share bit-identical
    interface vertices. A region touching the volume border yields a clipped
    (non-closed) surface, flagged on the output.
    """
    mask = vol.data == label
    if not mask.any():
        raise EmptyRegionError(f"label {label} absent from volume")
    touches = (
        mask[0].any() or mask[-1].any()
        or mask[:, 0].any() or mask[:, -1].any()
        or mask[:, :, 0].any() or mask[:, :, -1].any()
    )
    # Binary 0/1 samples at level 0.5 put every crossing exactly at the edge
    # midpoint, which keeps interface vertices bit-identical across regions.
    verts, faces, _, _ = measure.marching_cubes(mask.astype(np.float64), level=0.5)
    world = vol.origin[None, :] + verts * vol.spacing[None, :]
    face_region = np.full(len(faces), label, dtype=np.int64)
    return Mesh(world, faces, face_region, clipped=bool(touches))


def merge_and_stitch(meshes: list[Mesh]) -> Mesh:
    """Merge region meshes, unifying vertices with exactly equal coordinates."""
    if not meshes:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64),
                    np.zeros(0, dtype=np.int64))
    index: dict[tuple, int] = {}
    points: list[tuple] = []
    all_faces = []
    all_regions = []
    clipped = False
    for mesh in meshes:
        remap = np.empty(len(mesh.points), dtype=np.int64)
        for i, p in enumerate(mesh.points):
            key = (p[0], p[1], p[2])
            j = index.get(key)
            if j is None:
                j = len(points)
                index[key] = j
                points.append(key)
            remap[i] = j
        all_faces.append(remap[mesh.simplices])
        if mesh.face_region is None:
            raise ValueError("merge_and_stitch requires region-tagged meshes")
        all_regions.append(mesh.face_region)
        clipped = clipped or mesh.clipped
    return Mesh(
        np.array(points, dtype=np.float64).reshape(-1, 3),
        np.concatenate(all_faces),
        np.concatenate(all_regions),
        clipped=clipped,
    )


def _adjacency(n_points: int, simplices: np.ndarray) -> sparse.csr_matrix:
    i = np.concatenate([simplices[:, 0], simplices[:, 1], simplices[:, 2],
                        simplices[:, 1], simplices[:, 2], simplices[:, 0]])
    j = np.concatenate([simplices[:, 1], simplices[:, 2], simplices[:, 0],
                        simplices[:, 0], simplices[:, 1], simplices[:, 2]])
    a = sparse.coo_matrix((np.ones(len(i)), (i, j)), shape=(n_points, n_points))
    a = a.tocsr()
    a.data[:] = 1.0  # drop duplicate-edge multiplicities
    return a


def smooth(mesh: Mesh, iterations: int = 100, lambda_pass: float = 0.5,
           mu_pass: float = -0.53) -> Mesh:
    """Taubin lambda|mu smoothing with the uniform graph Laplacian.

    Connectivity is unchanged; isolated vertices stay put. Run on the merged
    mesh so region interfaces move consistently.
    """
    pts = mesh.points.copy()
    if iterations <= 0 or len(mesh.simplices) == 0:
        return Mesh(pts, mesh.simplices.copy(),
                    None if mesh.face_region is None else mesh.face_region.copy(),
                    clipped=mesh.clipped)
    adj = _adjacency(len(pts), mesh.simplices)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    inv_deg = np.where(deg > 0, 1.0 / np.maximum(deg, 1), 0.0)
    moving = deg > 0
    for _ in range(iterations):
        for factor in (lambda_pass, mu_pass):
            lap = inv_deg[:, None] * (adj @ pts) - pts
            lap[~moving] = 0.0
            pts = pts + factor * lap
    return Mesh(pts, mesh.simplices.copy(),
                None if mesh.face_region is None else mesh.face_region.copy(),
                clipped=mesh.clipped)


def split_by_region(merged: Mesh) -> list[tuple[int, Mesh]]:
    """Split a stitched mesh into per-region meshes (shared vertices copied)."""
    if merged.face_region is None:
        raise ValueError("split_by_region requires face_region")
    out = []
    for region in np.unique(merged.face_region):
        sel = merged.face_region == region
        faces = merged.simplices[sel]
        used = np.unique(faces)
        remap = np.full(len(merged.points), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        out.append((int(region), Mesh(merged.points[used], remap[faces],
                                      np.full(sel.sum(), region, dtype=np.int64),
                                      clipped=merged.clipped)))
    return out


def laplacian_residual(mesh: Mesh) -> float:
    """Sum of squared uniform-Laplacian residuals (smoothness measure)."""
    adj = _adjacency(len(mesh.points), mesh.simplices)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    inv_deg = np.where(deg > 0, 1.0 / np.maximum(deg, 1), 0.0)
    lap = inv_deg[:, None] * (adj @ mesh.points) - mesh.points
    lap[deg == 0] = 0.0
    return float((lap ** 2).sum())


def _vertex_quadrics(points: np.ndarray, simplices: np.ndarray) -> np.ndarray:
    """Accumulate the fundamental error quadric of each vertex's faces."""
    q = np.zeros((len(points), 4, 4))
    p0 = points[simplices[:, 0]]
    p1 = points[simplices[:, 1]]
    p2 = points[simplices[:, 2]]
    n = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(n, axis=1)
    ok = norm > 1e-300
    n = np.where(ok[:, None], n / np.maximum(norm, 1e-300)[:, None], 0.0)
    d = -(n * p0).sum(axis=1)
    plane = np.concatenate([n, d[:, None]], axis=1)  # (m,4)
    kp = plane[:, :, None] * plane[:, None, :]       # (m,4,4)
    for c in range(3):
        np.add.at(q, simplices[:, c], kp)
    return q


def _quadric_cost(q: np.ndarray, p: np.ndarray) -> float:
    h = np.array([p[0], p[1], p[2], 1.0])
    return float(h @ q @ h)


def decimate_and_fix_counts(mesh: Mesh, target_points: int, target_simplices: int,
                            rng_seed: int, box_lo: np.ndarray,
                            box_hi: np.ndarray) -> RegionSurface:
    """Quadric edge-collapse to the targets, then random duplication up to them.

    Collapses move an edge onto one of its endpoints (whichever has lower
    quadric cost), so surviving coordinates are a subset of the input ones
    and exact interface sharing across regions is preserved. Cost ties break
    toward the lowest vertex index. Output coordinates are normalized to
    [0,1] by the given world box.
    """
    if len(mesh.points) < 4:
        raise ValueError("mesh has fewer than 4 points")
    if target_points < 4:
        raise ValueError("target_points must be >= 4")
    region = int(mesh.face_region[0]) if mesh.face_region is not None and len(mesh.face_region) else 0
    points = mesh.points.copy()
    faces = {i: tuple(f) for i, f in enumerate(mesh.simplices)}
    vert_faces: dict[int, set[int]] = {i: set() for i in range(len(points))}
    for fi, f in faces.items():
        for v in f:
            vert_faces[v].add(fi)
    quadrics = _vertex_quadrics(points, mesh.simplices)
    alive = np.ones(len(points), dtype=bool)
    alive[[i for i in range(len(points)) if not vert_faces[i]]] = False

    def edge_entry(a: int, b: int):
        a, b = (a, b) if a < b else (b, a)
        qsum = quadrics[a] + quadrics[b]
        ca = _quadric_cost(qsum, points[a])
        cb = _quadric_cost(qsum, points[b])
        # keep-the-endpoint collapse; lower index wins ties
        if cb < ca:
            cost, keep, drop = cb, b, a
        else:
            cost, keep, drop = ca, a, b
        return (cost, a, b, keep, drop)

    heap = []
    seen_edges = set()
    for f in faces.values():
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            e = (a, b) if a < b else (b, a)
            if e not in seen_edges:
                seen_edges.add(e)
                heap.append(edge_entry(*e))
    heapq.heapify(heap)

    n_pts = int(alive.sum())
    n_fcs = len(faces)

    while heap:
        if n_pts <= target_points and n_fcs <= target_simplices:
            break
        cost, a, b, keep, drop = heapq.heappop(heap)
        if not (alive[a] and alive[b]):
            continue
        if drop not in vert_faces or keep not in vert_faces:
            continue
        shared = vert_faces[drop] & vert_faces[keep]
        if not shared:
            continue  # pair no longer forms an edge
        entry = edge_entry(a, b)
        if entry[0] != cost or entry[3] != keep:
            heapq.heappush(heap, entry)  # stale cost; re-rank
            continue
        # collapse: faces on the edge vanish, others re-point drop -> keep
        alive[drop] = False
        n_pts -= 1
        quadrics[keep] = quadrics[keep] + quadrics[drop]
        for fi in list(vert_faces[drop]):
            f = faces.get(fi)
            if f is None:
                continue
            if fi in shared:
                for v in f:
                    vert_faces[v].discard(fi)
                del faces[fi]
                n_fcs -= 1
                continue
            nf = tuple(keep if v == drop else v for v in f)
            if len(set(nf)) < 3:
                for v in f:
                    vert_faces[v].discard(fi)
                del faces[fi]
                n_fcs -= 1
                continue
            faces[fi] = nf
            vert_faces[drop].discard(fi)
            vert_faces[keep].add(fi)
        del vert_faces[drop]
        if not vert_faces.get(keep):
            alive[keep] = False
            n_pts -= 1
        else:
            # refresh edges incident to keep
            nbrs = set()
            for fi in vert_faces[keep]:
                for v in faces[fi]:
                    if v != keep:
                        nbrs.add(v)
            for v in nbrs:
                heapq.heappush(heap, edge_entry(keep, v))

    # drop vertices that lost all faces
    for i in np.nonzero(alive)[0]:
        if not vert_faces.get(int(i)):
            alive[i] = False

    live = np.nonzero(alive)[0]
    remap = np.full(len(points), -1, dtype=np.int64)
    remap[live] = np.arange(len(live))
    out_points = points[live]
    out_faces = np.array([[remap[v] for v in f] for f in sorted(faces.values())],
                         dtype=np.int64).reshape(-1, 3)

    rng = np.random.default_rng(rng_seed)
    if len(out_faces) > target_simplices or len(out_points) > target_points:
        raise RuntimeError("decimation failed to reach targets")
    if len(out_faces) < target_simplices:
        extra = rng.integers(0, len(out_faces), size=target_simplices - len(out_faces))
        out_faces = np.concatenate([out_faces, out_faces[extra]])
    duplicated_from: dict[int, int] = {}
    core = len(out_points)
    if core < target_points:
        src = rng.integers(0, core, size=target_points - core)
        for k, s in enumerate(src):
            duplicated_from[core + k] = int(s)
        out_points = np.concatenate([out_points, out_points[src]])

    lo = np.asarray(box_lo, dtype=np.float64)
    hi = np.asarray(box_hi, dtype=np.float64)
    norm = (out_points - lo[None, :]) / (hi - lo)[None, :]
    return RegionSurface(region, norm, out_faces, duplicated_from)


def extract_interfaces(surfaces: list[RegionSurface],
                       background: RegionSurface | None = None
                       ) -> dict[tuple[int, int], np.ndarray]:
    """Points shared (exact coordinates) between each pair of region surfaces.

    Pairs are unordered and distinct; empty intersections are omitted. The
    optional background surface participates as pseudo-region 0.
    """
    all_surfaces = list(surfaces)
    if background is not None:
        all_surfaces.append(background)
    coord_sets = []
    for s in all_surfaces:
        coord_sets.append({tuple(p) for p in s.points})
    out: dict[tuple[int, int], np.ndarray] = {}
    for i in range(len(all_surfaces)):
        for j in range(i + 1, len(all_surfaces)):
            ri = all_surfaces[i].region if all_surfaces[i] is not background else 0
            rj = all_surfaces[j].region if all_surfaces[j] is not background else 0
            if ri == rj:
                continue
            common = coord_sets[i] & coord_sets[j]
            if common:
                key = (min(ri, rj), max(ri, rj))
                out[key] = np.array(sorted(common), dtype=np.float64)
    return out


def preprocess_volume(vol: LabelVolume, target_points: int, target_simplices: int,
                      box_lo: np.ndarray, box_hi: np.ndarray, seed: int = 0,
                      smooth_iterations: int = 100, skip_labels: tuple[int, ...] = ()
                      ) -> list[RegionSurface]:
    """Full surface pipeline: extract, stitch, smooth, split, fix counts."""
    meshes = []
    for label in vol.labels():
        if int(label) in skip_labels:
            continue
        meshes.append(extract_region_surface(vol, int(label)))
    merged = merge_and_stitch(meshes)
    smoothed = smooth(merged, iterations=smooth_iterations)
    surfaces = []
    for region, mesh in split_by_region(smoothed):
        surfaces.append(decimate_and_fix_counts(
            mesh, target_points, target_simplices,
            rng_seed=seed * 10007 + region, box_lo=box_lo, box_hi=box_hi))
    return surfaces
