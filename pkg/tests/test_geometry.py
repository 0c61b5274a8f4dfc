import numpy as np
import pytest

from surfreg.geometry import (EmptyRegionError, LabelVolume, Mesh,
                              decimate_and_fix_counts, extract_interfaces,
                              extract_region_surface, laplacian_residual,
                              merge_and_stitch, preprocess_volume, smooth,
                              split_by_region)


def volume(data, spacing=(1, 1, 1), origin=(0, 0, 0)):
    return LabelVolume(np.asarray(data, dtype=np.int32),
                       np.array(spacing, float), np.array(origin, float))


def two_slab_volume():
    data = np.zeros((6, 6, 6), dtype=np.int32)
    data[1:5, 1:5, 1:3] = 1
    data[1:5, 1:5, 3:5] = 2
    return volume(data)


def edge_use_counts(mesh):
    counts = {}
    for tri in mesh.simplices:
        for a, b in ((0, 1), (1, 2), (2, 0)):
            e = tuple(sorted((tri[a], tri[b])))
            counts[e] = counts.get(e, 0) + 1
    return counts


class TestExtract:
    def test_single_voxel_is_octahedron(self):
        data = np.zeros((5, 5, 5), dtype=np.int32)
        data[2, 2, 2] = 7
        mesh = extract_region_surface(volume(data), 7)
        assert len(mesh.points) == 6
        assert len(mesh.simplices) == 8
        # vertices are the face-adjacent edge midpoints of the voxel
        expected = {(1.5, 2, 2), (2.5, 2, 2), (2, 1.5, 2),
                    (2, 2.5, 2), (2, 2, 1.5), (2, 2, 2.5)}
        assert {tuple(p) for p in mesh.points} == expected
        assert not mesh.clipped

    def test_absent_label_raises(self):
        data = np.ones((4, 4, 4), dtype=np.int32)
        with pytest.raises(EmptyRegionError):
            extract_region_surface(volume(data), 3)

    def test_adjacent_slabs_share_plane_vertices_exactly(self):
        vol = two_slab_volume()
        m1 = extract_region_surface(vol, 1)
        m2 = extract_region_surface(vol, 2)
        plane1 = {tuple(p) for p in m1.points if 2 < p[2] < 3}
        plane2 = {tuple(p) for p in m2.points if 2 < p[2] < 3}
        assert plane1 and plane1 == plane2

    def test_interior_region_is_closed(self):
        vol = two_slab_volume()
        for label in (1, 2):
            mesh = extract_region_surface(vol, label)
            assert set(edge_use_counts(mesh).values()) == {2}

    def test_border_touching_region_is_flagged(self):
        data = np.zeros((5, 5, 5), dtype=np.int32)
        data[0:3, 1:4, 1:4] = 1
        mesh = extract_region_surface(volume(data), 1)
        assert mesh.clipped
        assert 1 in set(edge_use_counts(mesh).values())

    def test_world_coordinates_respect_spacing_origin(self):
        data = np.zeros((5, 5, 5), dtype=np.int32)
        data[2, 2, 2] = 1
        mesh = extract_region_surface(
            volume(data, spacing=(2, 1, 1), origin=(10, 0, 0)), 1)
        assert (10 + 1.5 * 2, 2.0, 2.0) in {tuple(p) for p in mesh.points}


class TestMergeAndSplit:
    def test_single_mesh_identity(self):
        vol = two_slab_volume()
        m1 = extract_region_surface(vol, 1)
        merged = merge_and_stitch([m1])
        assert len(merged.points) == len(m1.points)
        assert len(merged.simplices) == len(m1.simplices)

    def test_shared_vertex_count(self):
        vol = two_slab_volume()
        m1 = extract_region_surface(vol, 1)
        m2 = extract_region_surface(vol, 2)
        # brute-force distinct coordinate count
        distinct = {tuple(p) for p in m1.points} | {tuple(p) for p in m2.points}
        shared = {tuple(p) for p in m1.points} & {tuple(p) for p in m2.points}
        merged = merge_and_stitch([m1, m2])
        assert len(merged.points) == len(distinct)
        assert len(merged.points) == len(m1.points) + len(m2.points) - len(shared)

    def test_disjoint_meshes_sum(self):
        data = np.zeros((8, 8, 8), dtype=np.int32)
        data[1, 1, 1] = 1
        data[5, 5, 5] = 2
        vol = volume(data)
        m1 = extract_region_surface(vol, 1)
        m2 = extract_region_surface(vol, 2)
        merged = merge_and_stitch([m1, m2])
        assert len(merged.points) == len(m1.points) + len(m2.points)

    def test_empty_input(self):
        merged = merge_and_stitch([])
        assert len(merged.points) == 0

    def test_round_trip_preserves_region_coordinate_sets(self):
        vol = two_slab_volume()
        meshes = {l: extract_region_surface(vol, l) for l in (1, 2)}
        merged = merge_and_stitch(list(meshes.values()))
        parts = dict(split_by_region(merged))
        for label, original in meshes.items():
            assert ({tuple(p) for p in parts[label].points}
                    == {tuple(p) for p in original.points})

    def test_split_shared_plane_in_both_outputs(self):
        vol = two_slab_volume()
        merged = merge_and_stitch(
            [extract_region_surface(vol, l) for l in (1, 2)])
        parts = dict(split_by_region(merged))
        plane = {tuple(p) for p in parts[1].points if 2 < p[2] < 3}
        assert plane
        assert plane <= {tuple(p) for p in parts[2].points}

    def test_single_region_split(self):
        vol = two_slab_volume()
        merged = merge_and_stitch([extract_region_surface(vol, 1)])
        assert len(split_by_region(merged)) == 1


class TestSmooth:
    def test_zero_iterations_identity(self):
        vol = two_slab_volume()
        mesh = extract_region_surface(vol, 1)
        out = smooth(mesh, iterations=0)
        assert np.array_equal(out.points, mesh.points)
        assert np.array_equal(out.simplices, mesh.simplices)

    def test_octahedron_centroid_preserved(self):
        data = np.zeros((5, 5, 5), dtype=np.int32)
        data[2, 2, 2] = 1
        mesh = extract_region_surface(volume(data), 1)
        out = smooth(mesh, iterations=10)
        assert np.abs(out.points.mean(axis=0) - mesh.points.mean(axis=0)).max() < 1e-12

    def test_residual_decreases_on_noisy_sphere(self):
        data = np.zeros((16, 16, 16), dtype=np.int32)
        idx = np.stack(np.meshgrid(*[np.arange(16)] * 3, indexing="ij"), axis=-1)
        data[((idx - 7.5) ** 2).sum(axis=-1) < 30] = 1
        mesh = extract_region_surface(volume(data), 1)
        rng = np.random.default_rng(0)
        noisy = Mesh(mesh.points + rng.normal(scale=0.05, size=mesh.points.shape),
                     mesh.simplices, mesh.face_region)
        out = smooth(noisy, iterations=10)
        assert laplacian_residual(out) < laplacian_residual(noisy)

    def test_connectivity_unchanged(self):
        vol = two_slab_volume()
        mesh = extract_region_surface(vol, 1)
        out = smooth(mesh, iterations=5)
        assert np.array_equal(out.simplices, mesh.simplices)


BOX = (np.zeros(3), np.full(3, 16.0))


def sphere_mesh(n=16, r2=30):
    data = np.zeros((n, n, n), dtype=np.int32)
    idx = np.stack(np.meshgrid(*[np.arange(n)] * 3, indexing="ij"), axis=-1)
    data[((idx - (n - 1) / 2) ** 2).sum(axis=-1) < r2] = 1
    return extract_region_surface(volume(data), 1)


class TestDecimate:
    def test_exact_output_counts(self):
        mesh = sphere_mesh()
        surf = decimate_and_fix_counts(mesh, 60, 100, rng_seed=0,
                                       box_lo=BOX[0], box_hi=BOX[1])
        assert len(surf.points) == 60
        assert len(surf.simplices) == 100
        assert surf.points.min() >= 0 and surf.points.max() <= 1

    def test_duplicates_excluded_from_simplices(self):
        mesh = sphere_mesh()
        surf = decimate_and_fix_counts(mesh, 80, 60, rng_seed=1,
                                       box_lo=BOX[0], box_hi=BOX[1])
        dup_indices = set(surf.duplicated_from)
        assert dup_indices  # 60 faces forces well under 80 core points
        assert not (set(surf.simplices.ravel().tolist()) & dup_indices)
        for dest, src in surf.duplicated_from.items():
            assert np.array_equal(surf.points[dest], surf.points[src])

    def test_no_op_when_already_at_targets(self):
        data = np.zeros((5, 5, 5), dtype=np.int32)
        data[2, 2, 2] = 1
        mesh = extract_region_surface(volume(data), 1)
        surf = decimate_and_fix_counts(mesh, 6, 8, rng_seed=0,
                                       box_lo=BOX[0], box_hi=np.full(3, 5.0))
        assert len(surf.points) == 6
        assert len(surf.simplices) == 8
        assert not surf.duplicated_from
        back = surf.points * 5.0
        assert {tuple(p) for p in back} == {tuple(p) for p in mesh.points}

    def test_hausdorff_below_two_voxel_diagonals(self):
        mesh = sphere_mesh()
        surf = decimate_and_fix_counts(mesh, 60, 100, rng_seed=0,
                                       box_lo=BOX[0], box_hi=BOX[1])
        back = surf.points * 16.0
        d2 = ((back[:, None, :] - mesh.points[None, :, :]) ** 2).sum(axis=2)
        hausdorff = max(np.sqrt(d2.min(axis=1)).max(), np.sqrt(d2.min(axis=0)).max())
        assert hausdorff < 2 * np.sqrt(3)

    def test_too_small_mesh_raises(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float)
        mesh = Mesh(pts, np.array([[0, 1, 2]]), np.array([1]))
        with pytest.raises(ValueError):
            decimate_and_fix_counts(mesh, 4, 4, rng_seed=0,
                                    box_lo=BOX[0], box_hi=BOX[1])

    def test_seed_determinism(self):
        mesh = sphere_mesh()
        a = decimate_and_fix_counts(mesh, 60, 100, rng_seed=5,
                                    box_lo=BOX[0], box_hi=BOX[1])
        b = decimate_and_fix_counts(mesh, 60, 100, rng_seed=5,
                                    box_lo=BOX[0], box_hi=BOX[1])
        assert np.array_equal(a.points, b.points)
        assert np.array_equal(a.simplices, b.simplices)


class TestInterfaces:
    def test_disjoint_regions_empty_map(self):
        data = np.zeros((8, 8, 8), dtype=np.int32)
        data[1:3, 1:3, 1:3] = 1
        data[5:7, 5:7, 5:7] = 2
        vol = volume(data)
        surfs = preprocess_volume(vol, 30, 48, np.zeros(3), np.full(3, 8.0),
                                  smooth_iterations=0)
        assert extract_interfaces(surfs) == {}

    def test_adjacent_slabs_interface_counts(self):
        vol = two_slab_volume()
        m1 = extract_region_surface(vol, 1)
        m2 = extract_region_surface(vol, 2)
        merged = merge_and_stitch([m1, m2])
        parts = dict(split_by_region(merged))
        lo, hi = np.zeros(3), np.full(3, 6.0)
        surfs = []
        for label, mesh in parts.items():
            surfs.append(decimate_and_fix_counts(
                mesh, len(mesh.points), len(mesh.simplices), rng_seed=0,
                box_lo=lo, box_hi=hi))
        shared = ({tuple(p) for p in m1.points} & {tuple(p) for p in m2.points})
        ifaces = extract_interfaces(surfs)
        assert set(ifaces) == {(1, 2)}
        assert len(ifaces[(1, 2)]) == len(shared)

    def test_no_self_pairs(self):
        vol = two_slab_volume()
        surfs = preprocess_volume(vol, 40, 64, np.zeros(3), np.full(3, 6.0),
                                  smooth_iterations=0)
        assert all(a != b for a, b in extract_interfaces(surfs))


class TestRandomVolumes:
    def test_interface_sharing_invariant(self):
        rng = np.random.default_rng(42)
        for _ in range(3):
            data = rng.integers(0, 4, size=(7, 7, 7)).astype(np.int32)
            vol = volume(data)
            meshes = {int(l): extract_region_surface(vol, int(l))
                      for l in vol.labels()}
            for la in meshes:
                for lb in meshes:
                    if la >= lb:
                        continue
                    expected = _interface_edge_midpoints(vol, la, lb)
                    va = {tuple(p) for p in meshes[la].points}
                    vb = {tuple(p) for p in meshes[lb].points}
                    assert expected <= va
                    assert expected <= vb


def _interface_edge_midpoints(vol, la, lb):
    mids = set()
    d = vol.data
    for axis in range(3):
        sl_a = [slice(None)] * 3
        sl_b = [slice(None)] * 3
        sl_a[axis] = slice(0, -1)
        sl_b[axis] = slice(1, None)
        left, right = d[tuple(sl_a)], d[tuple(sl_b)]
        hit = ((left == la) & (right == lb)) | ((left == lb) & (right == la))
        for idx in np.argwhere(hit):
            mid = idx.astype(float)
            mid[axis] += 0.5
            world = vol.origin + mid * vol.spacing
            mids.add(tuple(world))
    return mids
