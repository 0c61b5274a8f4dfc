import numpy as np
import pytest

from surfreg.svf import (AffineLogTerm, GridField, SvfSample, SvfTerm,
                         TransformChain, affine_log, apply_chain,
                         bch_first_order, eval_velocity, exp_svf,
                         exp_svf_backward, fuse_regions, jacobian_determinant,
                         negate)


def random_svf(seed, n=50, vmax=0.05, sigma=0.02):
    rng = np.random.default_rng(seed)
    ctrl = rng.random((n, 3))
    v = rng.normal(size=(n, 3))
    v *= vmax * rng.random((n, 1)) / np.linalg.norm(v, axis=1, keepdims=True)
    return SvfSample(ctrl, v, sigma=sigma)


def eval_velocity_double_loop(svf, queries):
    out = np.zeros((len(queries), 3))
    for m, x in enumerate(queries):
        num = np.zeros(3)
        den = svf.epsilon
        for p, v in zip(svf.control_points, svf.velocities):
            w = np.exp(-((x - p) ** 2).sum() / (2 * svf.sigma ** 2))
            num = num + w * v
            den = den + w
        out[m] = num / den
    return out


class TestEvalVelocity:
    def test_zero_velocities(self):
        svf = SvfSample(np.random.default_rng(0).random((10, 3)),
                        np.zeros((10, 3)))
        assert np.array_equal(eval_velocity(svf, np.random.random((5, 3))),
                              np.zeros((5, 3)))

    def test_single_control_at_control(self):
        v = np.array([[0.01, -0.02, 0.005]])
        svf = SvfSample(np.array([[0.5, 0.5, 0.5]]), v, epsilon=1e-8)
        out = eval_velocity(svf, np.array([[0.5, 0.5, 0.5]]))
        assert np.allclose(out, v / (1 + 1e-8), rtol=0, atol=1e-18)

    def test_matches_double_loop(self):
        svf = random_svf(1)
        queries = np.random.default_rng(2).random((100, 3))
        fast = eval_velocity(svf, queries)
        slow = eval_velocity_double_loop(svf, queries)
        denom = np.abs(slow).max()
        assert np.abs(fast - slow).max() <= 1e-12 * max(denom, 1e-30)

    def test_norm_bound(self):
        svf = random_svf(3)
        queries = np.random.default_rng(4).random((200, 3))
        out = eval_velocity(svf, queries)
        vmax = np.linalg.norm(svf.velocities, axis=1).max()
        assert (np.linalg.norm(out, axis=1) < vmax).all()

    def test_decay_far_from_controls(self):
        svf = random_svf(5)
        far = np.full((1, 3), 50.0)
        assert np.linalg.norm(eval_velocity(svf, far)) < 1e-30

    def test_tree_cutoff_converges_to_exact(self):
        svf = random_svf(6, n=200)
        queries = np.random.default_rng(7).random((100, 3))
        exact = eval_velocity(svf, queries)
        # a cutoff spanning the whole domain reproduces the exact field
        full = eval_velocity(svf, queries, cutoff_radius=10.0)
        assert np.abs(full - exact).max() <= 1e-12 * np.abs(exact).max()
        err = [np.abs(eval_velocity(svf, queries, cutoff_radius=r * svf.sigma)
                      - exact).max() for r in (3, 6, 9)]
        assert err[0] > err[1] > err[2]

    def test_tree_cutoff_accurate_near_controls(self):
        svf = random_svf(6, n=200)
        # query right at the controls, where kernel mass dominates epsilon
        exact = eval_velocity(svf, svf.control_points)
        approx = eval_velocity(svf, svf.control_points,
                               cutoff_radius=4 * svf.sigma)
        assert np.abs(approx - exact).max() < 1e-2 * np.abs(exact).max()


class TestExpSvf:
    def test_zero_velocity_identity(self):
        svf = SvfSample(np.random.default_rng(0).random((5, 3)), np.zeros((5, 3)))
        q = np.random.default_rng(1).random((7, 3))
        assert np.array_equal(exp_svf(svf, q, steps=12), q)

    def test_single_control_displacement_near_v(self):
        v = np.array([[0.01, 0.0, 0.0]])
        ctrl = np.array([[0.5, 0.5, 0.5]])
        svf = SvfSample(ctrl, v, sigma=1e-2)
        out = exp_svf(svf, ctrl, steps=12)
        assert np.abs((out - ctrl) - v).max() < 1e-6

    def test_inverse_round_trip(self):
        svf = random_svf(8)
        q = np.random.default_rng(9).random((50, 3))
        fwd = exp_svf(svf, q, steps=48)
        back = exp_svf(negate(svf), fwd, steps=48)
        assert np.abs(back - q).max() < 2e-2

    def test_inverse_error_decreases_with_steps(self):
        svf = random_svf(10)
        q = np.random.default_rng(11).random((100, 3))
        errs = []
        for steps in (12, 24, 48):
            fwd = exp_svf(svf, q, steps=steps)
            back = exp_svf(negate(svf), fwd, steps=steps)
            errs.append(np.abs(back - q).max())
        assert errs[0] > errs[1] > errs[2]

    def test_invalid_steps(self):
        with pytest.raises(ValueError):
            exp_svf(random_svf(0), np.zeros((1, 3)), steps=0)


class TestExpSvfBackward:
    def test_one_step_single_pair(self):
        ctrl = np.array([[0.3, 0.4, 0.5]])
        svf = SvfSample(ctrl, np.array([[0.01, 0.02, -0.01]]), epsilon=1e-8)
        up = np.array([[1.0, 0.0, 0.0]])
        dv = exp_svf_backward(svf, ctrl, 1, up)
        expected = up / (1 + 1e-8)
        assert np.allclose(dv, expected, atol=1e-9)

    def test_zero_upstream(self):
        svf = random_svf(12, n=5)
        q = np.random.default_rng(13).random((4, 3))
        dv = exp_svf_backward(svf, q, 3, np.zeros((4, 3)))
        assert np.array_equal(dv, np.zeros_like(svf.velocities))

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(14)
        svf = SvfSample(rng.random((6, 3)), rng.normal(size=(6, 3)) * 0.05,
                        sigma=0.15)
        q = rng.random((5, 3))
        up = rng.normal(size=(5, 3))
        dv = exp_svf_backward(svf, q, 4, up)
        eps = 1e-6
        for i in range(6):
            for c in range(3):
                old = svf.velocities[i, c]
                svf.velocities[i, c] = old + eps
                lp = (exp_svf(svf, q, 4) * up).sum()
                svf.velocities[i, c] = old - eps
                lm = (exp_svf(svf, q, 4) * up).sum()
                svf.velocities[i, c] = old
                fd = (lp - lm) / (2 * eps)
                assert abs(fd - dv[i, c]) / (abs(fd) + abs(dv[i, c]) + 1e-12) < 1e-6

    def test_shape_mismatch(self):
        svf = random_svf(15, n=4)
        with pytest.raises(ValueError):
            exp_svf_backward(svf, np.zeros((3, 3)), 2, np.zeros((2, 3)))


class TestNegateFuse:
    def test_negate_involution(self):
        svf = random_svf(16)
        back = negate(negate(svf))
        assert np.array_equal(back.velocities, svf.velocities)

    def test_negate_zero(self):
        svf = SvfSample(np.random.random((3, 3)), np.zeros((3, 3)))
        assert np.array_equal(negate(svf).velocities, np.zeros((3, 3)))

    def test_fuse_single_unchanged(self):
        svf = random_svf(17)
        fused = fuse_regions([svf])
        assert np.array_equal(fused.control_points, svf.control_points)
        assert np.array_equal(fused.velocities, svf.velocities)

    def test_fuse_duplicate_point_averages(self):
        p = np.array([[0.5, 0.5, 0.5]])
        v = np.array([[0.01, 0.0, 0.0]])
        fused = fuse_regions([SvfSample(p, v), SvfSample(p, v)])
        out = eval_velocity(fused, p)
        assert np.allclose(out, 2 * v / (1e-8 + 2), atol=1e-18)

    def test_fuse_opposite_velocities_cancel(self):
        p = np.array([[0.5, 0.5, 0.5]])
        v = np.array([[0.01, 0.0, 0.0]])
        fused = fuse_regions([SvfSample(p, v), SvfSample(p, -v)])
        assert np.abs(eval_velocity(fused, p)).max() < 1e-15

    def test_fuse_bandwidth_mismatch(self):
        with pytest.raises(ValueError):
            fuse_regions([random_svf(0, sigma=0.01), random_svf(1, sigma=0.02)])


class TestBch:
    def test_zero_b_keeps_a_field(self):
        a = random_svf(18, n=8)
        b = SvfSample(np.random.default_rng(19).random((4, 3)),
                      np.zeros((4, 3)), sigma=a.sigma)
        combined = bch_first_order(a, b)
        at_a = eval_velocity(combined, a.control_points)
        direct = eval_velocity(a, a.control_points)
        # b contributes zero velocity but extra kernel mass at its controls
        far = np.linalg.norm(
            a.control_points[:, None, :] - b.control_points[None, :, :], axis=2
        ).min(axis=1) > 6 * a.sigma
        assert np.abs(at_a[far] - direct[far]).max() < 1e-9

    def test_cancellation(self):
        a = random_svf(20, n=10)
        combined = bch_first_order(a, negate(a))
        # residual is O(eps / kernel mass) from the normalized convolution
        assert np.abs(combined.velocities).max() < 1e-8

    def test_bandwidth_mismatch(self):
        with pytest.raises(ValueError):
            bch_first_order(random_svf(0, sigma=0.01), random_svf(1, sigma=0.02))

    def test_approximates_composition_for_small_fields(self):
        a = random_svf(21, n=20, vmax=0.01, sigma=0.15)
        b = random_svf(22, n=20, vmax=0.01, sigma=0.15)
        grid = np.random.default_rng(23).random((64, 3))
        composed = exp_svf(a, exp_svf(b, grid, steps=64), steps=64)
        via_bch = exp_svf(bch_first_order(a, b), grid, steps=64)
        # error budget O(|a||b|) dominates the comparison
        assert np.abs(via_bch - composed).max() < 5e-3


class TestChains:
    def test_empty_chain_identity(self):
        q = np.random.default_rng(24).random((10, 3))
        assert np.array_equal(apply_chain(TransformChain([]), q), q)

    def test_affine_inverse_pair(self):
        rng = np.random.default_rng(25)
        a = np.eye(4)
        a[:3, :3] = np.eye(3) + 0.1 * rng.normal(size=(3, 3))
        a[:3, 3] = 0.05 * rng.normal(size=3)
        log = affine_log(a)
        chain = TransformChain([AffineLogTerm(log, 1.0), AffineLogTerm(log, -1.0)])
        q = rng.random((20, 3))
        assert np.abs(apply_chain(chain, q) - q).max() < 1e-10

    def test_affine_term_matches_matrix_action(self):
        a = np.eye(4)
        a[:3, :3] = np.diag([1.2, 0.9, 1.1])
        a[:3, 3] = [0.1, -0.2, 0.05]
        chain = TransformChain([AffineLogTerm(affine_log(a))])
        q = np.random.default_rng(26).random((10, 3))
        expected = q @ a[:3, :3].T + a[:3, 3]
        assert np.abs(apply_chain(chain, q) - expected).max() < 1e-12

    def test_svf_chain_inverse(self):
        svf = random_svf(27, vmax=0.02, sigma=0.1)
        chain = TransformChain([SvfTerm(svf, steps=24)])
        q = np.random.default_rng(28).random((30, 3))
        back = apply_chain(chain.inverted(), apply_chain(chain, q))
        assert np.abs(back - q).max() < 1e-3

    def test_affine_log_rejects_negative_eigenvalue(self):
        a = np.eye(4)
        a[0, 0] = -1.0
        with pytest.raises(ValueError):
            affine_log(a)


class TestJacobian:
    def grid(self, n=8):
        return GridField((n, n, n), np.full(3, 1.0 / (n - 1)), np.zeros(3))

    def test_identity_chain(self):
        det = jacobian_determinant(TransformChain([]), self.grid())
        assert np.abs(det - 1.0).max() < 1e-12

    def test_uniform_scaling(self):
        log = affine_log(np.diag([2.0, 2.0, 2.0, 1.0]))
        det = jacobian_determinant(TransformChain([AffineLogTerm(log)]), self.grid())
        assert np.abs(det - 8.0).max() < 1e-9

    def test_degenerate_spacing_rejected(self):
        grid = GridField((8, 8, 8), np.array([0.0, 1.0, 1.0]), np.zeros(3))
        with pytest.raises(ValueError):
            jacobian_determinant(TransformChain([]), grid)

    def test_small_svf_positive(self):
        svf = random_svf(29, vmax=0.02, sigma=0.1)
        det = jacobian_determinant(
            TransformChain([SvfTerm(svf, steps=12)]), self.grid(10))
        assert det.min() > 0
