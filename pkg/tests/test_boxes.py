import numpy as np
import pytest

from narxmpc.boxes import (Box, box_linear_image, compute_rpi,
                           disturbance_box, minkowski_add,
                           pontryagin_subtract, rpi_invariance_check,
                           rpi_output_halfwidth)
from narxmpc.nnarx import build_structural_matrices, u_slot_indices, y_slot_indices


def random_box(rng, dim):
    c = rng.uniform(-2, 2, dim)
    r = rng.uniform(0.1, 2.0, dim)
    return Box(c - r, c + r)


class TestMinkowskiAdd:
    def test_symmetric_intervals(self):
        out = minkowski_add(Box([-1.0], [1.0]), Box([-2.0], [2.0]))
        assert np.allclose(out.lo, [-3.0]) and np.allclose(out.hi, [3.0])

    def test_singleton_identity(self):
        rng = np.random.default_rng(0)
        a = random_box(rng, 4)
        zero = Box.singleton(np.zeros(4))
        out = minkowski_add(a, zero)
        assert np.allclose(out.lo, a.lo) and np.allclose(out.hi, a.hi)

    def test_against_grid_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a = random_box(rng, 3)
            b = random_box(rng, 3)
            out = minkowski_add(a, b)
            # dense gridded sum, bounding box within grid resolution
            grids_a = [np.linspace(a.lo[i], a.hi[i], 7) for i in range(3)]
            grids_b = [np.linspace(b.lo[i], b.hi[i], 7) for i in range(3)]
            for i in range(3):
                sums = np.add.outer(grids_a[i], grids_b[i])
                assert out.lo[i] == pytest.approx(sums.min(), abs=1e-12)
                assert out.hi[i] == pytest.approx(sums.max(), abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            minkowski_add(Box([0.0], [1.0]), Box([0.0, 0.0], [1.0, 1.0]))


class TestPontryaginSubtract:
    def test_symmetric_shrink(self):
        out = pontryagin_subtract(Box([-3.0], [3.0]), Box([-1.0], [1.0]))
        assert np.allclose(out.lo, [-2.0]) and np.allclose(out.hi, [2.0])

    def test_self_subtraction_of_symmetric_box(self):
        a = Box([-2.5, -0.5], [2.5, 0.5])
        out = pontryagin_subtract(a, a)
        assert np.allclose(out.lo, 0.0) and np.allclose(out.hi, 0.0)
        assert not out.is_empty

    def test_empty_flag_not_exception(self):
        out = pontryagin_subtract(Box([-1.0], [1.0]), Box([-2.0], [2.0]))
        assert out.is_empty

    def test_membership_oracle(self):
        rng = np.random.default_rng(2)
        checked = 0
        while checked < 100:
            a = random_box(rng, 3)
            b = Box(a.lo * rng.uniform(0.1, 0.9), a.hi * rng.uniform(0.1, 0.9))
            b = Box(np.minimum(b.lo, b.hi) * 0.3, np.maximum(b.lo, b.hi) * 0.3)
            out = pontryagin_subtract(a, b)
            if out.is_empty:
                continue
            checked += 1
            p = out.sample(rng, 10)
            q = b.sample(rng, 10)
            for i in range(10):
                assert a.contains(p[i] + q[i], tol=1e-12)


class TestRpi:
    def test_zero_amplitude_collapses_to_origin(self):
        omega = compute_rpi(4, 1, 1, 0.0)
        assert np.allclose(omega.lo, 0.0) and np.allclose(omega.hi, 0.0)

    def test_benchmark_structure(self):
        # five output slots at +/- amplitude, five input slots pinned to zero
        omega = compute_rpi(5, 1, 1, 0.031)
        ys = y_slot_indices(5, 1, 1)
        us = u_slot_indices(5, 1, 1)
        assert np.allclose(omega.hi[ys], 0.031)
        assert np.allclose(omega.lo[ys], -0.031)
        assert np.allclose(omega.hi[us], 0.0)
        assert np.allclose(omega.lo[us], 0.0)
        assert np.allclose(rpi_output_halfwidth(omega, 5, 1, 1), [0.031])

    def test_matches_explicit_minkowski_accumulation(self):
        # oracle: accumulate shifted copies with the explicit matrix powers
        N, m, p = 4, 2, 1
        w = 0.6
        S = build_structural_matrices(N, m, p)
        W = disturbance_box(N, m, p, w)
        acc = Box.singleton(np.zeros(N * (m + p)))
        M = np.eye(N * (m + p))
        for _ in range(N):
            acc = minkowski_add(acc, box_linear_image(M, W))
            M = S.A @ M
        omega = compute_rpi(N, m, p, w)
        assert np.allclose(omega.lo, acc.lo) and np.allclose(omega.hi, acc.hi)

    def test_sampled_invariance(self):
        omega = compute_rpi(5, 1, 1, 0.031)
        assert rpi_invariance_check(omega, 5, 1, 1, 0.031, samples=10_000, seed=3)

    def test_tightening_consistency(self):
        # nominal point in the tightened box plus any error stays in the box
        rng = np.random.default_rng(4)
        omega = compute_rpi(3, 1, 1, 0.05)
        state_box = Box(-np.ones(6) * 1.2, np.ones(6) * 1.2)
        tight = pontryagin_subtract(state_box, omega)
        pts = tight.sample(rng, 500)
        errs = omega.sample(rng, 500)
        assert np.all(state_box.contains(pts + errs, tol=1e-12))

    def test_negative_amplitude_rejected(self):
        with pytest.raises(ValueError):
            compute_rpi(3, 1, 1, -0.1)
