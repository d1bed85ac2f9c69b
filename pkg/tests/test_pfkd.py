import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otkd.errors import CenterOutsideMap, EmptyHead, ShapeMismatch
from otkd.pfkd import (ConvLayerSpec, FeatureMap, FeatureRegion,
                       adapt_region, aggregate_ensemble_regions,
                       extract_region, init_projection, load_feature_map,
                       pfkd_loss, receptive_field_extent, region_center,
                       save_feature_map)


def simulated_extent(layers):
    """Receptive field measured by actually running 1D convolutions.

    Feed an impulse at every input position and record which positions reach
    output unit 0 of the stack (ones-kernels, valid padding, stride slicing).
    """
    length = 1
    for l in reversed(layers):
        length = (length - 1) * l.stride + l.kernel
    length += 4  # head-room so positions past the field exist
    hits = []
    for pos in range(length):
        y = np.zeros(length)
        y[pos] = 1.0
        for l in layers:
            y = np.convolve(y, np.ones(l.kernel), mode="valid")[::l.stride]
        if y.size and y[0] != 0:
            hits.append(pos)
    assert hits and hits[0] == 0 and hits == list(range(len(hits)))
    return len(hits)


class TestReceptiveField:
    @pytest.mark.parametrize("kernels,strides,expect", [
        ([3], [1], 3),
        ([3, 3], [1, 1], 5),
        ([3, 3, 1], [1, 1, 1], 5),
        ([1], [1], 1),
        ([3, 3], [2, 1], 7),
        ([5, 3], [1, 2], 7),
    ])
    def test_known_stacks(self, kernels, strides, expect):
        head = [ConvLayerSpec(k, s) for k, s in zip(kernels, strides)]
        assert receptive_field_extent(head) == expect

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_impulse_simulation(self, seed):
        rng = np.random.default_rng(seed)
        head = [ConvLayerSpec(int(rng.integers(1, 6)), int(rng.integers(1, 3)))
                for _ in range(rng.integers(1, 4))]
        assert receptive_field_extent(head) == simulated_extent(head)

    def test_rejects_empty_head(self):
        with pytest.raises(EmptyHead):
            receptive_field_extent([])

    def test_rejects_bad_layer(self):
        with pytest.raises(ValueError):
            ConvLayerSpec(0)


class TestRegionCenter:
    def test_scales_and_swaps_axes(self):
        # keypoint is (x, y); the center is (row, col) = (round dy, round dx)
        assert region_center((20.0, 8.0), 0.25) == (2, 5)

    def test_round_half_even(self):
        assert region_center((10.0, 6.0), 0.25) == (2, 2)   # 1.5 -> 2, 2.5 -> 2
        assert region_center((14.0, 2.0), 0.25) == (0, 4)   # 3.5 -> 4, 0.5 -> 0

    def test_rejects_nonpositive_delta(self):
        with pytest.raises(ValueError):
            region_center((1.0, 1.0), 0.0)


class TestExtractRegion:
    def make_map(self):
        return FeatureMap(np.arange(16, dtype=float).reshape(1, 4, 4), 0.25)

    def test_interior_window(self):
        reg = extract_region(self.make_map(), (1, 2), 3)
        np.testing.assert_array_equal(
            reg.data[0], [[1, 2, 3], [5, 6, 7], [9, 10, 11]])
        assert reg.center == (1, 2)

    def test_corner_zero_padded(self):
        reg = extract_region(self.make_map(), (0, 0), 3)
        np.testing.assert_array_equal(
            reg.data[0], [[0, 0, 0], [0, 0, 1], [0, 4, 5]])

    def test_even_extent_hangs_bottom_right(self):
        reg = extract_region(self.make_map(), (1, 1), 2)
        np.testing.assert_array_equal(reg.data[0], [[5, 6], [9, 10]])

    def test_extent_one_is_the_cell_itself(self):
        reg = extract_region(self.make_map(), (2, 3), 1)
        np.testing.assert_array_equal(reg.data[0], [[11.0]])

    def test_center_outside_rejected(self):
        with pytest.raises(CenterOutsideMap):
            extract_region(self.make_map(), (4, 0), 3)
        with pytest.raises(CenterOutsideMap):
            extract_region(self.make_map(), (0, -1), 3)


class TestAdaptRegion:
    def test_identity_projection_same_shape_is_noop(self):
        rng = np.random.default_rng(0)
        reg = FeatureRegion(rng.normal(size=(3, 5, 5)), (2, 2))
        out = adapt_region(reg, 3, 5, 5, np.eye(3))
        np.testing.assert_allclose(out.data, reg.data)
        assert out.center == reg.center

    def test_channel_mix(self):
        reg = FeatureRegion(np.stack([np.full((2, 2), 1.0),
                                      np.full((2, 2), 3.0)]), (0, 0))
        out = adapt_region(reg, 1, 2, 2, np.array([[0.5, 0.5]]))
        np.testing.assert_allclose(out.data, np.full((1, 2, 2), 2.0))

    def test_pooling_averages_blocks(self):
        data = np.arange(16, dtype=float).reshape(1, 4, 4)
        out = adapt_region(FeatureRegion(data, (0, 0)), 1, 2, 2, np.eye(1))
        np.testing.assert_allclose(out.data[0], [[2.5, 4.5], [10.5, 12.5]])

    def test_pooling_uneven_edges(self):
        # 3 -> 2 pools with window 2: last window covers the single trailing row
        data = np.arange(9, dtype=float).reshape(1, 3, 3)
        out = adapt_region(FeatureRegion(data, (0, 0)), 1, 2, 2, np.eye(1))
        np.testing.assert_allclose(out.data[0], [[2.0, 3.5], [6.5, 8.0]])

    def test_rejects_projection_shape(self):
        reg = FeatureRegion(np.zeros((3, 2, 2)), (0, 0))
        with pytest.raises(ShapeMismatch):
            adapt_region(reg, 2, 2, 2, np.eye(3))

    def test_rejects_upsampling(self):
        reg = FeatureRegion(np.zeros((1, 2, 2)), (0, 0))
        with pytest.raises(ShapeMismatch):
            adapt_region(reg, 1, 3, 3, np.eye(1))


class TestInitProjection:
    def test_block_identity_when_divisible(self):
        proj = init_projection(2, 4)
        np.testing.assert_array_equal(
            proj, [[0.5, 0.0, 0.5, 0.0], [0.0, 0.5, 0.0, 0.5]])
        # the blocks average paired channels exactly
        reg = FeatureRegion(np.stack([np.full((1, 1), v) for v in (1., 2., 3., 4.)]),
                            (0, 0))
        out = adapt_region(reg, 2, 1, 1, proj)
        np.testing.assert_allclose(out.data.ravel(), [2.0, 3.0])

    def test_random_fallback(self):
        proj = init_projection(3, 7, np.random.default_rng(1))
        assert proj.shape == (3, 7)
        assert (np.abs(proj) <= 0.1).all()


def loop_pfkd_loss(teacher, student, P):
    """Reference: explicit double loop over region pairs."""
    N, M = len(teacher), len(student)
    cells = student[0].data.size
    total = 0.0
    for i in range(N):
        for j in range(M):
            total += P[j, i] * ((teacher[i].data - student[j].data) ** 2).sum()
    return total / (N * M * cells)


def make_regions(rng, n, shape):
    return [FeatureRegion(rng.normal(size=shape), (0, 0), k) for k in range(n)]


class TestPfkdLoss:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        T = make_regions(rng, 4, (2, 3, 3))
        S = make_regions(rng, 3, (2, 3, 3))
        P = rng.uniform(0, 1, (3, 4))
        loss, _ = pfkd_loss(T, S, P)
        assert loss == pytest.approx(loop_pfkd_loss(T, S, P), rel=1e-12)

    def test_identical_regions_zero_loss(self):
        rng = np.random.default_rng(4)
        T = make_regions(rng, 3, (2, 2, 2))
        S = [FeatureRegion(r.data.copy(), r.center, r.source_keypoint) for r in T]
        loss, grad = pfkd_loss(T, S, np.eye(3) * (1 / 3))
        assert loss == pytest.approx(0.0, abs=1e-15)
        np.testing.assert_allclose(grad, 0.0, atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        T = make_regions(rng, 3, (2, 2, 2))
        S = make_regions(rng, 2, (2, 2, 2))
        P = rng.uniform(0, 1, (2, 3))
        _, grad = pfkd_loss(T, S, P)
        h = 1e-6
        for j in (0, 1):
            flat = S[j].data.ravel()
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + h
                up = loop_pfkd_loss(T, S, P)
                flat[idx] = orig - h
                dn = loop_pfkd_loss(T, S, P)
                flat[idx] = orig
                fd = (up - dn) / (2 * h)
                assert grad[j].ravel()[idx] == pytest.approx(fd, abs=1e-6)

    def test_linear_in_plan(self):
        rng = np.random.default_rng(6)
        T = make_regions(rng, 2, (1, 2, 2))
        S = make_regions(rng, 2, (1, 2, 2))
        P = rng.uniform(0, 1, (2, 2))
        l1, g1 = pfkd_loss(T, S, P)
        l2, g2 = pfkd_loss(T, S, 2.0 * P)
        assert l2 == pytest.approx(2 * l1, rel=1e-12)
        np.testing.assert_allclose(g2, 2 * g1, atol=1e-12)

    def test_zero_plan_column_ignores_student_region(self):
        rng = np.random.default_rng(7)
        T = make_regions(rng, 2, (1, 2, 2))
        S = make_regions(rng, 2, (1, 2, 2))
        P = rng.uniform(0.1, 1, (2, 2))
        P[1, :] = 0.0  # student region 1 carries no mass
        _, grad = pfkd_loss(T, S, P)
        np.testing.assert_array_equal(grad[1], 0.0)

    def test_rejects_plan_shape(self):
        rng = np.random.default_rng(8)
        with pytest.raises(ShapeMismatch, match="student-major"):
            pfkd_loss(make_regions(rng, 2, (1, 2, 2)),
                      make_regions(rng, 3, (1, 2, 2)),
                      np.zeros((2, 3)))

    def test_rejects_unadapted_regions(self):
        rng = np.random.default_rng(9)
        with pytest.raises(ShapeMismatch, match="adaptation"):
            pfkd_loss(make_regions(rng, 2, (3, 2, 2)),
                      make_regions(rng, 2, (1, 2, 2)),
                      np.zeros((2, 2)))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_nonnegative_for_nonnegative_plans(self, seed):
        rng = np.random.default_rng(seed)
        n, m = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        T = make_regions(rng, n, (2, 2, 2))
        S = make_regions(rng, m, (2, 2, 2))
        loss, _ = pfkd_loss(T, S, rng.uniform(0, 1, (m, n)))
        assert loss >= 0.0


class TestEnsembleRegions:
    def test_elementwise_mean(self):
        a = [FeatureRegion(np.full((1, 2, 2), 1.0), (3, 4), 0)]
        b = [FeatureRegion(np.full((1, 2, 2), 5.0), (9, 9), 0)]
        out = aggregate_ensemble_regions([a, b])
        np.testing.assert_allclose(out[0].data, np.full((1, 2, 2), 3.0))
        assert out[0].center == (3, 4)  # first member's center wins
        assert out[0].source_keypoint == 0

    def test_rejects_count_mismatch(self):
        reg = FeatureRegion(np.zeros((1, 1, 1)), (0, 0))
        with pytest.raises(ShapeMismatch):
            aggregate_ensemble_regions([[reg], [reg, reg]])

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            aggregate_ensemble_regions(
                [[FeatureRegion(np.zeros((1, 1, 1)), (0, 0))],
                 [FeatureRegion(np.zeros((1, 2, 2)), (0, 0))]])


class TestFeatureMapIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(10)
        fmap = FeatureMap(rng.normal(size=(3, 4, 5)).astype(np.float32), 0.25)
        path = tmp_path / "fmap.bin"
        save_feature_map(fmap, path)
        back = load_feature_map(path)
        assert back.data.shape == (3, 4, 5)
        assert back.delta == pytest.approx(0.25)
        np.testing.assert_array_equal(back.data, fmap.data.astype(np.float32))

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "short.bin"
        path.write_bytes(b"\x00" * 7)
        with pytest.raises(ValueError, match="truncated"):
            load_feature_map(path)

    def test_length_mismatch_rejected(self, tmp_path):
        fmap = FeatureMap(np.zeros((1, 2, 2)), 0.5)
        path = tmp_path / "fmap.bin"
        save_feature_map(fmap, path)
        path.write_bytes(path.read_bytes() + b"\x00\x00\x00\x00")
        with pytest.raises(ValueError, match="bytes"):
            load_feature_map(path)

    def test_feature_map_validation(self):
        with pytest.raises(ValueError):
            FeatureMap(np.zeros((2, 2)), 0.25)
        with pytest.raises(ValueError):
            FeatureMap(np.full((1, 2, 2), np.nan), 0.25)
        with pytest.raises(ValueError):
            FeatureMap(np.zeros((1, 2, 2)), -1.0)
