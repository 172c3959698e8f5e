from unittest import TestCase

import numpy as np

from pymm2d3d.autodiff import Tensor
from pymm2d3d.autodiff import ops
from pymm2d3d.errors import DomainError, UsageError
from pymm2d3d.geometry import (
    Intrinsics,
    PointCloud,
    back_project,
    gather_point_features,
    make_sparse_depth,
    pixel_indices,
    project,
    project_labels,
    sample_colors,
    zbuffer_winners,
)


K100 = Intrinsics(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=100, height=100)


def random_cloud(seed: int, n: int = 200, labels: bool = True) -> PointCloud:
    rng = np.random.RandomState(seed)
    z = rng.uniform(1.0, 10.0, size=n)
    u = rng.uniform(-10.0, 110.0, size=n)
    v = rng.uniform(-10.0, 110.0, size=n)
    positions = back_project(u, v, z, K100)
    return PointCloud(positions, labels=rng.randint(-1, 4, size=n) if labels else None)


class IntrinsicsTestCase(TestCase):

    def test_invalid(self):
        with self.assertRaises(DomainError):
            Intrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)
        with self.assertRaises(DomainError):
            Intrinsics(1.0, 1.0, 4.0, 1.0, 4, 4)

    def test_array_round_trip(self):
        K = Intrinsics.centred(64, 64, 48.0)
        self.assertEqual(K.cx, 31.5)
        self.assertEqual(Intrinsics.from_array(K.as_array()), K)


class ProjectTestCase(TestCase):

    def test_principal_ray(self):
        uv, mask = project(np.array([[0.0, 0.0, 5.0]]), K100)
        np.testing.assert_allclose(uv, [[50.0, 50.0]])
        self.assertTrue(mask[0])

    def test_closed_form(self):
        uv, _ = project(np.array([[1.0, 0.0, 5.0]]), K100)
        np.testing.assert_allclose(uv, [[70.0, 50.0]])

    def test_out_of_frustum(self):
        _, mask = project(np.array([[10.0, 0.0, 1.0]]), K100)
        self.assertFalse(mask[0])

    def test_behind_camera(self):
        with self.assertRaises(DomainError):
            project(np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]), K100)

    def test_round_half_up(self):
        rows, cols, _ = pixel_indices(np.array([[0.125, -0.125, 25.0]]), K100)
        # u = 50.5 rounds up, v = 49.5 rounds up
        self.assertEqual((rows[0], cols[0]), (50, 51))

    def test_back_project_round_trip(self):
        rng = np.random.RandomState(0)
        u = rng.randint(0, 100, size=50).astype(float)
        v = rng.randint(0, 100, size=50).astype(float)
        z = rng.uniform(0.5, 30.0, size=50)
        uv, _ = project(back_project(u, v, z, K100), K100)
        np.testing.assert_allclose(uv[:, 0], u, atol=1e-6)
        np.testing.assert_allclose(uv[:, 1], v, atol=1e-6)


class SparseDepthTestCase(TestCase):

    def test_single_point(self):
        depth = make_sparse_depth(np.array([[0.0, 0.0, 5.0]]), K100)
        self.assertEqual(depth.shape, (1, 100, 100))
        self.assertEqual(depth[0, 50, 50], 5.0)
        self.assertEqual(np.count_nonzero(depth), 1)

    def test_nearest_z_wins(self):
        points = np.array([[0.0, 0.0, 7.0], [0.0, 0.0, 3.0]])
        self.assertEqual(make_sparse_depth(points, K100)[0, 50, 50], 3.0)

    def test_no_points_in_bounds(self):
        depth = make_sparse_depth(np.array([[10.0, 0.0, 1.0]]), K100)
        self.assertFalse(depth.any())

    def test_zbuffer_exhaustive_pairs(self):
        for z1 in (2.0, 4.0, 6.0):
            for z2 in (2.0, 4.0, 6.0):
                points = np.array([[0.0, 0.0, z1], [0.0, 0.0, z2]])
                _, winners = zbuffer_winners(points, K100)
                expected = 0 if z1 <= z2 else 1
                self.assertEqual(winners.tolist(), [expected])


class ProjectLabelsTestCase(TestCase):

    def test_single_point(self):
        cloud = PointCloud(np.array([[0.0, 0.0, 5.0]]), labels=np.array([2]))
        labels = project_labels(cloud, K100)
        self.assertEqual(labels[50, 50], 2)
        self.assertEqual((labels != -1).sum(), 1)

    def test_collision_uses_depth_winner(self):
        cloud = PointCloud(np.array([[0.0, 0.0, 3.0], [0.0, 0.0, 7.0]]), labels=np.array([1, 4]))
        self.assertEqual(project_labels(cloud, K100)[50, 50], 1)

    def test_ignored_winner(self):
        cloud = PointCloud(np.array([[0.0, 0.0, 3.0], [0.0, 0.0, 7.0]]), labels=np.array([-1, 4]))
        self.assertEqual(project_labels(cloud, K100)[50, 50], -1)

    def test_missing_labels(self):
        with self.assertRaises(UsageError):
            project_labels(PointCloud(np.array([[0.0, 0.0, 3.0]])), K100)

    def test_agrees_with_depth(self):
        cloud = random_cloud(1, n=2000)
        depth = make_sparse_depth(cloud, K100)[0]
        labels = project_labels(cloud, K100)
        pixels, winners = zbuffer_winners(cloud, K100)
        np.testing.assert_array_equal(depth.reshape(-1)[pixels], cloud.positions[winners, 2])
        np.testing.assert_array_equal(labels.reshape(-1)[pixels], cloud.labels[winners])
        self.assertEqual(np.count_nonzero(depth), pixels.size)


class SampleColorsTestCase(TestCase):

    def test_constant_image(self):
        cloud = random_cloud(2)
        colors, mask = sample_colors(np.full((3, 100, 100), 0.5, dtype=np.float32), cloud, K100)
        np.testing.assert_allclose(colors[mask], 0.5)
        np.testing.assert_allclose(colors[~mask], 0.0)

    def test_painted_pixel(self):
        image = np.zeros((3, 100, 100), dtype=np.float32)
        image[0, 50, 50] = 1.0
        colors, _ = sample_colors(image, np.array([[0.0, 0.0, 4.0]]), K100)
        np.testing.assert_allclose(colors, [[1.0, 0.0, 0.0]])

    def test_matches_direct_indexing(self):
        image = np.random.RandomState(3).rand(3, 100, 100)
        cloud = random_cloud(4)
        colors, mask = sample_colors(image, cloud, K100)
        uv, _ = project(cloud, K100)
        for i in np.flatnonzero(mask):
            col, row = int(np.floor(uv[i, 0] + 0.5)), int(np.floor(uv[i, 1] + 0.5))
            np.testing.assert_array_equal(colors[i], image[:, row, col])


class GatherPointFeaturesTestCase(TestCase):

    def test_pixel_encoding(self):
        rows, cols = np.meshgrid(np.arange(100), np.arange(100), indexing='ij')
        fmap = Tensor(np.stack([rows, cols]).astype(np.float64), dtype=np.float64)
        cloud = random_cloud(5)
        gathered = gather_point_features(fmap, cloud, K100)
        r, c, mask = pixel_indices(cloud, K100)
        np.testing.assert_array_equal(gathered.data[mask, 0], r[mask])
        np.testing.assert_array_equal(gathered.data[mask, 1], c[mask])
        np.testing.assert_array_equal(gathered.data[~mask], 0)

    def test_constant_map(self):
        fmap = Tensor(np.full((4, 100, 100), 2.0))
        cloud = random_cloud(6)
        _, mask = project(cloud, K100)
        gathered = gather_point_features(fmap, cloud, K100)
        np.testing.assert_allclose(gathered.data[mask], 2.0)

    def test_gradient_counts_multiplicity(self):
        fmap = Tensor(np.zeros((2, 100, 100)), requires_grad=True)
        points = np.array([[0.0, 0.0, 5.0], [0.0, 0.0, 9.0], [1.0, 0.0, 5.0], [10.0, 0.0, 1.0]])
        ops.sum(gather_point_features(fmap, points, K100)).backward()
        self.assertEqual(fmap.grad[0, 50, 50], 2.0)
        self.assertEqual(fmap.grad[1, 50, 70], 1.0)
        # the out-of-bounds point scatters nothing: total mass equals in-bounds incoming mass
        self.assertEqual(fmap.grad.sum(), 2 * 3)
