import os
import tempfile
from unittest import TestCase

import numpy as np
from PIL import Image

from pymm2d3d.errors import DomainError, FormatError, UsageError
from pymm2d3d.erf import (
    ErfResult,
    complementarity,
    compute_erf,
    export_erf,
    pick_anchors,
    read_ply,
    reproject_pixels,
    write_heatmap,
)
from pymm2d3d.forge import Dataset, Sample, SceneSpec, generate
from pymm2d3d.forge.scene import GROUND
from pymm2d3d.geometry import Intrinsics, PointCloud, back_project, pixel_indices
from pymm2d3d.nets import MM2D3D, ModelConfig


K32 = Intrinsics.centred(32, 32, 24.0)
TINY_MODEL = ModelConfig(widths_2d=(4, 4, 4, 4), widths_3d=(4, 4, 4))


def crafted_sample(seed: int = 0) -> Sample:
    """
    An anchor at 5 m and a scatter of points at least 3 m behind it.
    """
    rng = np.random.default_rng(seed)
    u = np.concatenate([[16.0], rng.uniform(0.0, 31.0, size=40)])
    v = np.concatenate([[16.0], rng.uniform(0.0, 31.0, size=40)])
    z = np.concatenate([[5.0], rng.uniform(8.0, 14.0, size=40)])
    cloud = PointCloud(back_project(u, v, z, K32), colors=rng.uniform(0.2, 1.0, size=(41, 3)),
                       labels=rng.integers(0, 4, size=41))
    return Sample(rng.uniform(0.0, 1.0, size=(3, 32, 32)), cloud, K32)


def tiny_dataset(n: int = 2, seed: int = 0) -> Dataset:
    return generate(SceneSpec(width=32, height=32, focal=24.0, lidar_lines=16, seed=seed), n)


class ComputeErfTestCase(TestCase):

    def test_isolated_voxel_keeps_all_3d_mass(self):
        sample = crafted_sample()
        with_mass = 0
        for seed in range(8):
            model = MM2D3D(ModelConfig(widths_2d=(4,), widths_3d=(4,), seed=seed))
            result = compute_erf(model, sample, 0)
            self.assertEqual(result.mass_3d[1:].sum(), 0.0)
            if result.mass_3d[0] > 0:
                with_mass += 1
                self.assertAlmostEqual(result.locality('3d', 1e-6), 1.0)
        self.assertGreater(with_mass, 0)

    def test_masses_are_normalized(self):
        sample = tiny_dataset(1)[0]
        _, _, mask = pixel_indices(sample.cloud, sample.K)
        model = MM2D3D(TINY_MODEL)
        totals = []
        for anchor in np.flatnonzero(mask)[:6]:
            result = compute_erf(model, sample, int(anchor))
            self.assertEqual(result.mass_2d.shape, (32, 32))
            sums = [mass.sum() for mass in (result.mass_3d, result.mass_2d, result.mass_2d_points)]
            for mass in (result.mass_3d, result.mass_2d, result.mass_2d_points):
                self.assertTrue((mass >= 0).all())
            for total in sums:
                self.assertTrue(abs(total - 1.0) < 1e-9 or total == 0.0)
            self.assertAlmostEqual(sums[1], sums[2], delta=1e-9)
            totals.append(sums)
        self.assertTrue(any(s[0] > 0 for s in totals))
        self.assertTrue(any(s[1] > 0 for s in totals))

    def test_locality_curves(self):
        sample = crafted_sample(1)
        result = compute_erf(MM2D3D(TINY_MODEL), sample, 0)
        for branch in ('2d', '3d'):
            curve = result.curve(branch)
            fractions = [f for _, f in curve]
            self.assertTrue(all(a <= b for a, b in zip(fractions, fractions[1:])))
            self.assertEqual(curve[-1][0], result.diameter)
            if result.point_mass(branch).sum() > 0:
                self.assertAlmostEqual(fractions[-1], 1.0)

    def test_anchor_outside_image(self):
        sample = crafted_sample()
        positions = np.vstack([sample.cloud.positions, [[20.0, 0.0, 5.0]]])
        cloud = PointCloud(positions, np.vstack([sample.cloud.colors, [[0.5, 0.5, 0.5]]]))
        outside = Sample(sample.image, cloud, sample.K)
        with self.assertRaises(DomainError):
            compute_erf(MM2D3D(TINY_MODEL), outside, len(cloud) - 1)
        with self.assertRaises(UsageError):
            compute_erf(MM2D3D(TINY_MODEL), outside, len(cloud))

    def test_unsampled_pixels_only_reach_the_2d_branch(self):
        sample = tiny_dataset(1)[0]
        rows, cols, mask = pixel_indices(sample.cloud, sample.K)
        untouched = np.ones((32, 32), dtype=bool)
        untouched[rows[mask], cols[mask]] = False
        image = sample.image.copy()
        image[:, untouched] = 1.0 - image[:, untouched]
        model = MM2D3D(TINY_MODEL)
        before = model(sample)
        after = model(Sample(image, sample.cloud, sample.K))
        np.testing.assert_array_equal(after.out_3d.main_logits.data, before.out_3d.main_logits.data)
        self.assertFalse(np.array_equal(after.out_2d.main_logits.data, before.out_2d.main_logits.data))

    def test_parameter_gradients_are_cleared(self):
        model = MM2D3D(TINY_MODEL)
        compute_erf(model, crafted_sample(), 0)
        self.assertTrue(all(p.grad is None for p in model.parameters()))


class ReprojectTestCase(TestCase):

    def test_nearest_projected_point(self):
        cloud = PointCloud(back_project([4.0, 25.0], [4.0, 25.0], [5.0, 5.0], K32))
        mass = np.zeros((32, 32))
        mass[6, 5] = 0.25
        mass[30, 28] = 0.75
        np.testing.assert_allclose(reproject_pixels(mass, cloud, K32), [0.25, 0.75])

    def test_zero_mass(self):
        cloud = PointCloud(back_project([4.0], [4.0], [5.0], K32))
        np.testing.assert_array_equal(reproject_pixels(np.zeros((32, 32)), cloud, K32), [0.0])


class ComplementarityTestCase(TestCase):

    def test_foreground_anchors(self):
        dataset = tiny_dataset(2)
        anchors = pick_anchors(dataset, 10, seed=3)
        self.assertEqual(len(set(anchors)), len(anchors))
        for s, p in anchors:
            self.assertNotEqual(dataset[s].cloud.labels[p], GROUND)
        self.assertEqual(anchors, pick_anchors(dataset, 10, seed=3))

    def test_report(self):
        report = complementarity(MM2D3D(TINY_MODEL), tiny_dataset(1), anchors=3)
        self.assertEqual(len(report.fractions_2d), 3)
        self.assertEqual(len(report.fractions_3d), 3)
        for value in report.fractions_2d + report.fractions_3d:
            self.assertTrue(0.0 <= value <= 1.0)
        self.assertTrue(set(report.to_dict()).issuperset({'median_2d', 'median_3d', 'majority'}))

    def test_no_anchor(self):
        with self.assertRaises(UsageError):
            complementarity(MM2D3D(TINY_MODEL), tiny_dataset(1), anchors=0)


class ExportTestCase(TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        rng = np.random.default_rng(0)
        positions = back_project(rng.uniform(0, 31, 12), rng.uniform(0, 31, 12), rng.uniform(2, 9, 12), K32)
        mass_2d = rng.random((32, 32))
        mass_2d[7, 19] = 5.0
        self.result = ErfResult(anchor=0, positions=positions,
                                mass_3d=rng.dirichlet(np.ones(12)),
                                mass_2d=mass_2d / mass_2d.sum(),
                                mass_2d_points=rng.dirichlet(np.ones(12)),
                                predicted_2d=1, predicted_3d=2)

    def tearDown(self):
        self.tmp.cleanup()

    def test_ply_round_trip(self):
        ply, _, _ = export_erf(self.result, self.tmp.name)
        values = read_ply(ply)
        self.assertEqual(list(values), ['x', 'y', 'z', 'erf2d', 'erf3d'])
        np.testing.assert_allclose(values['erf3d'], self.result.mass_3d, rtol=1e-7)
        np.testing.assert_allclose(values['erf2d'], self.result.mass_2d_points, rtol=1e-7)
        np.testing.assert_allclose(values['x'], self.result.positions[:, 0], rtol=1e-7, atol=1e-9)

    def test_heatmap_peak(self):
        _, heatmap, _ = export_erf(self.result, self.tmp.name)
        with Image.open(heatmap) as image:
            self.assertEqual(image.size, (32, 32))
            pixels = np.asarray(image.convert('RGB'), dtype=np.int64).sum(axis=2)
        self.assertEqual(np.unravel_index(np.argmax(pixels), pixels.shape), (7, 19))
        with open(heatmap, 'rb') as f:
            self.assertEqual(f.read(2), b'P6')

    def test_zero_mass_files(self):
        zero = ErfResult(anchor=0, positions=self.result.positions, mass_3d=np.zeros(12),
                         mass_2d=np.zeros((32, 32)), mass_2d_points=np.zeros(12),
                         predicted_2d=0, predicted_3d=0)
        ply, heatmap, table = export_erf(zero, self.tmp.name)
        self.assertFalse(read_ply(ply)['erf3d'].any())
        with Image.open(heatmap) as image:
            self.assertFalse(np.asarray(image).any())
        with open(table) as f:
            lines = f.read().splitlines()
        self.assertEqual(lines[0].split('\t'), ['radius_m', 'erf2d', 'erf3d'])
        self.assertTrue(all(line.endswith('0.000000\t0.000000') for line in lines[1:]))

    def test_locality_table(self):
        _, _, table = export_erf(self.result, self.tmp.name)
        with open(table) as f:
            rows = [line.split('\t') for line in f.read().splitlines()[1:]]
        self.assertEqual(len(rows), len(self.result.curve('3d')))
        self.assertAlmostEqual(float(rows[-1][2]), 1.0, places=5)

    def test_upscaled_heatmap(self):
        path = os.path.join(self.tmp.name, 'big.ppm')
        write_heatmap(self.result.mass_2d, path, upscale=4)
        with Image.open(path) as image:
            self.assertEqual(image.size, (128, 128))

    def test_unwritable_directory(self):
        blocker = os.path.join(self.tmp.name, 'file')
        with open(blocker, 'w') as f:
            f.write('x')
        with self.assertRaises(FormatError):
            export_erf(self.result, os.path.join(blocker, 'erf'))

    def test_not_a_ply(self):
        path = os.path.join(self.tmp.name, 'bad.ply')
        with open(path, 'w') as f:
            f.write('hello\n')
        with self.assertRaises(FormatError):
            read_ply(path)
