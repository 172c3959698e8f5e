import os
import tempfile
from dataclasses import replace
from unittest import TestCase

import numpy as np

from pymm2d3d.autodiff import Tensor, add, softmax, sum as tsum
from pymm2d3d.errors import ConfigError, ContractError, DimensionError, FormatError, TruncationError
from pymm2d3d.forge import Sample
from pymm2d3d.geometry import Intrinsics, PointCloud, back_project, make_sparse_depth, pixel_indices
from pymm2d3d.nets import (
    MM2D3D,
    Branch2D,
    Branch3D,
    FusionHead,
    ModelConfig,
    fuse,
    load_checkpoint,
    save_checkpoint,
)


K32 = Intrinsics.centred(32, 32, 24.0)
SMALL = {'widths_2d': (4, 4, 4, 4), 'widths_3d': (4, 4, 4)}


def random_sample(seed: int, n: int = 60) -> Sample:
    rng = np.random.default_rng(seed)
    u = rng.uniform(0.0, 31.0, size=n)
    v = rng.uniform(0.0, 31.0, size=n)
    z = rng.uniform(2.0, 10.0, size=n)
    cloud = PointCloud(back_project(u, v, z, K32),
                       colors=rng.uniform(0.0, 1.0, size=(n, 3)),
                       labels=rng.integers(0, 4, size=n))
    return Sample(rng.uniform(0.0, 1.0, size=(3, 32, 32)), cloud, K32)


def small_model(**overrides) -> MM2D3D:
    return MM2D3D(ModelConfig(**dict(SMALL, **overrides)))


class Branch2DTestCase(TestCase):

    def setUp(self):
        self.sample = random_sample(0)
        self.branch = Branch2D(np.random.default_rng(0), 4, widths=(4, 4, 4, 4))

    def test_shape(self):
        out = self.branch(self.sample.image, make_sparse_depth(self.sample.cloud, K32), self.sample.cloud, K32)
        self.assertEqual(out.main_logits.shape, (60, 4))
        self.assertEqual(out.aux_logits.shape, (60, 4))
        self.assertEqual(out.num_points, 60)

    def test_zero_depth_is_finite(self):
        out = self.branch(self.sample.image, np.zeros((1, 32, 32)), self.sample.cloud, K32)
        self.assertTrue(np.isfinite(out.main_logits.data).all())
        ablated = Branch2D(np.random.default_rng(0), 4, widths=(4, 4, 4, 4), depth_input='zeros')
        out = ablated(self.sample.image, make_sparse_depth(self.sample.cloud, K32), self.sample.cloud, K32)
        self.assertTrue(np.isfinite(out.main_logits.data).all())

    def test_size_mismatch(self):
        with self.assertRaises(DimensionError):
            self.branch(self.sample.image, np.zeros((1, 16, 32)), self.sample.cloud, K32)
        K = Intrinsics.centred(24, 24, 20.0)
        with self.assertRaises(DimensionError):
            self.branch(np.zeros((3, 24, 24)), np.zeros((1, 24, 24)), self.sample.cloud, K)


class Branch3DTestCase(TestCase):

    def setUp(self):
        self.branch = Branch3D(np.random.default_rng(1), 4, widths=(4, 4, 4))

    def test_shared_voxel_rows(self):
        rng = np.random.default_rng(2)
        positions = np.concatenate([[[0.01, 0.01, 5.01], [0.05, 0.05, 5.05]],
                                    rng.uniform(-3.0, 3.0, size=(30, 3)) + [0.0, 0.0, 8.0]])
        colors = rng.uniform(0.0, 1.0, size=(32, 3))
        out = self.branch(positions, colors)
        self.assertEqual(out.main_logits.shape, (32, 4))
        np.testing.assert_array_equal(out.main_logits.data[0], out.main_logits.data[1])
        np.testing.assert_array_equal(out.aux_logits.data[0], out.aux_logits.data[1])

    def test_gated_voxel_features(self):
        cloud = random_sample(3).cloud
        out = self.branch(cloud)
        colors = cloud.colors.astype(np.float64)
        w = self.branch.alpha.weight.data.astype(np.float64)
        b = self.branch.alpha.bias.data.astype(np.float64)
        alpha = 1.0 / (1.0 + np.exp(-(colors @ w.T + b)))
        self.assertTrue(((alpha > 0) & (alpha < 1)).all())
        expected = (alpha * colors)[out.voxels.winners]
        np.testing.assert_allclose(out.inputs.data, expected, rtol=1e-5, atol=1e-7)

    def test_black_colors(self):
        cloud = random_sample(4).cloud
        out = self.branch(cloud.positions, np.zeros((len(cloud), 3)))
        self.assertTrue((out.inputs.data == 0).all())
        self.assertTrue(np.isfinite(out.main_logits.data).all())

    def test_constant_features(self):
        branch = Branch3D(np.random.default_rng(1), 4, widths=(4, 4, 4), rgb_3d=False)
        out = branch(random_sample(5).cloud)
        self.assertEqual(out.inputs.shape[1], 1)
        self.assertTrue((out.inputs.data == 1).all())
        self.assertIsNone(branch.alpha)

    def test_color_count_mismatch(self):
        cloud = random_sample(6).cloud
        with self.assertRaises(DimensionError):
            self.branch(cloud.positions, cloud.colors[:-1])

    def test_tracked_inputs_receive_grad(self):
        out = self.branch(random_sample(7).cloud, track_inputs=True)
        tsum(out.main_logits).backward()
        self.assertTrue(out.inputs.is_leaf)
        self.assertEqual(out.inputs.grad.shape, out.inputs.shape)


class FuseTestCase(TestCase):

    def test_identical(self):
        p = Tensor([[0.2, 0.8], [0.6, 0.4]])
        np.testing.assert_allclose(fuse(p, p).data, p.data)

    def test_symmetric(self):
        out = fuse(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]])

    def test_random_rows(self):
        rng = np.random.default_rng(0)
        a = rng.dirichlet(np.ones(4), size=10)
        b = rng.dirichlet(np.ones(4), size=10)
        out = fuse(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64))
        np.testing.assert_allclose(out.data, (a + b) / 2, atol=1e-7)

    def test_not_probabilities(self):
        with self.assertRaises(ContractError):
            fuse(Tensor([[0.7, 0.7]]), Tensor([[0.5, 0.5]]))


class FusionHeadTestCase(TestCase):

    def test_zero_features_give_bias(self):
        head = FusionHead(np.random.default_rng(0), 3, 2, 4)
        head.classifier.weight.data[...] = 0.0
        head.classifier.bias.data[...] = [0.5, -1.0, 2.0, 0.0]
        logits = head(Tensor(np.zeros((5, 3))), Tensor(np.zeros((5, 2))))
        b = np.array([0.5, -1.0, 2.0, 0.0])
        expected = np.exp(b) / np.exp(b).sum()
        np.testing.assert_allclose(softmax(logits, axis=1).data, np.tile(expected, (5, 1)), rtol=1e-5)

    def test_linear_oracle(self):
        rng = np.random.default_rng(1)
        head = FusionHead(rng, 3, 2, 4)
        f2d, f3d = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
        logits = head(Tensor(f2d, dtype=np.float64), Tensor(f3d, dtype=np.float64))
        W = head.classifier.weight.data.astype(np.float64)
        expected = np.concatenate([f2d, f3d], axis=1) @ W.T + head.classifier.bias.data
        self.assertEqual(logits.shape, (6, 4))
        np.testing.assert_allclose(logits.data, expected, rtol=1e-5, atol=1e-6)

    def test_width_mismatch(self):
        head = FusionHead(np.random.default_rng(0), 3, 2, 4)
        with self.assertRaises(DimensionError):
            head(Tensor(np.zeros((5, 2))), Tensor(np.zeros((5, 2))))


class ModelTestCase(TestCase):

    def test_invalid_config(self):
        with self.assertRaises(ConfigError):
            ModelConfig(depth_input='lidar')
        with self.assertRaises(ConfigError):
            ModelConfig.from_dict({'voxel': 0.1})

    def test_same_seed_same_parameters(self):
        a, b = small_model(seed=3), small_model(seed=3)
        for (name, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(p.data, q.data, err_msg=name)

    def test_all_parameters_reached(self):
        model = small_model(fusion_head=True)
        output = model(random_sample(8))
        loss = add(add(tsum(output.out_2d.main_logits), tsum(output.out_2d.aux_logits)),
                   add(tsum(output.out_3d.main_logits), tsum(output.out_3d.aux_logits)))
        add(loss, tsum(output.fusion_logits)).backward()
        for name, param in model.named_parameters():
            self.assertIsNotNone(param.grad, name)

    def test_unsampled_pixels_only_reach_2d(self):
        model = small_model()
        sample = random_sample(9)
        rows, cols, _ = pixel_indices(sample.cloud, sample.K)
        unsampled = np.ones((32, 32), dtype=bool)
        unsampled[rows, cols] = False
        perturbed = sample.image.copy()
        perturbed[:, unsampled] = 1.0 - perturbed[:, unsampled]
        before = model(sample)
        after = model(Sample(perturbed, sample.cloud, sample.K))
        self.assertEqual(before.out_3d.main_logits.data.tobytes(), after.out_3d.main_logits.data.tobytes())
        self.assertGreater(np.abs(before.out_2d.main_logits.data - after.out_2d.main_logits.data).max(), 0.0)

    def test_predict_rows_are_probabilities(self):
        prediction = small_model().predict(random_sample(10))
        np.testing.assert_allclose(prediction.probs_avg.sum(axis=1), 1.0, atol=1e-5)
        np.testing.assert_allclose(prediction.probs_avg, (prediction.probs_2d + prediction.probs_3d) / 2, atol=1e-6)


class CheckpointTestCase(TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, 'ckpt', 'model.mmck')

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip(self):
        model = small_model(seed=5, rgb_3d=False, depth_input='zeros', fusion_head=True)
        save_checkpoint(model, self.path)
        loaded = load_checkpoint(self.path)
        self.assertEqual(loaded.config, replace(model.config, seed=0))
        sample = random_sample(11)
        np.testing.assert_array_equal(model.predict(sample).probs_avg, loaded.predict(sample).probs_avg)

    def test_bad_magic(self):
        save_checkpoint(small_model(), self.path)
        with open(self.path, 'r+b') as f:
            f.write(b'MMXX')
        with self.assertRaises(FormatError) as ctx:
            load_checkpoint(self.path)
        self.assertEqual(ctx.exception.offset, 0)

    def test_truncated(self):
        save_checkpoint(small_model(), self.path)
        with open(self.path, 'r+b') as f:
            f.truncate(os.path.getsize(self.path) - 8)
        with self.assertRaises(TruncationError):
            load_checkpoint(self.path)

    def test_missing_file(self):
        with self.assertRaises(FormatError):
            load_checkpoint(os.path.join(self.tmp.name, 'none.mmck'))
