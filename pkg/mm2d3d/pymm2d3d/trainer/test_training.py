import json
import os
import tempfile
from dataclasses import replace
from unittest import TestCase

import numpy as np
import pytest

from pymm2d3d.autodiff import Tensor, mul, sum as tsum
from pymm2d3d.errors import ConfigError, FormatError, NumericError, UsageError
from pymm2d3d.forge import Dataset, Sample, SceneSpec, generate
from pymm2d3d.geometry import project
from pymm2d3d.nets import MM2D3D, ModelConfig
from pymm2d3d.nets.checkpoint import encode
from pymm2d3d.trainer import (
    AdamW,
    ConfusionMatrix,
    ExperimentConfig,
    FUSION_STREAM,
    OneCycleSchedule,
    PseudoLabelSet,
    TrainSettings,
    Trainer,
    UdaConfig,
    augment,
    evaluate,
    generate_pseudo_labels,
    hflip,
    load_config,
    load_pseudo_labels,
    load_yaml,
    point_labels_2d,
    save_pseudo_labels,
    select_confident,
    transform_3d,
)
from pymm2d3d.trainer.protocols import (
    ProtocolSettings,
    depth_ablation,
    erf_complementarity,
    self_training,
    source_only_vs_adaptation,
)


TINY_MODEL = ModelConfig(widths_2d=(4, 4, 4, 4), widths_3d=(4, 4, 4))


def tiny_dataset(n: int = 2, seed: int = 0, **spec) -> Dataset:
    values = dict(width=32, height=32, focal=24.0, lidar_lines=16, seed=seed)
    values.update(spec)
    return generate(SceneSpec(**values), n)


def tiny_config(adapt: bool = False, **train) -> ExperimentConfig:
    settings = dict(epochs=1, augment=True)
    settings.update(train)
    return ExperimentConfig(model=TINY_MODEL, train=TrainSettings(**settings),
                            uda=UdaConfig() if adapt else None)


class AugmentTestCase(TestCase):

    def setUp(self):
        self.sample = tiny_dataset(1)[0]

    def test_double_flip_is_identity(self):
        image, cloud = hflip(self.sample.image, self.sample.cloud, self.sample.K)
        image, cloud = hflip(image, cloud, self.sample.K)
        np.testing.assert_array_equal(image, self.sample.image)
        before, _ = project(self.sample.cloud, self.sample.K)
        after, _ = project(cloud, self.sample.K)
        np.testing.assert_allclose(after, before, atol=1e-3)

    def test_flip_mirrors_columns(self):
        _, cloud = hflip(self.sample.image, self.sample.cloud, self.sample.K)
        before, _ = project(self.sample.cloud, self.sample.K)
        after, _ = project(cloud, self.sample.K)
        np.testing.assert_allclose(after[:, 0], self.sample.K.width - 1 - before[:, 0], atol=1e-3)
        np.testing.assert_allclose(after[:, 1], before[:, 1], atol=1e-3)

    def test_identity_transform(self):
        positions = self.sample.cloud.positions.astype(np.float64)
        np.testing.assert_allclose(transform_3d(positions, False, 1.0, 0.0), positions, atol=1e-12)

    def test_rotation_keeps_height(self):
        positions = self.sample.cloud.positions.astype(np.float64)
        out = transform_3d(positions, True, 1.02, 7.0)
        np.testing.assert_allclose(out[:, 1], 1.02 * positions[:, 1], atol=1e-9)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.02 * np.linalg.norm(positions, axis=1), rtol=1e-9)

    def test_labels_preserved(self):
        for mode in ('2d', '3d'):
            for seed in range(4):
                out = augment(self.sample, mode, seed)
                np.testing.assert_array_equal(out.cloud.labels, self.sample.cloud.labels)

    def test_jitter_range(self):
        out = augment(self.sample, '2d', 3)
        self.assertTrue((out.image >= 0).all() and (out.image <= 1).all())

    def test_unknown_mode(self):
        with self.assertRaises(UsageError):
            augment(self.sample, '4d', 0)


class OptimTestCase(TestCase):

    def test_one_cycle_shape(self):
        schedule = OneCycleSchedule(100, peak=1e-3, warmup=0.3, floor=1e-5)
        self.assertAlmostEqual(schedule.lr(0), 1e-3 / 25)
        self.assertAlmostEqual(schedule.lr(30), 1e-3)
        self.assertAlmostEqual(schedule.lr(99), 1e-5)
        lrs = [schedule.lr(s) for s in range(100)]
        self.assertTrue(all(a <= b for a, b in zip(lrs[:30], lrs[1:31])))
        self.assertTrue(all(a >= b for a, b in zip(lrs[30:-1], lrs[31:])))

    def test_adamw_first_step(self):
        p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        p.grad = np.array([0.3, -0.1, 2.0])
        start = p.data.astype(np.float64).copy()
        AdamW([p], lr=0.01, weight_decay=0.1).step()
        expected = start * (1 - 0.01 * 0.1) - 0.01 * np.sign([0.3, -0.1, 2.0])
        np.testing.assert_allclose(p.data, expected, rtol=1e-5)

    def test_adamw_minimizes(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        optimizer = AdamW([x], lr=0.1, weight_decay=0.0)
        goal = Tensor(np.array([3.0, -1.0, 0.5]))
        for _ in range(300):
            optimizer.zero_grad()
            diff = x - goal
            tsum(mul(diff, diff)).backward()
            optimizer.step()
        np.testing.assert_allclose(x.data, goal.data, atol=0.05)

    def test_invalid(self):
        with self.assertRaises(ConfigError):
            OneCycleSchedule(0)
        with self.assertRaises(ConfigError):
            AdamW([], lr=-1.0)


class PseudoLabelTestCase(TestCase):

    def test_sort_and_cut(self):
        predicted = np.array([2, 2, 2, 2])
        confidence = np.array([0.6, 0.9, 0.55, 0.8])
        np.testing.assert_array_equal(select_confident(predicted, confidence, 0.5), [-1, 2, -1, 2])

    def test_keep_all(self):
        predicted = np.array([0, 1, 1, 3])
        np.testing.assert_array_equal(select_confident(predicted, np.random.rand(4), 1.0), predicted)

    def test_ties_go_to_earlier_points(self):
        out = select_confident(np.array([1, 1, 1]), np.array([0.7, 0.7, 0.7]), 0.5)
        np.testing.assert_array_equal(out, [1, 1, -1])

    def test_monotone_in_keep_fraction(self):
        rng = np.random.default_rng(0)
        predicted, confidence = rng.integers(0, 4, size=200), rng.random(200)
        loose = select_confident(predicted, confidence, 0.7)
        strict = select_confident(predicted, confidence, 0.3)
        kept = strict != -1
        self.assertTrue((loose[kept] == strict[kept]).all())
        self.assertLessEqual(kept.sum(), (loose != -1).sum())

    def test_invalid_fraction(self):
        with self.assertRaises(UsageError):
            select_confident(np.array([0]), np.array([1.0]), 0.0)

    def test_generate_and_round_trip(self):
        target = tiny_dataset(2, seed=7)
        model = MM2D3D(TINY_MODEL)
        labels = generate_pseudo_labels(model, target, keep_fraction=1.0)
        for i, sample in enumerate(target):
            prediction = model.predict(sample)
            np.testing.assert_array_equal(labels.labels_3d[i], prediction.labels_3d)
            np.testing.assert_array_equal(labels.labels_2d[i], prediction.labels_2d)
        fused = generate_pseudo_labels(model, target, keep_fraction=0.5, variant='fused')
        self.assertEqual(fused.provenance, ('avg', 'avg'))
        np.testing.assert_array_equal(fused.labels_2d[0], fused.labels_3d[0])

        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'pseudo.npz')
            save_pseudo_labels(fused, path)
            loaded = load_pseudo_labels(path)
        self.assertEqual(loaded.variant, 'fused')
        self.assertAlmostEqual(loaded.keep_fraction, 0.5)
        for a, b in zip(fused.labels_3d, loaded.labels_3d):
            np.testing.assert_array_equal(a, b)

    def test_empty_target(self):
        with self.assertRaises(UsageError):
            generate_pseudo_labels(MM2D3D(TINY_MODEL), Dataset([]))

    def test_unreadable_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(FormatError):
                load_pseudo_labels(os.path.join(tmp, 'missing.npz'))
            path = os.path.join(tmp, 'junk.npz')
            with open(path, 'wb') as f:
                f.write(b'not an archive')
            with self.assertRaises(FormatError):
                load_pseudo_labels(path)


class MetricsTestCase(TestCase):

    def test_perfect(self):
        matrix = ConfusionMatrix(3)
        labels = np.array([0, 1, 2, 2, 1])
        matrix.update(labels, labels)
        np.testing.assert_array_equal(matrix.iou(), [1.0, 1.0, 1.0])
        self.assertEqual(matrix.miou(), 1.0)

    def test_binary_hand_oracle(self):
        matrix = ConfusionMatrix(2)
        matrix.update(np.array([0, 0, 1, 1]), np.array([0, 0, 0, 0]))
        np.testing.assert_allclose(matrix.iou(), [0.5, 0.0])
        self.assertAlmostEqual(matrix.miou(), 0.25)

    def test_absent_class_excluded(self):
        matrix = ConfusionMatrix(4)
        matrix.update(np.array([0, 1, 1]), np.array([0, 1, 1]))
        self.assertEqual(matrix.miou(), 1.0)

    def test_ignore_excluded(self):
        matrix = ConfusionMatrix(2)
        matrix.update(np.array([0, -1, 1]), np.array([0, 1, 1]))
        self.assertEqual(matrix.total, 2)
        self.assertTrue((matrix.counts >= 0).all())

    def test_no_labeled_points(self):
        sample = tiny_dataset(1)[0]
        unlabeled = Sample(sample.image, sample.cloud.with_labels(np.full(sample.num_points, -1)), sample.K)
        with self.assertRaises(UsageError):
            evaluate(MM2D3D(TINY_MODEL), Dataset([unlabeled]))

    def test_report(self):
        report = evaluate(MM2D3D(TINY_MODEL), tiny_dataset(1))
        table = report.table()
        self.assertIn('mIoU', table)
        self.assertIn('Avg', table)
        self.assertEqual(set(report.to_dict()), {'2d', '3d', 'avg'})

    def test_fusion_head_is_scored_on_its_own(self):
        dataset = tiny_dataset(1)
        model = MM2D3D(replace(TINY_MODEL, fusion_head=True))
        avg_labels = model.predict(dataset[0]).labels_avg
        forced = (int(avg_labels[0]) + 1) % model.num_classes
        model.fusion.classifier.weight.data[...] = 0.0
        model.fusion.classifier.bias.data[...] = 0.0
        model.fusion.classifier.bias.data[forced] = 10.0

        prediction = model.predict(dataset[0])
        self.assertTrue((prediction.labels_fusion == forced).all())
        report = evaluate(model, dataset)
        self.assertEqual(set(report.to_dict()), {'2d', '3d', 'avg', FUSION_STREAM})
        self.assertIn('Fusion', report.table())
        fusion_counts = report.matrices[FUSION_STREAM].counts
        self.assertEqual(fusion_counts.sum(), fusion_counts[:, forced].sum())
        self.assertFalse(np.array_equal(fusion_counts, report.matrices['avg'].counts))

    def test_no_fusion_stream_without_head(self):
        self.assertIsNone(MM2D3D(TINY_MODEL).predict(tiny_dataset(1)[0]).labels_fusion)


class ConfigTestCase(TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, text: str) -> str:
        path = os.path.join(self.tmp.name, 'config.yaml')
        with open(path, 'w') as f:
            f.write(text)
        return path

    def test_defaults(self):
        config = load_config(self.write('data:\n  source: day\n  target: night\nuda: {}\n'))
        self.assertEqual(config.weights.lambda_s, 0.8)
        self.assertEqual(config.weights.lambda_t, 0.1)
        self.assertEqual(config.weights.lambda_xs, 0.1)
        self.assertEqual(config.weights.lambda_xt, 0.01)
        self.assertEqual(config.train.epochs, 15)
        self.assertEqual(config.uda.keep_fraction, 0.66)
        config.check()

    def test_source_only(self):
        config = load_config(self.write('data:\n  source: day\nmodel:\n  rgb_3d: false\n'))
        self.assertFalse(config.adapts)
        self.assertFalse(config.model.rgb_3d)

    def test_unknown_keys(self):
        with self.assertRaises(ConfigError):
            load_config(self.write('optimizer: {}\n'))
        with self.assertRaises(ConfigError):
            load_config(self.write('train:\n  epoch: 3\n'))

    def test_explicit_lambda_t_needs_pseudo_labels(self):
        config = load_config(self.write('data:\n  source: a\n  target: b\nuda:\n  lambda_t: 0.1\n'))
        with self.assertRaises(ConfigError):
            config.check()
        config.with_pseudo_labels('labels.npz').check()

    def test_negative_weight(self):
        with self.assertRaises(ConfigError):
            load_config(self.write('uda:\n  lambda_xs: -1\n'))

    def test_missing_file(self):
        with self.assertRaises(FormatError):
            load_config(os.path.join(self.tmp.name, 'none.yaml'))

    def test_shipped_configs(self):
        directory = os.path.join(os.path.dirname(__file__), os.pardir, os.pardir, os.pardir, 'configs')
        names = sorted(os.listdir(directory))
        self.assertTrue(names)
        for name in names:
            values = load_yaml(os.path.join(directory, name))
            if set(values) & {'data', 'model', 'train', 'uda'}:
                ExperimentConfig.from_dict(values).check()
            else:
                SceneSpec.from_dict(values)


class TrainerTestCase(TestCase):

    @classmethod
    def setUpClass(cls):
        cls.source = tiny_dataset(2, seed=1)
        cls.target = tiny_dataset(2, seed=2, brightness=0.15, domain='target')

    def test_point_labels_2d(self):
        sample = self.source[0]
        labels = point_labels_2d(sample.cloud, sample.K)
        self.assertEqual(labels.shape, (sample.num_points,))
        visible = labels != -1
        self.assertTrue(visible.any())
        self.assertGreater((labels[visible] == sample.cloud.labels[visible]).mean(), 0.7)

    def test_loss_decreases(self):
        config = tiny_config(epochs=8, augment=False, lr=1e-2)
        result = Trainer(config, self.source).fit()
        losses = result.losses
        self.assertEqual(len(losses), 16)
        self.assertTrue(np.isfinite(losses).all())
        self.assertLess(np.mean(losses[-2:]), losses[0])

    def test_deterministic_checkpoint(self):
        config = tiny_config(adapt=True)
        first = Trainer(config, self.source, self.target).fit()
        second = Trainer(config, self.source, self.target).fit()
        threaded = Trainer(config, self.source, self.target, threads=2).fit()
        self.assertEqual(encode(first.model), encode(second.model))
        self.assertEqual(encode(first.model), encode(threaded.model))

    def test_cycled_sample_gets_fresh_augmentation(self):
        source = Dataset([self.source[0]])
        target = tiny_dataset(3, seed=2, brightness=0.15, domain='target')
        trainer = Trainer(tiny_config(adapt=True), source, target)
        self.assertEqual(trainer.steps_per_epoch, 3)
        orders = (trainer._order(source, 0, 0), trainer._order(target, 0, 1))
        self.assertEqual(list(orders[0]), [0, 0, 0])
        clouds = [trainer._assemble(None, 0, step, orders)[0].cloud_3d.positions for step in range(3)]
        self.assertFalse(np.array_equal(clouds[0], clouds[1]))
        self.assertFalse(np.array_equal(clouds[1], clouds[2]))
        again = trainer._assemble(None, 0, 1, orders)[0].cloud_3d.positions
        np.testing.assert_array_equal(again, clouds[1])

    def test_metrics_log(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'metrics.jsonl')
            Trainer(tiny_config(adapt=True), self.source, self.target).fit(path, eval_set=self.target)
            with open(path) as f:
                records = [json.loads(line) for line in f]
        self.assertEqual([r['split'] for r in records], ['train', 'train', 'eval'])
        self.assertIn('xm_target', records[0])
        self.assertIn('miou_avg', records[-1])

    def test_pseudo_label_term(self):
        model = MM2D3D(TINY_MODEL)
        pseudo = generate_pseudo_labels(model, self.target, keep_fraction=1.0)
        result = Trainer(tiny_config(adapt=True), self.source, self.target, pseudo_labels=pseudo).fit()
        self.assertIn('seg_target', result.records[0])

    def test_fused_pseudo_labels_enable_fusion_head(self):
        pseudo = generate_pseudo_labels(MM2D3D(TINY_MODEL), self.target, keep_fraction=0.5, variant='fused')
        trainer = Trainer(tiny_config(adapt=True), self.source, self.target, pseudo_labels=pseudo)
        self.assertIsNotNone(trainer.model.fusion)
        trainer.fit()

    def test_explicit_lambda_t_without_pseudo_labels(self):
        config = tiny_config(adapt=True)
        config = replace(config, uda=replace(config.uda, lambda_t_explicit=True))
        with self.assertRaises(ConfigError):
            Trainer(config, self.source, self.target)

    def test_pseudo_labels_must_match_target(self):
        pseudo = PseudoLabelSet([np.zeros(3, dtype=np.int64)], [np.zeros(3, dtype=np.int64)], 0.5)
        with self.assertRaises(FormatError):
            Trainer(tiny_config(adapt=True), self.source, self.target, pseudo_labels=pseudo)

    def test_nan_aborts(self):
        trainer = Trainer(tiny_config(), self.source)
        trainer.model.branch_3d.main_head.bias.data[...] = np.nan
        prepared = [trainer.prepare(self.source, 0, 0, 0)]
        with self.assertRaises(NumericError):
            trainer.train_step(0, prepared)


SMOKE = ProtocolSettings(num_source=4, num_target=4, num_eval=2, epochs=1, seeds=(0,), anchors=3)


@pytest.mark.slow
class ProtocolTestCase(TestCase):
    """
    Day -> night runs at the documented scale: 200 source and 200 target
    samples, 15 epochs, three seeds. mIoU values are fractions, so two
    points of mIoU are 0.02.
    """

    def test_smoke_runs(self):
        results = source_only_vs_adaptation(SMOKE)
        for name in ('source_only', 'adapted'):
            self.assertEqual(len(results[name]['per_seed']), 1)
            self.assertTrue(0.0 <= results[name]['mean'] <= 1.0)
        results = self_training(SMOKE)
        self.assertEqual(set(results), {'round1', 'round2_branch', 'round2_fused'})
        for values in results.values():
            self.assertTrue(0.0 <= values['mean'] <= 1.0)
        self.assertEqual(len(erf_complementarity(SMOKE).anchors), 3)

    def test_adaptation_beats_source_only(self):
        results = source_only_vs_adaptation()
        self.assertGreaterEqual(results['adapted']['mean'] - results['source_only']['mean'], 0.02, results)

    def test_depth_encoder_beats_rgb_only(self):
        results = depth_ablation()
        self.assertGreaterEqual(results['rgb_depth']['mean'] - results['rgb_only']['mean'], 0.02, results)

    def test_self_training_round(self):
        results = self_training(variants=('branch',))
        first, second = results['round1'], results['round2_branch']
        self.assertGreaterEqual(second['mean'], first['mean'] - 0.005, results)
        improved = sum(b > a for a, b in zip(first['per_seed'], second['per_seed']))
        self.assertGreaterEqual(improved, 2, results)

    def test_erf_complementarity_on_occlusion_scenes(self):
        report = erf_complementarity(ProtocolSettings(anchors=20))
        self.assertEqual(len(report.anchors), 20)
        self.assertGreater(report.median_3d, report.median_2d, report.to_dict())
