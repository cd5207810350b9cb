import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from tripletshot_lib.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from tripletshot_lib.datasets import OneShotSet
from tripletshot_lib.exceptions import ConfigError, IngestionError, NumericError
from tripletshot_lib.losses import EmbeddedTriplets, LossConfig, total_loss
from tripletshot_lib.network import build_network, embed
from tripletshot_lib.training import (
    CHECKPOINT_FILE,
    METRICS_COLUMNS,
    TrainConfig,
    finetune,
    read_metrics,
    train,
    train_siamese,
)
from tripletshot_project.testing import synthetic_dataset, tiny_arch


def oneshot_of(dataset):
    rows = [int(dataset.class_indices(c)[0]) for c in range(dataset.num_classes)]
    return OneShotSet(dataset.images[rows], np.arange(dataset.num_classes), list(dataset.class_names),
                      augmentation=dataset.augmentation)


class TrainLoopTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.base = synthetic_dataset(num_classes=5, per_class=4, augmentation='affine')
        self.arch = tiny_arch()
        self.loss = LossConfig()

    def tearDown(self):
        self.tmp.cleanup()

    def config(self, **overrides):
        values = dict(batch_size=4, max_iterations=4, seed=1, checkpoint_every=2)
        values.update(overrides)
        return TrainConfig(**values)

    def test_metrics_and_checkpoint(self):
        seen = []
        result = train(self.base, self.arch, self.config(), self.loss, self.root / 'run',
                       progress=seen.append, deterministic=True)
        rows = read_metrics(result.metrics_path)
        self.assertEqual(list(rows[0]), list(METRICS_COLUMNS))
        self.assertEqual([r['iteration'] for r in rows], ['0', '1', '2', '3'])
        self.assertEqual({r['wall_ms'] for r in rows}, {'0'})
        self.assertEqual({r['val_accuracy'] for r in rows}, {''})
        self.assertEqual(float(rows[0]['lr']), 1e-4)
        for r in rows:
            self.assertAlmostEqual(float(r['total_loss']),
                                   float(r['batch_loss']) + 1e-3 * float(r['reg_loss']), places=5)
        self.assertEqual(len(seen), 4)
        saved = load_checkpoint(result.checkpoint_path)
        self.assertEqual(saved.iteration, 4)
        self.assertEqual(saved.adam.t, 4)
        self.assertEqual(result.checkpoint_path.name, CHECKPOINT_FILE)

    def test_parameters_move(self):
        result = train(self.base, self.arch, self.config(max_iterations=2), self.loss, self.root / 'run')
        fresh = train(self.base, self.arch, self.config(max_iterations=0), self.loss, self.root / 'fresh')
        moved = [not np.array_equal(p.data, fresh.model.parameters[name].data)
                 for name, p in result.model.parameters.items()]
        self.assertTrue(any(moved))
        self.assertEqual(fresh.rows, [])

    def test_repeatable_and_worker_independent(self):
        a = train(self.base, self.arch, self.config(), self.loss, self.root / 'a', deterministic=True)
        b = train(self.base, self.arch, self.config(), self.loss, self.root / 'b', deterministic=True)
        threaded = train(self.base, self.arch, self.config(prefetch_workers=2), self.loss, self.root / 'c')
        self.assertEqual(a.checkpoint_path.read_bytes(), b.checkpoint_path.read_bytes())
        self.assertEqual(a.metrics_path.read_bytes(), b.metrics_path.read_bytes())
        self.assertEqual(a.checkpoint_path.read_bytes(), threaded.checkpoint_path.read_bytes())

    def test_resume_replays_the_uninterrupted_run(self):
        full = train(self.base, self.arch, self.config(), self.loss, self.root / 'full', deterministic=True)
        first = train(self.base, self.arch, self.config(max_iterations=2), self.loss, self.root / 'split',
                      deterministic=True)
        resumed = train(self.base, self.arch, self.config(), self.loss, self.root / 'split',
                        resume=load_checkpoint(first.checkpoint_path), deterministic=True)
        self.assertEqual([r['iteration'] for r in resumed.rows], [2, 3])
        self.assertEqual(full.checkpoint_path.read_bytes(), resumed.checkpoint_path.read_bytes())
        self.assertEqual(full.metrics_path.read_bytes(), resumed.metrics_path.read_bytes())

    def test_resume_needs_a_matching_arch(self):
        first = train(self.base, self.arch, self.config(max_iterations=1), self.loss, self.root / 'run')
        other = tiny_arch(batch_norm=False)
        with self.assertRaises(ConfigError):
            train(self.base, other, self.config(), self.loss, self.root / 'run',
                  resume=load_checkpoint(first.checkpoint_path))

    def test_input_shape_must_match(self):
        with self.assertRaises(ConfigError):
            train(self.base, tiny_arch(size=12), self.config(), self.loss, self.root / 'run')

    def test_divergence_raises_and_keeps_the_last_checkpoint(self):
        cfg = self.config(initial_lr=1e30, checkpoint_every=1, max_iterations=5)
        with np.errstate(over='ignore', invalid='ignore'):
            with self.assertRaises(NumericError) as cm:
                train(self.base, self.arch, cfg, self.loss, self.root / 'run', deterministic=True)
        self.assertEqual(cm.exception.iteration, 1)
        self.assertEqual(load_checkpoint(self.root / 'run' / CHECKPOINT_FILE).iteration, 1)
        self.assertEqual(len(read_metrics(self.root / 'run' / 'metrics.csv')), 1)

    def test_validation_accuracy_column(self):
        validation = synthetic_dataset(num_classes=4, per_class=3, prefix='val', seed=2)
        cfg = self.config(eval_every=2, val_way=3, val_runs=2)
        result = train(self.base, self.arch, cfg, self.loss, self.root / 'run', validation=validation)
        accuracies = [r['val_accuracy'] for r in result.rows]
        self.assertIsNone(accuracies[0])
        self.assertIsNotNone(accuracies[1])
        self.assertTrue(0.0 <= accuracies[3] <= 1.0)


class FinetuneTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.base = synthetic_dataset(num_classes=5, per_class=4)
        self.novel = synthetic_dataset(num_classes=3, per_class=2, prefix='novel', seed=5, role='novel')
        self.cfg = TrainConfig(batch_size=4, max_iterations=3, seed=2, checkpoint_every=0)
        self.pretrained = train(self.base, tiny_arch(), self.cfg, LossConfig(), self.root / 'pre',
                                deterministic=True)

    def tearDown(self):
        self.tmp.cleanup()

    def test_zero_iterations_reproduce_the_checkpoint(self):
        source = load_checkpoint(self.pretrained.checkpoint_path)
        result = finetune(source, self.base, oneshot_of(self.novel), self.cfg, LossConfig(), self.root / 'ft',
                          iterations=0, deterministic=True)
        self.assertEqual(result.checkpoint_path.read_bytes(), self.pretrained.checkpoint_path.read_bytes())

    def test_zero_iterations_keep_the_loaded_iteration(self):
        source = load_checkpoint(self.pretrained.checkpoint_path)
        result = finetune(source, self.base, oneshot_of(self.novel), self.cfg, LossConfig(), self.root / 'ft',
                          iterations=0, start_iteration=10000, deterministic=True)
        self.assertEqual(result.checkpoint.iteration, 3)
        self.assertEqual(result.checkpoint_path.read_bytes(), self.pretrained.checkpoint_path.read_bytes())

    def test_zero_iterations_without_optimizer_state(self):
        source = load_checkpoint(self.pretrained.checkpoint_path)
        bare = self.root / 'bare.ckpt'
        save_checkpoint(bare, Checkpoint(model=source.model, iteration=source.iteration))
        result = finetune(load_checkpoint(bare), self.base, oneshot_of(self.novel), self.cfg, LossConfig(),
                          self.root / 'ft', iterations=0, deterministic=True)
        self.assertEqual(result.checkpoint_path.read_bytes(), bare.read_bytes())

    def test_schedule_continues_from_the_checkpoint(self):
        source = load_checkpoint(self.pretrained.checkpoint_path)
        before = {name: p.data.copy() for name, p in source.model.parameters.items()}
        result = finetune(source, self.base, oneshot_of(self.novel), self.cfg, LossConfig(), self.root / 'ft',
                          iterations=2, deterministic=True)
        self.assertEqual(result.checkpoint.iteration, 5)
        self.assertEqual(result.checkpoint.adam.t, 5)
        self.assertEqual([r['iteration'] for r in result.rows], [0, 1])
        for name, p in source.model.parameters.items():
            np.testing.assert_array_equal(p.data, before[name])

    def test_start_iteration_sets_the_learning_rate(self):
        source = load_checkpoint(self.pretrained.checkpoint_path)
        result = finetune(source, self.base, oneshot_of(self.novel), self.cfg, LossConfig(), self.root / 'ft',
                          iterations=1, start_iteration=10000, deterministic=True)
        self.assertEqual(result.rows[0]['lr'], 5e-5)

    def test_needs_two_one_shot_classes(self):
        source = load_checkpoint(self.pretrained.checkpoint_path)
        lonely = OneShotSet(self.novel.images[:1], [0], ['novel00'], augmentation='none')
        with self.assertRaises(ConfigError):
            finetune(source, self.base, lonely, self.cfg, LossConfig(), self.root / 'ft', iterations=1)


class LearningTests(SimpleTestCase):
    """Short runs on separable toy classes; each check is a median over five seeds."""

    seeds = range(5)

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.base = synthetic_dataset(num_classes=5, per_class=4)

    def tearDown(self):
        self.tmp.cleanup()

    def test_loss_falls_over_fifty_steps(self):
        drops = []
        for seed in self.seeds:
            cfg = TrainConfig(initial_lr=1e-2, batch_size=8, max_iterations=50, seed=seed, checkpoint_every=0)
            rows = train(self.base, tiny_arch(), cfg, LossConfig(), self.root / f'seed{seed}',
                         deterministic=True).rows
            losses = [row['total_loss'] for row in rows]
            drops.append(np.mean(losses[-10:]) - np.mean(losses[:10]))
        self.assertLess(np.median(drops), 0.0)

    def test_finetuning_lowers_the_one_shot_triplet_loss(self):
        novel = synthetic_dataset(num_classes=4, per_class=2, prefix='novel', seed=7, role='novel')
        oneshot = oneshot_of(novel)
        # (x_k, x_k, x_k+1) for every one-shot class, fixed across seeds
        images = np.concatenate([oneshot.images, oneshot.images, np.roll(oneshot.images, 1, axis=0)])
        config = LossConfig()

        def fixed_batch_loss(model):
            return total_loss(EmbeddedTriplets.from_stacked(embed(model, images, mode='eval'), len(oneshot)),
                              config).item()

        before, after = [], []
        for seed in self.seeds:
            pre_cfg = TrainConfig(initial_lr=1e-3, batch_size=8, max_iterations=20, seed=seed, checkpoint_every=0)
            pretrained = train(self.base, tiny_arch(), pre_cfg, config, self.root / f'pre{seed}',
                               deterministic=True).checkpoint
            ft_cfg = TrainConfig(initial_lr=1e-3, batch_size=8, seed=seed, checkpoint_every=0)
            tuned = finetune(pretrained, self.base, oneshot, ft_cfg, config, self.root / f'ft{seed}',
                             iterations=30, deterministic=True)
            before.append(fixed_batch_loss(pretrained.model))
            after.append(fixed_batch_loss(tuned.model))
        self.assertLessEqual(np.median(after), np.median(before))


class SiameseTrainingTests(SimpleTestCase):
    def test_head_is_trained_and_saved(self):
        base = synthetic_dataset(num_classes=4, per_class=3)
        cfg = TrainConfig(batch_size=4, max_iterations=2, seed=0, checkpoint_every=0)
        with tempfile.TemporaryDirectory() as tmp:
            result = train_siamese(base, tiny_arch(), cfg, LossConfig(), Path(tmp), deterministic=True)
            saved = load_checkpoint(result.checkpoint_path)
            self.assertIsNotNone(saved.head)
            self.assertNotEqual(saved.head.weight.item(), -1.0)
            self.assertEqual({r['reg_loss'] for r in result.rows}, {0.0})
            self.assertIn('siamese.weight', saved.adam.m)

            resumed = train_siamese(base, tiny_arch(), TrainConfig(batch_size=4, max_iterations=3, seed=0),
                                    LossConfig(), Path(tmp), resume=saved, deterministic=True)
            self.assertEqual(resumed.checkpoint.iteration, 3)


class CheckpointTests(SimpleTestCase):
    def test_round_trip(self):
        model = build_network(tiny_arch(dtype='float64'))
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(Path(tmp) / 'm.ckpt', Checkpoint(model=model, iteration=7))
            loaded = load_checkpoint(path)
            self.assertEqual(loaded.iteration, 7)
            self.assertIsNone(loaded.adam)
            self.assertEqual(loaded.arch, model.arch)
            self.assertEqual(loaded.model.parameters['fc-1.weight'].dtype, np.float64)

    def test_truncated_file(self):
        model = build_network(tiny_arch())
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(Path(tmp) / 'm.ckpt', Checkpoint(model=model))
            path.write_bytes(path.read_bytes()[:-16])
            with self.assertRaises(IngestionError):
                load_checkpoint(path)
