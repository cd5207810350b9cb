import numpy as np
from django.test import SimpleTestCase
from scipy import stats

from tripletshot_lib.datasets import ClassIndexedDataset, OneShotSet
from tripletshot_lib.exceptions import ContractError, SamplingError
from tripletshot_lib.sampling import (
    SOURCE_BASE,
    SOURCE_ONESHOT,
    BatchPrefetcher,
    batch_seed,
    sample_finetune_batch,
    sample_pair_batch,
    sample_triplet_batch,
)
from tripletshot_project.testing import synthetic_dataset


def tiny_balanced(num_classes, per_class=3):
    """Two-pixel images; image i holds its own index so rows can be traced back."""
    labels = np.repeat(np.arange(num_classes), per_class)
    images = np.zeros((len(labels), 1, 1, 2), dtype=np.float32)
    images[:, 0, 0, 0] = np.arange(len(labels))
    return ClassIndexedDataset('tiny', images, labels, [f'c{c}' for c in range(num_classes)],
                               ['g'] * num_classes, augmentation='none')


def oneshot_from(dataset, augmentation='none'):
    rows = [int(dataset.class_indices(c)[0]) for c in range(dataset.num_classes)]
    return OneShotSet(dataset.images[rows], np.arange(dataset.num_classes), list(dataset.class_names),
                      augmentation=augmentation)


class TripletSamplerTests(SimpleTestCase):
    def setUp(self):
        self.base = tiny_balanced(6)

    def test_class_constraints(self):
        batch = sample_triplet_batch(self.base, size=64, seed=3)
        self.assertEqual(len(batch), 64)
        self.assertEqual(batch.pos1.shape, (64, 1, 1, 2))
        self.assertEqual(batch.images().shape, (192, 1, 1, 2))
        self.assertTrue((batch.pos_classes != batch.neg_classes).all())
        self.assertTrue((batch.pos1_index != batch.pos2_index).all())
        labels = self.base.labels
        np.testing.assert_array_equal(labels[batch.pos1_index], batch.pos_classes)
        np.testing.assert_array_equal(labels[batch.pos2_index], batch.pos_classes)
        np.testing.assert_array_equal(labels[batch.neg_index], batch.neg_classes)
        np.testing.assert_array_equal(batch.pos1[:, 0, 0, 0], batch.pos1_index)
        self.assertEqual(set(batch.sources), {SOURCE_BASE})

    def test_same_seed_same_batch(self):
        a = sample_triplet_batch(self.base, size=16, seed=9)
        b = sample_triplet_batch(self.base, size=16, seed=9)
        np.testing.assert_array_equal(a.images(), b.images())
        np.testing.assert_array_equal(a.neg_index, b.neg_index)

    def test_classes_are_uniform(self):
        base = tiny_balanced(10, per_class=2)
        pos = np.zeros(10, dtype=np.int64)
        neg = np.zeros(10, dtype=np.int64)
        for i in range(100):
            batch = sample_triplet_batch(base, size=1000, seed=batch_seed(123, i))
            pos += np.bincount(batch.pos_classes, minlength=10)
            neg += np.bincount(batch.neg_classes, minlength=10)
        self.assertGreater(stats.chisquare(pos).pvalue, 0.01)
        self.assertGreater(stats.chisquare(neg).pvalue, 0.01)
        self.assertTrue((np.abs(pos / pos.sum() - 0.1) < 0.005).all())

    def test_single_instance_classes_are_never_positive(self):
        labels = np.array([0, 1, 1, 2, 2])
        images = np.zeros((5, 1, 2, 2), dtype=np.float32)
        base = ClassIndexedDataset('lopsided', images, labels, ['a', 'b', 'c'], ['g'] * 3, augmentation='none')
        batch = sample_triplet_batch(base, size=200, seed=0)
        self.assertNotIn(0, set(batch.pos_classes.tolist()))
        self.assertIn(0, set(batch.neg_classes.tolist()))

    def test_unsatisfiable_datasets(self):
        one_class = ClassIndexedDataset('one', np.zeros((3, 1, 2, 2)), np.zeros(3, dtype=int), ['a'], ['g'],
                                        augmentation='none')
        with self.assertRaises(SamplingError):
            sample_triplet_batch(one_class, size=4)
        singletons = tiny_balanced(4, per_class=1)
        with self.assertRaises(SamplingError):
            sample_triplet_batch(singletons, size=4)
        with self.assertRaises(ContractError):
            sample_triplet_batch(self.base, size=0)

    def test_augmentation_is_applied(self):
        base = synthetic_dataset(num_classes=3, per_class=3, size=12, augmentation='affine')
        batch = sample_triplet_batch(base, size=8, seed=1)
        self.assertEqual(batch.pos1.shape, (8, 1, 12, 12))
        changed = [not np.array_equal(batch.pos1[b], base.images[batch.pos1_index[b]]) for b in range(8)]
        self.assertTrue(any(changed))


class FinetuneSamplerTests(SimpleTestCase):
    def setUp(self):
        self.base = tiny_balanced(5)
        self.oneshot = oneshot_from(tiny_balanced(4))

    def test_oneshot_fraction_is_one_half(self):
        total, oneshot = 0, 0
        for i in range(40):
            batch = sample_finetune_batch(self.base, self.oneshot, size=250, seed=batch_seed(7, i))
            total += len(batch)
            oneshot += batch.sources.count(SOURCE_ONESHOT)
        sigma = np.sqrt(0.25 / total)
        self.assertLess(abs(oneshot / total - 0.5), 3 * sigma)

    def test_oneshot_triplets(self):
        batch = sample_finetune_batch(self.base, self.oneshot, size=64, seed=2)
        rows = [b for b, s in enumerate(batch.sources) if s == SOURCE_ONESHOT]
        self.assertTrue(rows)
        for b in rows:
            k, j = batch.pos1_index[b], batch.neg_index[b]
            self.assertEqual(batch.pos2_index[b], k)
            self.assertNotEqual(k, j)
            np.testing.assert_array_equal(batch.pos1[b], self.oneshot.images[k])
            # augmentation 'none': A(x_k) is x_k itself
            np.testing.assert_array_equal(batch.pos2[b], self.oneshot.images[k])
            np.testing.assert_array_equal(batch.neg[b], self.oneshot.images[j])
            self.assertNotEqual(batch.pos_classes[b], batch.neg_classes[b])

    def test_oneshot_anchor_is_unaugmented(self):
        shots = synthetic_dataset(num_classes=3, per_class=2, size=12, augmentation='affine')
        oneshot = oneshot_from(shots, augmentation='affine')
        base = synthetic_dataset(num_classes=3, per_class=2, size=12, augmentation='affine', prefix='base')
        batch = sample_finetune_batch(base, oneshot, size=32, seed=4)
        for b, source in enumerate(batch.sources):
            if source == SOURCE_ONESHOT:
                np.testing.assert_array_equal(batch.pos1[b], oneshot.images[batch.pos1_index[b]])
                np.testing.assert_array_equal(batch.neg[b], oneshot.images[batch.neg_index[b]])

    def test_needs_base_and_two_shots(self):
        empty_base = tiny_balanced(3).subset([])
        with self.assertRaises(SamplingError):
            sample_finetune_batch(empty_base, self.oneshot, size=4)
        lonely = OneShotSet(self.oneshot.images[:1], [0], ['c0'], augmentation='none')
        with self.assertRaises(SamplingError):
            sample_finetune_batch(self.base, lonely, size=4)


class PairSamplerTests(SimpleTestCase):
    def test_balance_and_labels(self):
        base = tiny_balanced(4)
        batch = sample_pair_batch(base, size=7, seed=0)
        self.assertEqual(int(batch.same_class.sum()), 4)
        self.assertEqual(int((~batch.same_class).sum()), 3)
        same = batch.same_class
        np.testing.assert_array_equal(batch.first_classes[same], batch.second_classes[same])
        self.assertTrue((batch.first_index[same] != batch.second_index[same]).all())
        self.assertTrue((batch.first_classes[~same] != batch.second_classes[~same]).all())
        np.testing.assert_array_equal(base.labels[batch.first_index], batch.first_classes)
        np.testing.assert_array_equal(base.labels[batch.second_index], batch.second_classes)
        self.assertEqual(batch.images().shape, (14, 1, 1, 2))


class PrefetcherTests(SimpleTestCase):
    def test_threaded_matches_inline(self):
        base = tiny_balanced(5)

        def make(i):
            return sample_triplet_batch(base, size=8, seed=batch_seed(11, i))

        inline = list(BatchPrefetcher(make, 3, 15, workers=0))
        threaded = list(BatchPrefetcher(make, 3, 15, workers=3))
        self.assertEqual([i for i, _ in inline], list(range(3, 15)))
        self.assertEqual([i for i, _ in threaded], list(range(3, 15)))
        for (_, a), (_, b) in zip(inline, threaded):
            np.testing.assert_array_equal(a.images(), b.images())

    def test_negative_workers(self):
        with self.assertRaises(ContractError):
            BatchPrefetcher(lambda i: i, 0, 1, workers=-1)

    def test_batch_seed(self):
        self.assertEqual(batch_seed(5, 10), batch_seed(5, 10))
        self.assertNotEqual(batch_seed(5, 10), batch_seed(5, 11))
        self.assertNotEqual(batch_seed(5, 10), batch_seed(6, 10))
        self.assertGreaterEqual(batch_seed(5, 10), 0)
