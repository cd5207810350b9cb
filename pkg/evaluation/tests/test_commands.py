import tempfile
from io import StringIO
from pathlib import Path

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from evaluation.tasks import evaluate_layer, sweep_layers
from tripletshot_lib.checkpoint import Checkpoint, save_checkpoint
from tripletshot_lib.evaluation import SeedComparison, comparison_checks, comparison_medians
from tripletshot_lib.losses import SiameseHead
from tripletshot_lib.network import build_network, he_init
from tripletshot_project import celery_app
from tripletshot_project.testing import synthetic_dataset, tiny_arch, write_cache, write_config, write_omniglot_runs


class EvaluationFixtureMixin:
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        model = he_init(build_network(tiny_arch()), seed=2)
        self.checkpoint = str(save_checkpoint(self.root / 'model.ckpt', Checkpoint(model=model, iteration=10)))
        self.siamese = str(save_checkpoint(self.root / 'siamese.ckpt', Checkpoint(
            model=model, iteration=10, head=SiameseHead.with_values(-1.0, 0.0))))
        self.novel_cache = write_cache(self.root, synthetic_dataset(
            num_classes=6, per_class=3, name='novel', prefix='novel', role='novel', seed=6))
        self.config = write_config(
            self.root / 'eval.yaml',
            seed=4,
            data={'novel_cache': self.novel_cache},
            episodes={'way': 4, 'runs': 3, 'queries_per_class': 2},
            evaluation={'checkpoint': self.checkpoint},
            projection={'checkpoint': self.checkpoint},
        )
        self.out_dir = self.root / 'out'

    def tearDown(self):
        self.tmp.cleanup()


class EvaluateEmbeddingCommandTests(EvaluationFixtureMixin, SimpleTestCase):
    def run_command(self, **options):
        out = StringIO()
        call_command('evaluate_embedding', stdout=out, config=self.config, output_dir=str(self.out_dir), **options)
        return out.getvalue()

    def test_embedding_report(self):
        output = self.run_command()
        self.assertIn('3 episodes, 4-way', output)
        lines = (self.out_dir / 'eval_report.csv').read_text().splitlines()
        self.assertEqual(lines[0], 'run,accuracy')
        self.assertEqual([line.split(',')[0] for line in lines[1:]], ['1', '2', '3', 'mean'])
        self.assertTrue((self.out_dir / 'resolved_config.yaml').exists())

    def test_is_repeatable(self):
        self.run_command()
        first = (self.out_dir / 'eval_report.csv').read_bytes()
        self.run_command(overrides=['evaluation.workers=2'])
        self.assertEqual(first, (self.out_dir / 'eval_report.csv').read_bytes())

    def test_conv_layer(self):
        output = self.run_command(layer='conv-1-1')
        self.assertIn('(conv-1-1)', output)

    def test_sweep(self):
        self.run_command(sweep=True)
        lines = (self.out_dir / 'layer_sweep.csv').read_text().splitlines()
        self.assertEqual([line.split(',')[0] for line in lines], ['layer', 'conv-1-1', 'conv-2-1', 'fc-1'])
        for layer in ('conv-1-1', 'conv-2-1', 'fc-1'):
            self.assertTrue((self.out_dir / f'eval_{layer}.csv').exists())

    def test_siamese_checkpoint(self):
        output = self.run_command(checkpoint=self.siamese)
        self.assertIn('Mean accuracy', output)

    def test_fixed_runs(self):
        runs = write_omniglot_runs(self.root / 'runs', runs=2, way=4, size=12)
        self.run_command(overrides=['episodes.protocol=omniglot_fixed', f'data.omniglot_runs_dir={runs}',
                                    'data.omniglot_runs_resize=8'])
        lines = (self.out_dir / 'eval_report.csv').read_text().splitlines()
        self.assertEqual(len(lines), 4)

    def test_errors_exit_2(self):
        for options in ({'layer': 'conv-7-1'}, {'checkpoint': str(self.root / 'missing.ckpt')},
                        {'overrides': ['episodes.way=9']}):
            with self.subTest(options=options):
                with self.assertRaises(CommandError) as cm:
                    self.run_command(**options)
                self.assertEqual(cm.exception.returncode, 2)


class ProjectEmbeddingCommandTests(EvaluationFixtureMixin, SimpleTestCase):
    def run_command(self, **options):
        out = StringIO()
        call_command('project_embedding', stdout=out, config=self.config, output_dir=str(self.out_dir), **options)
        return out.getvalue()

    def test_default_classes(self):
        self.run_command()
        lines = (self.out_dir / 'projection.csv').read_text().splitlines()
        self.assertEqual(lines[0], 'point_id,class_id,x,y')
        self.assertEqual(len(lines), 1 + 5 * 3)
        legend = (self.out_dir / 'projection_classes.csv').read_text().splitlines()
        self.assertEqual(legend[0], 'class_id,class_name')
        self.assertEqual(len(legend), 6)

    def test_named_classes(self):
        output = self.run_command(classes=['novel01', 'novel04'])
        self.assertIn('6 points from 2 classes', output)
        class_ids = {line.split(',')[1] for line in (self.out_dir / 'projection.csv').read_text().splitlines()[1:]}
        self.assertEqual(class_ids, {'1', '4'})

    def test_unknown_class_exits_2(self):
        with self.assertRaises(CommandError) as cm:
            self.run_command(classes=['novel99'])
        self.assertEqual(cm.exception.returncode, 2)


class EvaluationTaskTests(EvaluationFixtureMixin, SimpleTestCase):
    def setUp(self):
        super().setUp()
        self.eager = celery_app.conf.task_always_eager
        celery_app.conf.task_always_eager = True

    def tearDown(self):
        celery_app.conf.task_always_eager = self.eager
        super().tearDown()

    def test_evaluate_layer(self):
        result = evaluate_layer.apply(args=(self.config, 'conv-2-1'), kwargs={'output_dir': str(self.out_dir)}).get()
        self.assertEqual(result['status'], 'success')
        self.assertEqual(result['layer'], 'conv-2-1')
        self.assertTrue(0.0 <= result['mean_accuracy'] <= 1.0)
        self.assertTrue((self.out_dir / 'eval_conv-2-1.csv').exists())

    def test_evaluate_layer_error(self):
        result = evaluate_layer.apply(args=(self.config, 'conv-9-9'), kwargs={'output_dir': str(self.out_dir)}).get()
        self.assertEqual(result['status'], 'error')

    def test_sweep_matches_the_command(self):
        result = sweep_layers.apply(args=(self.config,), kwargs={'output_dir': str(self.out_dir)}).get()
        self.assertEqual(result['status'], 'scheduled')
        self.assertEqual(result['layers'], ['conv-1-1', 'conv-2-1', 'fc-1'])
        from_tasks = (self.out_dir / 'layer_sweep.csv').read_bytes()

        call_command('evaluate_embedding', stdout=StringIO(), config=self.config, sweep=True,
                     output_dir=str(self.root / 'command'))
        self.assertEqual(from_tasks, (self.root / 'command' / 'layer_sweep.csv').read_bytes())


class CompareModelsCommandTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        base_cache = write_cache(self.root, synthetic_dataset(num_classes=5, per_class=4, name='base'))
        novel_cache = write_cache(self.root, synthetic_dataset(
            num_classes=4, per_class=3, name='novel', prefix='novel', role='novel', seed=9))
        self.config = write_config(
            self.root / 'compare.yaml',
            seed=3,
            data={'base_cache': base_cache, 'novel_cache': novel_cache},
            train={'batch_size': 4, 'max_iterations': 3, 'checkpoint_every': 0},
            finetune={'iterations': 2},
            episodes={'way': 3, 'runs': 2},
        )
        self.out_dir = self.root / 'compare'

    def tearDown(self):
        self.tmp.cleanup()

    def run_command(self, **options):
        out = StringIO()
        call_command('compare_models', stdout=out, config=self.config, output_dir=str(self.out_dir),
                     deterministic=True, **options)
        return out.getvalue()

    def test_comparison_csv(self):
        output = self.run_command(seeds=2)
        self.assertIn('2 episodes, 3-way, 2 seed(s)', output)
        self.assertIn('triplet>=siamese: median margin', output)
        lines = (self.out_dir / 'comparison.csv').read_text().splitlines()
        self.assertEqual(lines[0], 'seed,triplet,siamese,finetuned,first_conv,last_conv,fc')
        self.assertEqual([line.split(',')[0] for line in lines[1:4]], ['3', '4', 'median'])
        for line in lines[1:4]:
            values = [float(v) for v in line.split(',')[1:]]
            self.assertEqual(len(values), 6)
            self.assertTrue(all(0.0 <= v <= 1.0 for v in values))
            self.assertEqual(values[0], values[5])
        self.assertEqual(lines[4], '')
        self.assertEqual(lines[5], 'check,median_margin,holds')
        self.assertEqual([line.split(',')[0] for line in lines[6:]],
                         ['triplet>=siamese', 'finetuned>=pretrained', 'fc>=last_conv', 'last_conv>=first_conv'])
        self.assertTrue(all(line.split(',')[2] in ('true', 'false') for line in lines[6:]))
        self.assertTrue((self.out_dir / 'seed03' / 'siamese' / 'siamese.ckpt').exists())
        self.assertTrue((self.out_dir / 'seed04' / 'finetune' / 'run02' / 'finetuned.ckpt').exists())

    def test_is_repeatable(self):
        self.run_command(seeds=1)
        first = (self.out_dir / 'comparison.csv').read_bytes()
        self.run_command(seeds=1)
        self.assertEqual(first, (self.out_dir / 'comparison.csv').read_bytes())

    def test_bad_seed_count_exits_2(self):
        with self.assertRaises(CommandError) as cm:
            self.run_command(seeds=0)
        self.assertEqual(cm.exception.returncode, 2)


class ComparisonReportTests(SimpleTestCase):
    def test_medians_and_checks(self):
        rows = [
            SeedComparison(seed=0, triplet=0.8, siamese=0.6, finetuned=0.9, first_conv=0.3, last_conv=0.5, fc=0.8),
            SeedComparison(seed=1, triplet=0.5, siamese=0.7, finetuned=0.4, first_conv=0.4, last_conv=0.4, fc=0.5),
            SeedComparison(seed=2, triplet=0.7, siamese=0.5, finetuned=0.7, first_conv=0.2, last_conv=0.6, fc=0.7),
        ]
        self.assertAlmostEqual(comparison_medians(rows)['siamese'], 0.6)
        checks = {name: (margin, holds) for name, margin, holds in comparison_checks(rows)}
        self.assertAlmostEqual(checks['triplet>=siamese'][0], 0.2)
        self.assertTrue(checks['triplet>=siamese'][1])
        self.assertAlmostEqual(checks['finetuned>=pretrained'][0], 0.0)
        self.assertTrue(checks['finetuned>=pretrained'][1])
        self.assertTrue(checks['last_conv>=first_conv'][1])

    def test_failed_ordering_is_reported(self):
        rows = [SeedComparison(seed=0, triplet=0.4, siamese=0.6, finetuned=0.3, first_conv=0.5, last_conv=0.4,
                               fc=0.4)]
        holds = {name: ok for name, _, ok in comparison_checks(rows)}
        self.assertEqual(holds, {'triplet>=siamese': False, 'finetuned>=pretrained': False,
                                 'fc>=last_conv': True, 'last_conv>=first_conv': False})
