"""
Management command to ingest an image dataset into a binary cache.
"""
import os
import tempfile
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from tripletshot_lib.containers import atomic_write_text
from tripletshot_lib.datasets import ingest_natural, ingest_omniglot, make_splits, save_dataset_cache
from tripletshot_lib.exceptions import ConfigError
from tripletshot_lib.config import write_resolved_config
from tripletshot_project.runtime import add_config_arguments, command_errors, load_config


class Command(BaseCommand):
    help = 'Ingest an Omniglot tree or a natural-image manifest into .tsds dataset caches'

    def add_arguments(self, parser):
        parser.add_argument('kind', choices=['omniglot', 'natural'])
        parser.add_argument('root', type=str, help='Dataset root directory')
        parser.add_argument(
            '--out',
            type=str,
            help='Directory for the caches (default: TRIPLETSHOT_DATA_DIR)',
        )
        parser.add_argument('--manifest', type=str, help='filename,label CSV (natural datasets)')
        parser.add_argument('--name', type=str, help='Cache name (natural datasets)')
        parser.add_argument('--resize', type=int, help='Square resize for Omniglot images, e.g. 28')
        parser.add_argument('--role', choices=['base', 'novel'], default='base',
                            help='Role recorded for natural datasets')
        add_config_arguments(parser)

    def handle(self, *args, **options):
        with command_errors():
            config = load_config(options)
            if config.split.kind == 'one_shot':
                raise ConfigError('one_shot splits are drawn at fine-tune time, not stored as caches')
            out_dir = Path(options['out']) if options['out'] else Path(settings.TRIPLETSHOT_DATA_DIR)

            if options['kind'] == 'omniglot':
                self.stdout.write(f'Ingesting Omniglot from {options["root"]}...')
                background, evaluation = ingest_omniglot(options['root'], resize=options['resize'])
                datasets = [background, evaluation]
                if config.split.kind != 'none':
                    datasets.extend(make_splits(background, config.split))
            else:
                if not options['manifest']:
                    raise CommandError('natural datasets need --manifest', returncode=2)
                self.stdout.write(f'Ingesting {options["manifest"]}...')
                dataset = ingest_natural(options['root'], options['manifest'], role=options['role'],
                                         name=options['name'])
                datasets = [dataset]
                if config.split.kind != 'none':
                    datasets.extend(make_splits(dataset, config.split))

            out_dir.mkdir(parents=True, exist_ok=True)
            # every part is staged before any reaches out_dir
            with tempfile.TemporaryDirectory(prefix='.ingest-', dir=out_dir) as staging:
                staged = []
                for dataset in datasets:
                    cache_name, summary_name = f'{dataset.name}.tsds', f'{dataset.name}.summary.txt'
                    save_dataset_cache(dataset, Path(staging) / cache_name)
                    atomic_write_text(Path(staging) / summary_name, dataset.summary())
                    staged.extend([cache_name, summary_name])
                for name in staged:
                    os.replace(Path(staging) / name, out_dir / name)

            for dataset in datasets:
                self.stdout.write(self.style.SUCCESS(
                    f'{out_dir / (dataset.name + ".tsds")}: {dataset.num_classes} classes, {len(dataset)} images, '
                    f'shape {"x".join(map(str, dataset.image_shape))}'
                ))
                for warning in dataset.warnings:
                    self.stdout.write(self.style.WARNING(warning))
            write_resolved_config(config, out_dir)
