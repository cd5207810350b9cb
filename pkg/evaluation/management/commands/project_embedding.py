"""
Management command to export a PCA projection of embedded instances.
"""
import csv
import io

import numpy as np
from django.core.management.base import BaseCommand

from tripletshot_lib.checkpoint import load_checkpoint
from tripletshot_lib.config import write_resolved_config
from tripletshot_lib.containers import atomic_write_text
from tripletshot_lib.evaluation import extract_features, pca_project, prepare_images, write_projection_csv
from tripletshot_project.runtime import (
    add_config_arguments,
    command_errors,
    load_cache,
    load_config,
    resolve_output_dir,
    resolve_run_path,
)

DEFAULT_CLASS_COUNT = 5


class Command(BaseCommand):
    help = 'Embed every instance of the chosen classes and write a 2-d PCA projection CSV'

    def add_arguments(self, parser):
        add_config_arguments(parser)
        parser.add_argument('--checkpoint', type=str, help='Checkpoint (overrides projection.checkpoint)')
        parser.add_argument('--classes', nargs='+', help='Class names to project (overrides projection.classes)')

    def handle(self, *args, **options):
        with command_errors():
            config = load_config(options)
            spec = config.projection
            out_dir = resolve_output_dir(config, options, 'projection')
            write_resolved_config(config, out_dir)

            checkpoint = load_checkpoint(resolve_run_path(options['checkpoint'] or spec.checkpoint,
                                                          'projection.checkpoint'))
            dataset = load_cache(spec.cache or config.data.novel_cache, 'projection.cache')
            names = options['classes'] or list(spec.classes)
            if names:
                class_ids = [dataset.class_id(name) for name in names]
            else:
                rng = np.random.default_rng(config.seed)
                count = min(DEFAULT_CLASS_COUNT, dataset.num_classes)
                class_ids = sorted(int(c) for c in rng.choice(dataset.num_classes, size=count, replace=False))

            rows = np.concatenate([dataset.class_indices(c) for c in class_ids])
            images = prepare_images(checkpoint.model, dataset.images[rows], dataset.augmentation)
            features = extract_features(checkpoint.model, images, config.evaluation.layer)
            projection = pca_project(features, dims=spec.dims)

            path = write_projection_csv(out_dir / 'projection.csv', dataset.labels[rows], projection.coordinates,
                                        point_ids=rows)
            legend = io.StringIO()
            writer = csv.writer(legend, lineterminator='\n')
            writer.writerow(['class_id', 'class_name'])
            for c in class_ids:
                writer.writerow([c, dataset.class_names[c]])
            atomic_write_text(out_dir / 'projection_classes.csv', legend.getvalue())

        explained = ', '.join(f'{v:.3f}' for v in projection.explained)
        self.stdout.write(self.style.SUCCESS(
            f'{len(rows)} points from {len(class_ids)} classes written to {path} (explained variance {explained})'
        ))
