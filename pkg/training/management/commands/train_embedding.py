"""
Management command to pre-train the embedding network with the triplet loss.
"""
from django.core.management.base import BaseCommand

from tripletshot_lib.checkpoint import load_checkpoint
from tripletshot_lib.config import write_resolved_config
from tripletshot_lib.datasets import assert_disjoint
from tripletshot_lib.training import train
from tripletshot_project.runtime import (
    add_config_arguments,
    command_errors,
    load_cache,
    load_config,
    load_optional_cache,
    resolve_output_dir,
    resolve_run_path,
)
from training.reporting import progress_printer


class Command(BaseCommand):
    help = 'Train the embedding network on base classes with the triplet ranking loss'

    def add_arguments(self, parser):
        add_config_arguments(parser)
        parser.add_argument(
            '--resume',
            type=str,
            help='Checkpoint to continue from (its iteration count and optimizer state are kept)',
        )

    def handle(self, *args, **options):
        with command_errors():
            config = load_config(options)
            out_dir = resolve_output_dir(config, options, 'train')
            write_resolved_config(config, out_dir)

            base = load_cache(config.data.base_cache, 'data.base_cache')
            validation = load_optional_cache(config.data.validation_cache, 'data.validation_cache')
            if validation is not None:
                assert_disjoint(base, validation)
            resume = load_checkpoint(resolve_run_path(options['resume'], '--resume')) if options['resume'] else None

            self.stdout.write(
                f'Training {config.arch.parameter_count():,} parameters on {base.name} '
                f'({base.num_classes} classes) for {config.train.max_iterations} steps'
            )
            result = train(
                base, config.arch, config.train, config.loss, out_dir,
                augment=config.augment,
                validation=validation,
                resume=resume,
                progress=progress_printer(self, config.train.max_iterations),
                deterministic=config.deterministic,
            )
        self.stdout.write(self.style.SUCCESS(
            f'Checkpoint {result.checkpoint_path} at step {result.checkpoint.iteration}; metrics {result.metrics_path}'
        ))
