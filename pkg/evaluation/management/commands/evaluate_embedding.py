"""
Management command to run N-way one-shot evaluation of a checkpoint.
"""
from django.core.management.base import BaseCommand

from tripletshot_lib.checkpoint import load_checkpoint
from tripletshot_lib.config import write_resolved_config
from tripletshot_lib.evaluation import evaluate, sweep_layers, write_sweep_csv
from tripletshot_project.runtime import (
    add_config_arguments,
    build_episode_set,
    command_errors,
    load_config,
    resolve_output_dir,
    resolve_run_path,
)


class Command(BaseCommand):
    help = 'Evaluate a checkpoint on one-shot episodes (fixed Omniglot runs or sampled episodes)'

    def add_arguments(self, parser):
        add_config_arguments(parser)
        parser.add_argument('--checkpoint', type=str, help='Checkpoint to evaluate (overrides evaluation.checkpoint)')
        parser.add_argument('--layer', type=str, help='Feature source: fc-1 or a conv layer such as conv-3-2')
        parser.add_argument('--sweep', action='store_true', help='Evaluate every layer and write layer_sweep.csv')

    def handle(self, *args, **options):
        with command_errors():
            config = load_config(options)
            out_dir = resolve_output_dir(config, options, 'eval')
            write_resolved_config(config, out_dir)

            checkpoint = load_checkpoint(
                resolve_run_path(options['checkpoint'] or config.evaluation.checkpoint, 'evaluation.checkpoint'))
            episodes = build_episode_set(config)
            workers = config.evaluation.workers
            self.stdout.write(f'{len(episodes)} episodes, {episodes[0].way}-way')

            if options['sweep']:
                reports = sweep_layers(checkpoint.model, episodes, workers=workers)
                write_sweep_csv(out_dir / 'layer_sweep.csv', {layer: report.mean for layer, report in reports.items()})
                for layer, report in reports.items():
                    report.write_csv(out_dir / f'eval_{layer}.csv')
                    self.stdout.write(f'{layer:>10}  {report.mean:.4f}')
                self.stdout.write(self.style.SUCCESS(f'Layer sweep written to {out_dir / "layer_sweep.csv"}'))
                return

            layer = options['layer'] or config.evaluation.layer
            report = evaluate(checkpoint.model, episodes, feature=layer, head=checkpoint.head, workers=workers)
            path = report.write_csv(out_dir / 'eval_report.csv')
        if report.degenerate:
            self.stdout.write(self.style.WARNING('Support features are identical in some episode: chance-level result'))
        self.stdout.write(self.style.SUCCESS(
            f'Mean accuracy {report.mean:.4f} over {report.runs} runs ({layer}); report {path}'
        ))
