"""
Management command for a seeded desk-scale comparison.

For every seed: train the triplet embedding and the Siamese baseline under the
same budget, evaluate both on the same episodes, fine-tune the triplet model
once per episode, and sweep its layers. Writes ``comparison.csv`` with one row
per seed, the medians, and the ordering checks (triplet >= Siamese,
fine-tuned >= pre-trained, fc >= last conv >= first conv).
"""
import dataclasses

from django.core.management.base import BaseCommand

from tripletshot_lib.config import write_resolved_config
from tripletshot_lib.evaluation import (
    SeedComparison,
    comparison_checks,
    comparison_medians,
    evaluate,
    sweep_layers,
    write_comparison_csv,
)
from tripletshot_lib.exceptions import ConfigError
from tripletshot_lib.network import EMBEDDING_LAYER
from tripletshot_lib.training import finetune, train, train_siamese
from tripletshot_project.runtime import (
    add_config_arguments,
    build_episode_set,
    command_errors,
    load_cache,
    load_config,
    resolve_output_dir,
)


class Command(BaseCommand):
    help = 'Compare triplet, Siamese and fine-tuned models over several seeds under one training budget'

    def add_arguments(self, parser):
        add_config_arguments(parser)
        parser.add_argument('--seeds', type=int, default=5, help='Number of seeds, counted up from the run seed')

    def handle(self, *args, **options):
        with command_errors():
            config = load_config(options)
            if options['seeds'] < 1:
                raise ConfigError(f'--seeds must be positive, got {options["seeds"]}')
            out_dir = resolve_output_dir(config, options, 'compare')
            write_resolved_config(config, out_dir)

            base = load_cache(config.data.base_cache, 'data.base_cache')
            episodes = build_episode_set(config, base=base)
            for episode in episodes:
                if len(episode.support_set()) < 2:
                    raise ConfigError(f'episode {episode.run_id} has fewer than 2 one-shot classes')
            self.stdout.write(f'{len(episodes)} episodes, {episodes[0].way}-way, {options["seeds"]} seed(s)')

            rows = []
            for offset in range(options['seeds']):
                seed = config.train.run_seed + offset
                rows.append(self.compare_seed(config, base, episodes, seed, out_dir / f'seed{seed:02d}'))
                row = rows[-1]
                self.stdout.write(f'seed {seed}: triplet {row.triplet:.4f}  siamese {row.siamese:.4f}  '
                                  f'finetuned {row.finetuned:.4f}  first conv {row.first_conv:.4f}  '
                                  f'last conv {row.last_conv:.4f}  fc {row.fc:.4f}')

            path = write_comparison_csv(out_dir / 'comparison.csv', rows)
            medians = comparison_medians(rows)
            checks = comparison_checks(rows)
        self.stdout.write('median: ' + '  '.join(f'{column} {value:.4f}' for column, value in medians.items()))
        for name, margin, holds in checks:
            style = self.style.SUCCESS if holds else self.style.WARNING
            self.stdout.write(style(f'{name}: median margin {margin:+.4f} ({"holds" if holds else "fails"})'))
        self.stdout.write(self.style.SUCCESS(f'Comparison written to {path}'))

    def compare_seed(self, config, base, episodes, seed, seed_dir) -> SeedComparison:
        train_cfg = dataclasses.replace(config.train, seed=seed)
        common = dict(augment=config.augment, deterministic=config.deterministic)
        triplet = train(base, config.arch, train_cfg, config.loss, seed_dir / 'triplet', **common)
        siamese = train_siamese(base, config.arch, train_cfg, config.loss, seed_dir / 'siamese', **common)

        workers = config.evaluation.workers
        siamese_report = evaluate(siamese.model, episodes, head=siamese.checkpoint.head, workers=workers)

        finetuned = []
        for episode in episodes:
            result = finetune(
                triplet.checkpoint, base, episode.support_set(), train_cfg, config.loss,
                seed_dir / 'finetune' / f'run{episode.run_id:02d}',
                iterations=config.finetune.iterations,
                start_iteration=config.finetune.start_iteration,
                **common,
            )
            finetuned.extend(evaluate(result.model, [episode]).accuracies)

        sweep = sweep_layers(triplet.model, episodes, workers=workers)
        layers = triplet.model.layer_registry
        return SeedComparison(
            seed=seed,
            triplet=sweep[EMBEDDING_LAYER].mean,
            siamese=siamese_report.mean,
            finetuned=sum(finetuned) / len(finetuned),
            first_conv=sweep[layers[0]].mean,
            last_conv=sweep[layers[-1]].mean,
            fc=sweep[EMBEDDING_LAYER].mean,
        )
