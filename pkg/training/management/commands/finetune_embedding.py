"""
Management command to fine-tune a trained embedding with one-shot instances.

Two sources of one-shot sets:

* ``split.kind: one_shot`` draws one image per class of the novel cache; one
  model is fine-tuned and evaluated with every remaining image as a query.
* otherwise each evaluation episode's support set is the one-shot set and a
  separate model is fine-tuned per episode.
"""
from django.core.management.base import BaseCommand

from tripletshot_lib.checkpoint import load_checkpoint
from tripletshot_lib.config import write_resolved_config
from tripletshot_lib.datasets import assert_disjoint, make_splits
from tripletshot_lib.evaluation import EvalReport, Episode, evaluate
from tripletshot_lib.exceptions import ConfigError
from tripletshot_lib.training import finetune
from tripletshot_project.runtime import (
    add_config_arguments,
    build_episode_set,
    command_errors,
    load_cache,
    load_config,
    resolve_output_dir,
    resolve_run_path,
)
from training.reporting import progress_printer


def episode_from_split(oneshot, pool) -> Episode:
    return Episode(
        run_id=1,
        support_images=oneshot.images,
        support_classes=oneshot.class_ids,
        query_images=pool.images,
        query_classes=pool.labels,
        class_names=list(oneshot.class_names),
        augmentation=oneshot.augmentation,
    )


class Command(BaseCommand):
    help = 'Fine-tune a checkpoint on batches mixing base triplets and one-shot triplets'

    def add_arguments(self, parser):
        add_config_arguments(parser)
        parser.add_argument('--checkpoint', type=str, help='Pre-trained checkpoint (overrides finetune.checkpoint)')

    def handle(self, *args, **options):
        with command_errors():
            config = load_config(options)
            ft = config.finetune
            out_dir = resolve_output_dir(config, options, 'finetune')
            write_resolved_config(config, out_dir)

            pretrained = load_checkpoint(resolve_run_path(options['checkpoint'] or ft.checkpoint, 'finetune.checkpoint'))
            base = load_cache(config.data.base_cache, 'data.base_cache')

            if config.split.kind == 'one_shot':
                novel = load_cache(config.data.novel_cache, 'data.novel_cache')
                assert_disjoint(base, novel)
                oneshot, pool = make_splits(novel, config.split)
                if len(oneshot) < 2:
                    raise ConfigError(f'fine-tuning needs at least 2 one-shot classes, {novel.name} has {len(oneshot)}')
                episodes = [episode_from_split(oneshot, pool)]
            else:
                episodes = build_episode_set(config, base=base)
                if ft.runs:
                    episodes = [ep for ep in episodes if ep.run_id in set(ft.runs)]
                    if not episodes:
                        raise ConfigError(f'finetune.runs {list(ft.runs)} selects no episode')

            finetuned_accuracies = []
            for episode in episodes:
                oneshot = episode.support_set()
                if len(oneshot) < 2:
                    raise ConfigError(f'episode {episode.run_id} has {len(oneshot)} one-shot classes, need at least 2')
                self.stdout.write(f'Run {episode.run_id}: fine-tuning on {len(oneshot)} one-shot classes '
                                  f'for {ft.iterations} steps')
                result = finetune(
                    pretrained, base, oneshot, config.train, config.loss,
                    out_dir / f'run{episode.run_id:02d}',
                    iterations=ft.iterations,
                    start_iteration=ft.start_iteration,
                    augment=config.augment,
                    progress=progress_printer(self, ft.iterations),
                    deterministic=config.deterministic,
                )
                if ft.evaluate:
                    report = evaluate(result.model, [episode], feature=config.evaluation.layer)
                    finetuned_accuracies.append(report.accuracies[0])

            if ft.evaluate:
                before = evaluate(pretrained.model, episodes, feature=config.evaluation.layer,
                                  workers=config.evaluation.workers)
                after = EvalReport(finetuned_accuracies, [ep.run_id for ep in episodes],
                                   feature=config.evaluation.layer)
                before.write_csv(out_dir / 'eval_pretrained.csv')
                after.write_csv(out_dir / 'eval_finetuned.csv')
                self.stdout.write(f'Pre-trained mean accuracy: {before.mean:.4f}')
                self.stdout.write(f'Fine-tuned mean accuracy:  {after.mean:.4f}')
        self.stdout.write(self.style.SUCCESS(f'Fine-tuned {len(episodes)} run(s) into {out_dir}'))
