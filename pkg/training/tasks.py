"""
Celery tasks for training runs.
"""
from celery import shared_task
import logging

logger = logging.getLogger(__name__)

TRAINING_COMMANDS = {
    'triplet': 'train_embedding',
    'siamese': 'train_siamese',
    'finetune': 'finetune_embedding',
}


@shared_task
def run_training(config_path, overrides=None, kind='triplet', output_dir=None):
    """
    Run one training command in the worker.

    Args:
        config_path: YAML run configuration.
        overrides: Optional list of 'section.key=value' strings.
        kind: 'triplet', 'siamese' or 'finetune'.
        output_dir: Optional output directory (otherwise the config's).
    """
    from django.core.management import call_command

    if kind not in TRAINING_COMMANDS:
        return {'status': 'error', 'message': f'unknown training kind {kind!r}'}

    command = TRAINING_COMMANDS[kind]
    logger.info(f"Starting {command} with {config_path}")
    options = {'config': config_path, 'overrides': list(overrides or [])}
    if output_dir:
        options['output_dir'] = output_dir
    try:
        call_command(command, **options)
        logger.info(f"{command} finished for {config_path}")
        return {
            'status': 'success',
            'command': command,
            'config': config_path,
        }
    except Exception as e:
        logger.error(f"Error in {command}: {e}")
        return {
            'status': 'error',
            'message': str(e),
        }
