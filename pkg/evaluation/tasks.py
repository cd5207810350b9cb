"""
Celery tasks for evaluation: one layer per task, the layer sweep as a chord.
"""
from celery import chord, shared_task
import logging

logger = logging.getLogger(__name__)


def _prepare(config_path, overrides, output_dir):
    from tripletshot_lib.checkpoint import load_checkpoint
    from tripletshot_project.runtime import load_config, resolve_output_dir, resolve_run_path

    options = {'config': config_path, 'overrides': list(overrides or []), 'output_dir': output_dir}
    config = load_config(options)
    out_dir = resolve_output_dir(config, options, 'eval')
    checkpoint = load_checkpoint(resolve_run_path(config.evaluation.checkpoint, 'evaluation.checkpoint'))
    return config, out_dir, checkpoint


@shared_task
def evaluate_layer(config_path, layer, overrides=None, output_dir=None):
    """
    Evaluate one feature source and write eval_<layer>.csv.

    Returns a dict with the layer and its mean accuracy.
    """
    from tripletshot_lib.evaluation import evaluate
    from tripletshot_project.runtime import build_episode_set

    logger.info(f"Evaluating layer {layer} for {config_path}")
    try:
        config, out_dir, checkpoint = _prepare(config_path, overrides, output_dir)
        report = evaluate(checkpoint.model, build_episode_set(config), feature=layer,
                          workers=config.evaluation.workers)
        report.write_csv(out_dir / f'eval_{layer}.csv')
        return {
            'status': 'success',
            'layer': layer,
            'mean_accuracy': report.mean,
            'degenerate': report.degenerate,
        }
    except Exception as e:
        logger.error(f"Error evaluating layer {layer}: {e}")
        return {
            'status': 'error',
            'layer': layer,
            'message': str(e),
        }


@shared_task
def collect_sweep(results, config_path, overrides=None, output_dir=None):
    """Write layer_sweep.csv from the evaluate_layer results, in layer order."""
    from tripletshot_lib.evaluation import write_sweep_csv

    failed = [r for r in results if r.get('status') != 'success']
    if failed:
        logger.error(f"Layer sweep incomplete: {[r['layer'] for r in failed]}")
        return {'status': 'error', 'message': '; '.join(r.get('message', '') for r in failed)}
    try:
        _, out_dir, _ = _prepare(config_path, overrides, output_dir)
        path = write_sweep_csv(out_dir / 'layer_sweep.csv', {r['layer']: r['mean_accuracy'] for r in results})
        logger.info(f"Layer sweep written to {path}")
        return {
            'status': 'success',
            'path': str(path),
            'layers': {r['layer']: r['mean_accuracy'] for r in results},
        }
    except Exception as e:
        logger.error(f"Error writing layer sweep: {e}")
        return {'status': 'error', 'message': str(e)}


@shared_task
def sweep_layers(config_path, overrides=None, output_dir=None):
    """Fan evaluate_layer out over every conv layer plus fc-1 and collect the table."""
    from tripletshot_lib.network import EMBEDDING_LAYER

    try:
        _, _, checkpoint = _prepare(config_path, overrides, output_dir)
    except Exception as e:
        logger.error(f"Error preparing layer sweep: {e}")
        return {'status': 'error', 'message': str(e)}

    layers = checkpoint.model.layer_registry + [EMBEDDING_LAYER]
    header = [evaluate_layer.s(config_path, layer, overrides, output_dir) for layer in layers]
    result = chord(header)(collect_sweep.s(config_path, overrides, output_dir))
    logger.info(f"Scheduled layer sweep over {len(layers)} layers")
    return {
        'status': 'scheduled',
        'layers': layers,
        'sweep_id': result.id,
    }
