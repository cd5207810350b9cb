"""
Helpers shared by the management commands: config loading, path resolution
and the mapping from library errors to exit codes.
"""
import dataclasses
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import List, Optional

from django.conf import settings
from django.core.management.base import CommandError

from tripletshot_lib.config import RunConfig, load_run_config
from tripletshot_lib.datasets import ClassIndexedDataset, assert_disjoint, load_dataset_cache
from tripletshot_lib.evaluation import Episode, build_episodes, load_omniglot_runs
from tripletshot_lib.exceptions import ConfigError, NumericError, TripletShotError

logger = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_NUMERIC = 3


def add_config_arguments(parser):
    parser.add_argument(
        '--config',
        type=str,
        help='YAML run configuration',
    )
    parser.add_argument(
        '--set',
        dest='overrides',
        action='append',
        default=[],
        metavar='KEY=VALUE',
        help='Override one config value, e.g. --set train.max_iterations=50 (repeatable)',
    )
    parser.add_argument(
        '--deterministic',
        action='store_true',
        help='Single-threaded numeric paths and zeroed wall-clock columns',
    )
    parser.add_argument(
        '--output-dir',
        type=str,
        help='Where outputs go (overrides output_dir in the config)',
    )


@contextmanager
def command_errors():
    """Translate library errors into CommandError with the run's exit code."""
    try:
        yield
    except NumericError as e:
        logger.error(f"numeric failure: {e}")
        raise CommandError(str(e), returncode=EXIT_NUMERIC) from e
    except TripletShotError as e:
        raise CommandError(str(e), returncode=EXIT_USAGE) from e


def load_config(options) -> RunConfig:
    deterministic = bool(options.get('deterministic')) or settings.TRIPLETSHOT_DETERMINISTIC
    config = load_run_config(options.get('config'), options.get('overrides') or (), deterministic=deterministic)
    if not config.deterministic and config.train.prefetch_workers == 0 and settings.TRIPLETSHOT_PREFETCH_WORKERS:
        config = dataclasses.replace(
            config, train=dataclasses.replace(config.train, prefetch_workers=settings.TRIPLETSHOT_PREFETCH_WORKERS))
    return config


def resolve_output_dir(config: RunConfig, options, default_name: str) -> Path:
    chosen = options.get('output_dir') or config.output_dir
    path = Path(chosen) if chosen else Path(default_name)
    if not path.is_absolute():
        path = Path(settings.TRIPLETSHOT_OUTPUT_DIR) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def resolve_data_path(path: Optional[str], what: str) -> Path:
    """Absolute paths and paths that exist relative to the working directory are used as given."""
    if not path:
        raise ConfigError(f"{what} is not configured")
    candidate = Path(path)
    if candidate.is_absolute() or candidate.exists():
        return candidate
    return Path(settings.TRIPLETSHOT_DATA_DIR) / candidate


def load_cache(path: Optional[str], what: str) -> ClassIndexedDataset:
    return load_dataset_cache(resolve_data_path(path, what))


def load_optional_cache(path: Optional[str], what: str) -> Optional[ClassIndexedDataset]:
    return load_cache(path, what) if path else None


def build_episode_set(config: RunConfig, base: Optional[ClassIndexedDataset] = None) -> List[Episode]:
    """
    Episodes for evaluation: the fixed Omniglot runs or seeded draws from the novel cache.
    Sampled episodes are checked against ``base`` for shared classes when it is given.
    """
    spec = config.episodes
    if spec.protocol == 'omniglot_fixed':
        root = resolve_data_path(config.data.omniglot_runs_dir, 'data.omniglot_runs_dir')
        return load_omniglot_runs(root, config.data.omniglot_runs_resize)
    novel = load_cache(config.data.novel_cache, 'data.novel_cache')
    if base is not None:
        assert_disjoint(base, novel)
    return build_episodes(novel, spec.way, spec.queries_per_class, spec.runs, spec.seed)


def resolve_run_path(path: Optional[str], what: str) -> Path:
    """Like resolve_data_path, but relative paths fall back to TRIPLETSHOT_OUTPUT_DIR (checkpoints)."""
    if not path:
        raise ConfigError(f"{what} is not configured")
    candidate = Path(path)
    if candidate.is_absolute() or candidate.exists():
        return candidate
    return Path(settings.TRIPLETSHOT_OUTPUT_DIR) / candidate
