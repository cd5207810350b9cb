"""
Django settings for tripletshot_project.

The project has no web surface and no database: Django provides the
management-command CLI, the test runner and the settings/logging layer,
Celery runs queued training and evaluation jobs.
"""

from pathlib import Path
import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = os.getenv('DJANGO_SECRET_KEY', 'tripletshot-local-only')

DEBUG = os.getenv('DJANGO_DEBUG', 'False') == 'True'

# Application definition

INSTALLED_APPS = [
    'ingest.apps.IngestConfig',
    'training.apps.TrainingConfig',
    'evaluation.apps.EvaluationConfig',
]

# Runs are file based; nothing is stored in a database.
DATABASES = {}

USE_TZ = True
TIME_ZONE = os.getenv('TIME_ZONE', 'UTC')


# Run outputs and dataset caches
# Relative paths given to commands resolve against these directories.

TRIPLETSHOT_OUTPUT_DIR = Path(os.getenv('TRIPLETSHOT_OUTPUT_DIR', BASE_DIR / 'runs'))
TRIPLETSHOT_DATA_DIR = Path(os.getenv('TRIPLETSHOT_DATA_DIR', BASE_DIR / 'data'))
TRIPLETSHOT_PREFETCH_WORKERS = int(os.getenv('TRIPLETSHOT_PREFETCH_WORKERS', '0'))
TRIPLETSHOT_DETERMINISTIC = os.getenv('TRIPLETSHOT_DETERMINISTIC', 'False') == 'True'
TRIPLETSHOT_LOG_LEVEL = os.getenv('TRIPLETSHOT_LOG_LEVEL', 'INFO')


# Logging

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'simple': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'simple',
        },
    },
    'loggers': {
        name: {
            'handlers': ['console'],
            'level': TRIPLETSHOT_LOG_LEVEL,
            'propagate': False,
        }
        for name in ('tripletshot_lib', 'tripletshot_project', 'ingest', 'training', 'evaluation')
    },
}


# Celery Configuration
CELERY_BROKER_URL = os.getenv('REDIS_URL', 'redis://redis:6379/0')
CELERY_RESULT_BACKEND = os.getenv('REDIS_URL', 'redis://redis:6379/0')
CELERY_ACCEPT_CONTENT = ['application/json']
CELERY_TASK_SERIALIZER = 'json'
CELERY_RESULT_SERIALIZER = 'json'
CELERY_TIMEZONE = TIME_ZONE
# Training jobs are long and CPU bound; one at a time per worker process.
CELERY_WORKER_PREFETCH_MULTIPLIER = 1
CELERY_TASK_ACKS_LATE = True
