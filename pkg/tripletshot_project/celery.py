"""
Celery configuration for tripletshot_project.

Training and evaluation runs can be queued on a worker instead of blocking a
terminal; the tasks live in the training and evaluation apps.
"""
import os
from celery import Celery

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'tripletshot_project.settings')

app = Celery('tripletshot_project')

# Read CELERY_* keys from the Django settings module.
app.config_from_object('django.conf:settings', namespace='CELERY')

app.autodiscover_tasks()
