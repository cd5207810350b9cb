"""
tripletshot Django project. The Celery app is imported here so that the
training and evaluation ``shared_task`` definitions bind to it on startup.
"""
from .celery import app as celery_app

__all__ = ('celery_app',)
