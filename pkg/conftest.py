"""Configure Django before test collection so pytest can run the Django test suites."""
import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'tripletshot_project.settings')
django.setup()
