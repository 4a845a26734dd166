from pathlib import Path
import os
from dotenv import load_dotenv
import dj_database_url

# Load environment variables from .env file
load_dotenv()

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.getenv('SECRET_KEY', 'edgerec-insecure-default-key-for-development')

DEBUG = os.getenv('DEBUG', 'True') == 'True'

ALLOWED_HOSTS = os.getenv('ALLOWED_HOSTS', 'localhost,127.0.0.1').split(',')


# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'django.contrib.auth',
    # Third party apps
    'rest_framework',
    # Local apps
    'reranker',
]


# Database
# The cloud embedding store persists here. SQLite unless DATABASE_URL is set.

if os.getenv('DATABASE_URL'):
    try:
        DATABASES = {
            'default': dj_database_url.config(conn_max_age=600)
        }
    except Exception as e:
        print(f"Warning: Error parsing DATABASE_URL: {e}")
        DATABASES = {
            'default': {
                'ENGINE': 'django.db.backends.sqlite3',
                'NAME': BASE_DIR / 'db.sqlite3',
            }
        }
else:
    DATABASES = {
        'default': {
            'ENGINE': 'django.db.backends.sqlite3',
            'NAME': BASE_DIR / 'db.sqlite3',
        }
    }


LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# REST Framework settings (serializers only; no API views are mounted)
REST_FRAMEWORK = {
    'UNAUTHENTICATED_USER': None,
}

# EdgeRec settings
# Flat KEY=VALUE config file applied over the built-in defaults.
EDGEREC_CONFIG_FILE = os.getenv('EDGEREC_CONFIG_FILE', '')
# Where management commands write run directories when --out is omitted.
EDGEREC_RUNS_DIR = os.getenv('EDGEREC_RUNS_DIR', str(BASE_DIR / 'runs'))

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
        'reranker': {
            'handlers': ['console'],
            'level': os.getenv('EDGEREC_LOG_LEVEL', 'INFO'),
            'propagate': False,
        },
    },
}
