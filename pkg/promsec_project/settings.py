"""
Django settings for promsec_project project.

The project hosts a single app (promsec_app) that is driven entirely through
management commands; there is no web surface.

For more information on this file, see
https://docs.djangoproject.com/en/5.2/topics/settings/
"""

from pathlib import Path
import os
from decouple import config

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = config('SECRET_KEY', default='django-insecure-promsec-local-only-key')

DEBUG = config('DEBUG', default=False, cast=bool)

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'promsec_app',
]

MIDDLEWARE = []


# Database
# https://docs.djangoproject.com/en/5.2/ref/settings/#databases

# Support both SQLite (development) and PostgreSQL (shared result index)
DATABASE_URL = config('DATABASE_URL', default=None)

if DATABASE_URL:
    import dj_database_url
    DATABASES = {
        'default': dj_database_url.config(
            default=DATABASE_URL,
            conn_max_age=600,
            conn_health_checks=True,
        )
    }
else:
    DATABASES = {
        'default': {
            'ENGINE': 'django.db.backends.sqlite3',
            'NAME': BASE_DIR / 'db.sqlite3',
        }
    }


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# ==================== Caching Configuration ====================
# Analyzer reports are memoized by unit hash. Set REDIS_URL to share the
# cache between bench workers on different hosts.

REDIS_URL = config('REDIS_URL', default=None)

if REDIS_URL:
    CACHES = {
        'default': {
            'BACKEND': 'django_redis.cache.RedisCache',
            'LOCATION': REDIS_URL,
            'OPTIONS': {
                'CLIENT_CLASS': 'django_redis.client.DefaultClient',
                'SOCKET_CONNECT_TIMEOUT': 5,
                'SOCKET_TIMEOUT': 5,
                'COMPRESSOR': 'django_redis.compressors.zlib.ZlibCompressor',
                'IGNORE_EXCEPTIONS': True,  # Fall back to recomputing reports
            },
            'KEY_PREFIX': 'promsec',
            'TIMEOUT': 3600,
        }
    }
else:
    CACHES = {
        'default': {
            'BACKEND': 'django.core.cache.backends.locmem.LocMemCache',
            'LOCATION': 'promsec-reports',
            'TIMEOUT': 3600,
            'OPTIONS': {
                'MAX_ENTRIES': 5000
            }
        }
    }


# ==================== Logging ====================

PROMSEC_LOG_LEVEL = config('PROMSEC_LOG_LEVEL', default='INFO')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'plain',
        },
    },
    'loggers': {
        'promsec_app': {
            'handlers': ['console'],
            'level': PROMSEC_LOG_LEVEL,
            'propagate': False,
        },
    },
}


# ==================== Paths ====================

PROMSEC_CORPUS_DIR = config('PROMSEC_CORPUS_DIR', default=str(BASE_DIR / 'corpus'))
PROMSEC_CHECKPOINT_DIR = config('PROMSEC_CHECKPOINT_DIR', default=str(BASE_DIR / 'checkpoints'))
PROMSEC_RUNS_DIR = config('PROMSEC_RUNS_DIR', default=str(BASE_DIR / 'runs'))
PROMSEC_DATA_DIR = os.path.join(BASE_DIR, 'promsec_app', 'data')
PROMSEC_TEMPLATES_PATH = config(
    'PROMSEC_TEMPLATES_PATH', default=os.path.join(PROMSEC_DATA_DIR, 'fix_templates.json')
)


# ==================== Analyzer ====================

PROMSEC_ANALYZER_MODE = config('PROMSEC_ANALYZER_MODE', default='builtin')
PROMSEC_ANALYZER_COMMAND = config(
    'PROMSEC_ANALYZER_COMMAND', default='bandit -q -f json -o {report-file} {input-file}'
)
PROMSEC_ANALYZER_TIMEOUT = config('PROMSEC_ANALYZER_TIMEOUT', default=60.0, cast=float)
PROMSEC_ANALYZER_CACHE_DURATION = config('PROMSEC_ANALYZER_CACHE_DURATION', default=3600, cast=int)


# ==================== LLM ====================

PROMSEC_LLM_CLIENT = config('PROMSEC_LLM_CLIENT', default='scripted')  # scripted | http | huggingface
PROMSEC_LLM_ENDPOINT = config('PROMSEC_LLM_ENDPOINT', default='https://api.openai.com/v1/chat/completions')
PROMSEC_LLM_MODEL = config('PROMSEC_LLM_MODEL', default='gpt-3.5-turbo')
PROMSEC_LLM_CREDENTIAL_ENV = config('PROMSEC_LLM_CREDENTIAL_ENV', default='PROMSEC_LLM_API_KEY')
PROMSEC_LLM_TEMPERATURE = config('PROMSEC_LLM_TEMPERATURE', default=0.0, cast=float)
PROMSEC_LLM_TIMEOUT = config('PROMSEC_LLM_TIMEOUT', default=60.0, cast=float)
PROMSEC_LLM_MAX_RETRIES = config('PROMSEC_LLM_MAX_RETRIES', default=3, cast=int)
PROMSEC_LLM_SCRIPTED_RULES = config(
    'PROMSEC_LLM_SCRIPTED_RULES', default=os.path.join(PROMSEC_DATA_DIR, 'scripted_rules.json')
)


# ==================== gGAN training ====================

PROMSEC_TRAIN_EPOCHS = config('PROMSEC_TRAIN_EPOCHS', default=30, cast=int)
PROMSEC_TRAIN_BATCH_SIZE = config('PROMSEC_TRAIN_BATCH_SIZE', default=8, cast=int)
PROMSEC_TRAIN_LEARNING_RATE = config('PROMSEC_TRAIN_LEARNING_RATE', default=0.01, cast=float)
PROMSEC_TRAIN_LOSS_MIX = config('PROMSEC_TRAIN_LOSS_MIX', default=0.1, cast=float)
PROMSEC_TRAIN_ALPHA = config('PROMSEC_TRAIN_ALPHA', default=1.0, cast=float)
PROMSEC_TRAIN_BETA = config('PROMSEC_TRAIN_BETA', default=1.0, cast=float)
PROMSEC_TRAIN_HIDDEN_DIM = config('PROMSEC_TRAIN_HIDDEN_DIM', default=64, cast=int)
PROMSEC_TRAIN_SEED = config('PROMSEC_TRAIN_SEED', default=7, cast=int)
PROMSEC_TRAIN_CONTRASTIVE_SIGN = config('PROMSEC_TRAIN_CONTRASTIVE_SIGN', default=1.0, cast=float)


# ==================== Optimization loop ====================

PROMSEC_LOOP_EPSILON = config('PROMSEC_LOOP_EPSILON', default=0, cast=int)
PROMSEC_LOOP_MAX_ITERATIONS = config('PROMSEC_LOOP_MAX_ITERATIONS', default=20, cast=int)
PROMSEC_LOOP_GRAPH_KIND = config('PROMSEC_LOOP_GRAPH_KIND', default='cfg')
PROMSEC_BENCH_WORKERS = config('PROMSEC_BENCH_WORKERS', default=os.cpu_count() or 1, cast=int)


# ==================== Fuzzing ====================

PROMSEC_FUZZ_TRIALS = config('PROMSEC_FUZZ_TRIALS', default=1000, cast=int)
PROMSEC_FUZZ_THRESHOLD = config('PROMSEC_FUZZ_THRESHOLD', default=0.01, cast=float)
PROMSEC_FUZZ_TRIAL_TIMEOUT = config('PROMSEC_FUZZ_TRIAL_TIMEOUT', default=2.0, cast=float)
