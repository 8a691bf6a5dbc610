"""
Django settings for the asldn project.

The project has no web surface: Django provides the settings layer, logging
configuration and the management-command CLI (simulate, train, eval, report,
describe) for the learning-from-noise ASL denoising engine in ``core``.
"""

from pathlib import Path

from decouple import config
from dotenv import load_dotenv

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

load_dotenv(BASE_DIR / ".env")

SECRET_KEY = config("DJANGO_SECRET_KEY", default="asldn-local-only-not-a-secret")

DEBUG = config("DEBUG", default=False, cast=bool)

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    "core",
]

# No database: every artifact is a file (ASLT/ASLW tensors, TSV/CSV tables).
DATABASES = {}

LANGUAGE_CODE = "en-us"

TIME_ZONE = "UTC"

USE_I18N = False

USE_TZ = True

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"


# Pipeline settings

ASLDN_VERSION = "1.0.0"

# Caps joblib parallelism for simulate/eval.
ASLDN_THREADS = config("ASLDN_THREADS", default=1, cast=int)

ASLDN_LOG_LEVEL = config("ASLDN_LOG_LEVEL", default="INFO")

# CBF display window for PGM panels, mL/100g/min.
ASLDN_DISPLAY_RANGE = (0.0, 120.0)

# PSNR reported for identical images.
ASLDN_PSNR_CAP = 99.0


# Logging

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "verbose": {
            "format": "%(asctime)s %(levelname)s %(name)s: %(message)s",
        },
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "verbose",
        },
    },
    "loggers": {
        "core": {
            "handlers": ["console"],
            "level": ASLDN_LOG_LEVEL,
            "propagate": False,
        },
    },
}
