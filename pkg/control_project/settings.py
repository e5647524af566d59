"""
Django settings for control_project project.

The project hosts no web surface: Django provides the app registry, the
management-command CLI, logging configuration and the test runner.
Every knob below is read from the environment and validated at import.
"""

import os
from pathlib import Path
from django.core.exceptions import ImproperlyConfigured

BASE_DIR = Path(__file__).resolve().parent.parent


def env_bool(name: str, default: bool = False) -> bool:
    value = os.environ.get(name)
    if value is None:
        return default
    return value.strip().lower() in {"1", "true", "yes", "on"}


def env_list(name: str) -> list[str]:
    value = os.environ.get(name, "")
    return [item.strip() for item in value.split(",") if item.strip()]


def env_int(name: str, default: int, minimum: int | None = None) -> int:
    value = os.environ.get(name)
    if value is None or not value.strip():
        return default
    try:
        parsed = int(value.strip())
    except ValueError:
        raise ImproperlyConfigured(f"{name} must be an integer, got {value!r}.")
    if minimum is not None and parsed < minimum:
        raise ImproperlyConfigured(f"{name} must be at least {minimum}, got {parsed}.")
    return parsed


def env_float(name: str, default: float, minimum: float | None = None) -> float:
    value = os.environ.get(name)
    if value is None or not value.strip():
        return default
    try:
        parsed = float(value.strip())
    except ValueError:
        raise ImproperlyConfigured(f"{name} must be a number, got {value!r}.")
    if minimum is not None and parsed < minimum:
        raise ImproperlyConfigured(f"{name} must be at least {minimum}, got {parsed}.")
    return parsed


# Not used for anything security relevant; Django refuses to start without one.
SECRET_KEY = os.environ.get("SECRET_KEY", "control-project-offline-cli-only-not-a-web-secret")

DEBUG = env_bool("DEBUG", default=False)

ALLOWED_HOSTS = env_list("ALLOWED_HOSTS")


# Application definition

INSTALLED_APPS = [
    'tape',
    'valuenet',
    'problems',
    'hamiltonian',
    'rollout',
    'grad',
    'diagnostics',
    'trainer',
    'experiments',
]

# No models anywhere; the test runner skips database setup.
DATABASES = {}

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

USE_TZ = True
TIME_ZONE = os.environ.get("TIME_ZONE", "UTC")


# Experiment runtime

JFB_OUTPUT_DIR = Path(os.environ.get("JFB_OUTPUT_DIR", "").strip() or BASE_DIR / "runs")

# Upper bound on recorded tape nodes per session; unrolled differentiation
# fails with NodeBudgetExceeded once a rollout needs more.
JFB_NODE_BUDGET = env_int("JFB_NODE_BUDGET", 2_000_000, minimum=1000)

JFB_N_JOBS = env_int("JFB_N_JOBS", 1, minimum=1)

JFB_SLOW_TESTS = env_bool("JFB_SLOW_TESTS", default=False)

JFB_LOG_LEVEL = os.environ.get("JFB_LOG_LEVEL", "DEBUG" if DEBUG else "INFO").strip().upper()
if JFB_LOG_LEVEL not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
    raise ImproperlyConfigured(f"JFB_LOG_LEVEL is not a logging level: {JFB_LOG_LEVEL!r}.")

# Fraction of non-converged fixed-point solves in one gradient evaluation
# above which a warning is logged.
JFB_NONCONVERGED_WARN = env_float("JFB_NONCONVERGED_WARN", 0.1, minimum=0.0)


LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "verbose": {
            "format": "{asctime} {levelname} {name}: {message}",
            "style": "{",
        },
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "verbose",
        },
    },
    "loggers": {
        app: {"handlers": ["console"], "level": JFB_LOG_LEVEL, "propagate": False}
        for app in INSTALLED_APPS
        if not app.startswith("django.")
    },
}
