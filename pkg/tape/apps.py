from django.apps import AppConfig


class TapeConfig(AppConfig):
    name = 'tape'
    verbose_name = "Reverse-mode tape"
