from django.apps import AppConfig


class GradConfig(AppConfig):
    name = 'grad'
    verbose_name = "Gradient backends"
