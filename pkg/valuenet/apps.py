from django.apps import AppConfig


class ValuenetConfig(AppConfig):
    name = 'valuenet'
    verbose_name = "Value network"
