from django.apps import AppConfig


class HamiltonianConfig(AppConfig):
    name = 'hamiltonian'
    verbose_name = "Hamiltonian fixed-point operator"
