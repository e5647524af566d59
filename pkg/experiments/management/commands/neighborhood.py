from experiments.management.base import ExperimentCommand
from experiments.runs import run_neighborhood


class Command(ExperimentCommand):
    help = "Run constant-step SGD for each step size and report the stationarity plateau."
    command_name = "neighborhood"

    def run(self, config, out_dir, runtime, options):
        rows, monotone, _ = run_neighborhood(config, out_dir, runtime)
        diverged = sum(row.diverged for row in rows)
        return f"{len(rows)} step sizes, plateaus monotone: {monotone}, diverged: {diverged}"
