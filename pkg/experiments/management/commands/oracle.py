from experiments.management.base import ExperimentCommand
from experiments.runs import run_oracle


class Command(ExperimentCommand):
    help = "Compare LQR controllers against the discrete Riccati optimum on a holdout set."
    command_name = "oracle"

    def run(self, config, out_dir, runtime, options):
        rows, _ = run_oracle(config, out_dir, runtime)
        return ", ".join(f"{row['controller']} gap {row['gap']:.3e}" for row in rows)
