from experiments.management.base import ExperimentCommand
from experiments.runs import run_train


class Command(ExperimentCommand):
    help = "Train a value network with the configured gradient backend and write the iteration history."
    command_name = "train"

    def run(self, config, out_dir, runtime, options):
        history, _ = run_train(config, out_dir, runtime)
        last = history.records[-1] if history.records else None
        if last is None:
            return "no iterations recorded"
        return f"{len(history.records)} iterations, final loss {last.loss:.6g}, A_K {last.A_K:.4g}"
