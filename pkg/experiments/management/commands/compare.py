from experiments.management.base import ExperimentCommand
from experiments.runs import run_compare


class Command(ExperimentCommand):
    help = "Train the same initial network with several gradient backends and compare loss against work."
    command_name = "compare"

    def run(self, config, out_dir, runtime, options):
        _, summary, _ = run_compare(config, out_dir, runtime)
        parts = []
        for backend, result in summary.items():
            if result["feasible"]:
                parts.append(f"{backend}={result['final_objective']:.6g}")
            else:
                parts.append(f"{backend}=infeasible")
        return "holdout objective " + ", ".join(parts)
