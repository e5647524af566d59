from experiments.management.base import ExperimentCommand
from experiments.runs import run_diagnose


class Command(ExperimentCommand):
    help = "Audit contraction, conditioning and alignment of a (checkpointed) value network."
    command_name = "diagnose"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--checkpoint", default="", help="Checkpoint to audit instead of the fresh network.")

    def run(self, config, out_dir, runtime, options):
        report = run_diagnose(config, out_dir, runtime, checkpoint=options["checkpoint"] or None)
        gamma = "n/a" if report.gamma_hat is None else f"{report.gamma_hat:.4g}"
        return f"gamma {gamma}, A1 {report.pass_A1}, A3 {report.pass_A3}, A4 {report.pass_A4}"
