import logging
from pathlib import Path

from django.conf import settings
from django.core.management import BaseCommand, CommandError

from diagnostics import AuditError
from grad import BackendError
from hamiltonian import FixedPointDivergence, SingularJacobianError
from problems import ProblemError
from rollout import RolloutError
from tape import TapeError
from trainer import NonFiniteDirection
from valuenet import CheckpointError, NetworkShapeError

from ..config import ConfigError, load_config
from ..runs import RuntimeOptions

logger = logging.getLogger("experiments")

USAGE_ERRORS = (ConfigError, CheckpointError, NetworkShapeError)
RUNTIME_ERRORS = (
    BackendError,
    TapeError,
    SingularJacobianError,
    FixedPointDivergence,
    RolloutError,
    AuditError,
    ProblemError,
    NonFiniteDirection,
    OSError,
)


class ExperimentCommand(BaseCommand):
    """Shared flags and error mapping of the experiment commands.

    Subclasses implement `run(config, out_dir, runtime, options)` and
    return a one-line summary.
    """

    command_name = "run"

    def add_arguments(self, parser):
        parser.add_argument("--config", required=True, help="Experiment TOML file.")
        parser.add_argument("--out", default="", help="Output directory (default: output.directory or JFB_OUTPUT_DIR/<name>).")
        parser.add_argument("--seed-override", type=int, default=None, help="Replace the config seed.")
        parser.add_argument("--audit-every", type=int, default=None, help="Replace train.audit_every.")
        parser.add_argument("--progress", action="store_true", help="Show a progress bar.")

    def output_dir(self, config, options) -> Path:
        if options["out"]:
            return Path(options["out"])
        if config.output.directory:
            return Path(config.output.directory)
        return Path(settings.JFB_OUTPUT_DIR) / config.name / self.command_name

    def runtime(self, options) -> RuntimeOptions:
        return RuntimeOptions(
            node_budget=settings.JFB_NODE_BUDGET,
            n_jobs=settings.JFB_N_JOBS,
            nonconverged_warn=settings.JFB_NONCONVERGED_WARN,
            progress=options.get("progress", False),
        )

    def handle(self, *args, **options):
        try:
            config = load_config(options["config"]).with_overrides(options["seed_override"], options["audit_every"])
            out_dir = self.output_dir(config, options)
            summary = self.run(config, out_dir, self.runtime(options), options)
        except USAGE_ERRORS as exc:
            raise CommandError(str(exc), returncode=2) from exc
        except RUNTIME_ERRORS as exc:
            logger.error("%s failed: %s", self.command_name, exc)
            raise CommandError(f"{type(exc).__name__}: {exc}", returncode=1) from exc
        self.stdout.write(self.style.SUCCESS(f"{summary} -> {out_dir}"))

    def run(self, config, out_dir, runtime, options) -> str:
        raise NotImplementedError
