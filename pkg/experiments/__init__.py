from .artifacts import FORMAT_VERSION, ArtifactHeader, ArtifactWriter, Manifest, read_csv, write_csv, write_json
from .config import ConfigError, ExperimentConfig, load_config, loads, parse_config
from .runs import (
    RuntimeOptions,
    build,
    gradient_config,
    relative_gap,
    run_compare,
    run_diagnose,
    run_neighborhood,
    run_oracle,
    run_train,
)

__all__ = [
    "FORMAT_VERSION",
    "ArtifactHeader",
    "ArtifactWriter",
    "ConfigError",
    "ExperimentConfig",
    "Manifest",
    "RuntimeOptions",
    "build",
    "gradient_config",
    "load_config",
    "loads",
    "parse_config",
    "read_csv",
    "relative_gap",
    "run_compare",
    "run_diagnose",
    "run_neighborhood",
    "run_oracle",
    "run_train",
    "write_csv",
    "write_json",
]
