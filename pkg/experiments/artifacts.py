"""CSV and JSON artifacts, each carrying config hash, seed and format version."""

import csv
import json
import logging
import math
from pathlib import Path

from pydantic import BaseModel, Field

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class ArtifactHeader(BaseModel):
    config_hash: str
    seed: int
    format_version: int = FORMAT_VERSION
    kind: str


class ArtifactEntry(BaseModel):
    name: str
    kind: str
    path: str


class Manifest(BaseModel):
    command: str
    config_name: str
    config_hash: str
    seed: int
    format_version: int = FORMAT_VERSION
    artifacts: list[ArtifactEntry] = Field(default_factory=list)
    summary: dict = Field(default_factory=dict)


class ArtifactWriter:
    """Writes every artifact of one command invocation into `directory`."""

    def __init__(self, directory, command: str, config):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.config_hash = config.config_hash
        self.seed = config.seed
        self.manifest = Manifest(command=command, config_name=config.name, config_hash=self.config_hash, seed=config.seed)

    def header(self, kind: str) -> ArtifactHeader:
        return ArtifactHeader(config_hash=self.config_hash, seed=self.seed, kind=kind)

    def _register(self, name: str, kind: str, path: Path) -> Path:
        try:
            relative = path.resolve().relative_to(self.directory.resolve())
        except ValueError:
            relative = path
        self.manifest.artifacts.append(ArtifactEntry(name=name, kind=kind, path=relative.as_posix()))
        logger.info("wrote %s", path)
        return path

    def csv(self, name: str, rows: list[dict], kind: str, fieldnames: list[str] | None = None) -> Path:
        path = self.directory / f"{name}.csv"
        write_csv(path, rows, self.header(kind), fieldnames)
        return self._register(name, kind, path)

    def json(self, name: str, payload, kind: str) -> Path:
        path = self.directory / f"{name}.json"
        write_json(path, payload, self.header(kind))
        return self._register(name, kind, path)

    def file(self, name: str, path: Path, kind: str) -> Path:
        return self._register(name, kind, Path(path))

    def finish(self, **summary) -> Path:
        self.manifest.summary.update(summary)
        path = self.directory / "manifest.json"
        path.write_text(self.manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
        logger.info("wrote %s", path)
        return path


def write_csv(path, rows: list[dict], header: ArtifactHeader, fieldnames: list[str] | None = None) -> Path:
    path = Path(path)
    if fieldnames is None:
        fieldnames = []
        for row in rows:
            fieldnames.extend(key for key in row if key not in fieldnames)
    with path.open("w", newline="", encoding="utf-8") as handle:
        for key, value in header.model_dump().items():
            handle.write(f"# {key}: {value}\n")
        writer = csv.DictWriter(handle, fieldnames=fieldnames, restval="", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return path


def read_csv(path) -> tuple[dict, list[dict]]:
    """Header block and rows (values as strings) of an artifact CSV."""
    header = {}
    lines = []
    with Path(path).open(newline="", encoding="utf-8") as handle:
        for line in handle:
            if line.startswith("# ") and not lines:
                key, _, value = line[2:].rstrip("\n").partition(": ")
                header[key] = value
            else:
                lines.append(line)
    return header, list(csv.DictReader(lines))


def _finite(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _finite(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite(v) for v in value]
    return value


def write_json(path, payload, header: ArtifactHeader) -> Path:
    path = Path(path)
    data = payload.model_dump(mode="json") if isinstance(payload, BaseModel) else payload
    document = {"header": header.model_dump(), "data": _finite(data)}
    path.write_text(json.dumps(document, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")
    return path
