"""Flat key = value configuration files, overrides, and run manifests.

The config format is a minimal TOML-style subset: one `key = value` per
line, `#` comments, booleans as true/false.  Every SimConfig field is a
valid key; unknown keys are errors that name the key.
"""

import dataclasses
import datetime
import json
from pathlib import Path

from .timeslab import ConfigError, SimConfig

_FIELDS = {f.name: f for f in dataclasses.fields(SimConfig)}


def _parse_value(key, text):
    typ = _FIELDS[key].type
    text = text.strip()
    try:
        if typ is bool or typ == "bool":
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int or typ == "int":
            return int(text)
        if typ is float or typ == "float":
            return float(text)
        return text.strip("\"'")
    except ValueError as exc:
        raise ConfigError(f"unparsable value for key {key!r}: {text!r}") from exc


def _coerce(key, value):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    if isinstance(value, str):
        return _parse_value(key, value)
    return value


def read_config_file(path):
    """Read a flat key = value file into a raw {key: string} dict."""
    raw = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        raw[key] = value
    return raw


def parse_config(path=None, overrides=None):
    """Build a SimConfig from an optional file plus override mapping.

    Overrides win over file values; values may be raw strings (as from the
    command line) or already-typed.  SimConfig's own validation applies.
    """
    values = {}
    if path is not None:
        for key, text in read_config_file(path).items():
            values[key] = _parse_value(key, text)
    for key, value in (overrides or {}).items():
        values[key] = _coerce(key, value)
    if "sigma" not in values:
        raise ConfigError("required key 'sigma' is missing")
    try:
        return SimConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def serialize_config(config):
    """Render a SimConfig as a flat key = value text that parses back equal."""
    lines = []
    for name in _FIELDS:
        value = getattr(config, name)
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{name} = {text}")
    return "\n".join(lines) + "\n"


def config_dict(config):
    return {name: getattr(config, name) for name in _FIELDS}


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


class RunManifest:
    """Provenance record for one run directory (manifest.json)."""

    FILENAME = "manifest.json"

    def __init__(self, config, outdir, version=None):
        from . import __version__

        self.config = config_dict(config)
        self.outdir = Path(outdir)
        self.version = version or __version__
        self.started = _now()
        self.finished = None
        self.status = "running"
        self.files = []

    @property
    def path(self):
        return self.outdir / self.FILENAME

    def write(self):
        data = {
            "config": self.config,
            "version": self.version,
            "started": self.started,
            "finished": self.finished,
            "status": self.status,
            "files": self.files,
        }
        self.path.write_text(json.dumps(data, indent=2) + "\n")

    def finish(self, status="complete"):
        self.status = status
        self.finished = _now()
        self.files = sorted(
            p.name
            for p in self.outdir.iterdir()
            if p.is_file() and p.name != self.FILENAME
        )
        self.write()

    @staticmethod
    def read(outdir):
        """Return the manifest dict of a run directory, or None if absent."""
        path = Path(outdir) / RunManifest.FILENAME
        if not path.exists():
            return None
        return json.loads(path.read_text())

    @staticmethod
    def is_complete(outdir):
        data = RunManifest.read(outdir)
        if data is None or data.get("status") != "complete":
            return False
        return all((Path(outdir) / f).exists() for f in data.get("files", []))
