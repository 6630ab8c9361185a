"""Flat ``key = value`` run configuration with dotted namespaces.

Lines starting with ``#`` and blank lines are ignored. Lists are comma
separated; ``none`` clears an optional value. Every key must be declared in
the schema of the subcommand being run.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .synth import SynthConfig


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(item):
    def parse(s: str) -> tuple:
        parts = [p.strip() for p in s.split(",") if p.strip()]
        if not parts:
            raise ValueError("empty list")
        return tuple(item(p) for p in parts)
    parse.__name__ = f"list of {item.__name__}"
    return parse


def _optional(item):
    def parse(s: str):
        return None if s.strip().lower() == "none" else item(s)
    parse.__name__ = f"optional {item.__name__}"
    return parse


def _str(s: str) -> str:
    return s.strip()


def _path(s: str) -> Path:
    return Path(s.strip())


@dataclass(frozen=True)
class Key:
    parse: object
    default: object = None
    required: bool = False
    must_exist: bool = False


GLOBAL = {
    "seed": Key(int, 0),
    "workers": Key(int, 1),
}

_SYNTH_TYPES = {"archetype_mix": _list(float), "utilities": int, "n_households": int, "n_weeks": int,
                "seed": int, "start": int}
SYNTH = {
    f"synth.{f.name}": Key(_SYNTH_TYPES.get(f.name, float),
                           None if f.name == "seed" else getattr(SynthConfig(), f.name))
    for f in fields(SynthConfig)
}

DATA = {
    "data.dataset": Key(_path, required=True, must_exist=True),
    "data.ground_truth": Key(_path, required=True, must_exist=True),
    "data.n_aux": Key(int, required=True),
    "data.fold": Key(int, 0),
    "data.M": Key(int, 10),
    "data.utilities": Key(_optional(int), None),
}

ATTACK = {
    "attack.scenarios": Key(_list(_str), ("I",)),
    "attack.runs": Key(int, 10),
    "attack.offset": Key(int, 0),
    "attack.gaps": Key(_list(int), (1,)),
    "attack.period_weeks": Key(_list(int), (1,)),
    "attack.rounding": Key(_list(_optional(int)), (None,)),
    "attack.population_sizes": Key(_optional(_list(int)), None),
    "attack.population_repeats": Key(int, 5),
    "attack.roc": Key(_bool, False),
    "attack.ranks": Key(_optional(_list(int)), None),
}

SCHEMAS = {
    "generate": {**SYNTH, "generate.scheme_seed": Key(_optional(int), None)},
    "preprocess": {
        "preprocess.input": Key(_path, required=True, must_exist=True),
        "preprocess.ground_truth": Key(_optional(_path), None),
        "preprocess.delta_t": Key(int, 3600),
        "preprocess.aggregate_to": Key(_optional(int), None),
        "preprocess.gas_clip_quantile": Key(float, 0.999),
    },
    "train": {
        **DATA,
        "model.kind": Key(_str, required=True),
        "model.L": Key(_optional(int), None),
        "train.learning_rate": Key(float, 0.001),
        "train.weight_decay": Key(float, 0.01),
        "train.lag": Key(int, 7),
        "train.batch_size": Key(int, 64),
        "train.margin": Key(float, 1.0),
        "train.patience": Key(int, 10),
        "train.max_epochs": Key(int, 300),
        "grid.enabled": Key(_bool, False),
        "grid.learning_rates": Key(_list(float), (0.001, 0.005)),
        "grid.weight_decays": Key(_list(float), (0.01, 0.005)),
        "grid.layers": Key(_optional(_list(int)), None),
        "grid.lags": Key(_list(int), (4, 5, 6, 7)),
    },
    "attack": {
        **DATA,
        **ATTACK,
        "attack.checkpoints": Key(_list(_path), required=True),
    },
    "baseline": {
        **DATA,
        "attack.scenarios": ATTACK["attack.scenarios"],
        "attack.runs": ATTACK["attack.runs"],
        "attack.offset": ATTACK["attack.offset"],
        "attack.ranks": ATTACK["attack.ranks"],
        "baseline.methods": Key(_list(_str), ("random", "l2", "buchmann", "tudor", "jawurek", "faisal")),
        "baseline.svm_epochs": Key(int, 200),
        "baseline.svm_reg": Key(float, 1e-3),
        "baseline.forest_trees": Key(int, 100),
    },
    "report": {
        "report.inputs": Key(_list(_path), required=True, must_exist=True),
        "report.ranks": Key(_optional(_list(int)), None),
    },
}


def parse_lines(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ConfigError(f"{source}:{n}: empty key")
        if k in out:
            raise ConfigError(f"{source}:{n}: duplicate key {k!r}")
        out[k] = v
    return out


@dataclass(frozen=True)
class RunConfig:
    command: str
    values: dict
    raw: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def section(self, prefix: str) -> dict:
        """Values under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    @property
    def hash(self) -> str:
        """Digest of every setting except the worker count; paths enter as written."""
        lines = [f"command={self.command}"]
        for k in sorted(self.values):
            if k != "workers":
                lines.append(f"{k}={self.raw[k]}" if k in self.raw else f"{k}={self.values[k]!r}")
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]


def resolve(command: str, raw: dict[str, str], bases: dict | None = None) -> RunConfig:
    """Parse ``raw`` strings; ``bases`` maps keys to the directory their relative paths start from."""
    if command not in SCHEMAS:
        raise ConfigError(f"unknown command {command!r}")
    schema = {**GLOBAL, **SCHEMAS[command]}
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
    values = {}
    for key, spec in schema.items():
        if key not in raw:
            if spec.required:
                raise ConfigError(f"missing required key {key!r}")
            values[key] = spec.default
            continue
        try:
            v = spec.parse(raw[key])
        except ValueError as e:
            raise ConfigError(f"{key}: {e}") from None
        base_dir = (bases or {}).get(key)
        if base_dir is not None:
            v = _rebase(v, base_dir)
        if spec.must_exist:
            for p in v if isinstance(v, tuple) else (v,):
                if not Path(p).exists():
                    raise ConfigError(f"{key}: path does not exist: {p}")
        values[key] = v
    return RunConfig(command, values, dict(raw))


def _rebase(v, base: Path):
    if isinstance(v, Path):
        return v if v.is_absolute() else base / v
    if isinstance(v, tuple):
        return tuple(_rebase(x, base) for x in v)
    return v


def load(command: str, path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Read ``path`` (optional), apply ``overrides`` and resolve against the schema.

    Relative paths in the file are taken relative to the file's directory,
    relative paths in overrides relative to the working directory.
    """
    raw: dict[str, str] = {}
    base = None
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        raw = parse_lines(path.read_text(), str(path))
        base = path.parent
    bases = {k: base for k in raw}
    for k, v in (overrides or {}).items():
        raw[k] = v
        bases[k] = None
    return resolve(command, raw, bases)
