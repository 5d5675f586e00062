"""Experiment configuration, provenance hashes and small parsing helpers."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

from ..attack import ATTACK_KINDS, AttackConfig
from ..data import DataConfig, config_hash
from ..defense import DefenseConfig
from ..model import ModelConfig, PretrainConfig

WORKERS_ENV = "ROBUSTSEG_WORKERS"
CHUNK = 32  # samples per work unit; fixed so results do not depend on the worker count
DEFAULT_EPS = (4 / 255, 8 / 255, 16 / 255)


class StageError(Exception):
    """A stage failure reported as one machine-parseable line."""

    def __init__(self, code: str, message: str, path=None):
        super().__init__(message)
        self.code = code
        self.path = None if path is None else str(path)

    def record(self) -> dict:
        rec = {"error": self.code, "message": str(self)}
        if self.path is not None:
            rec["path"] = self.path
        return rec


def require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise StageError("missing_artifact", f"missing {what}: {path}", path)
    return path


def workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise StageError("bad_env", f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(n, 1)


def parse_eps(text) -> float:
    """Accept ``16/255``, ``16`` (read as 16/255 when > 1) or a plain fraction like ``0.0627``."""
    try:
        val = float(Fraction(str(text)))
    except (ValueError, ZeroDivisionError):
        raise StageError("bad_flag", f"cannot parse epsilon {text!r}") from None
    if val > 1:
        val /= 255
    if val <= 0:
        raise StageError("bad_flag", f"epsilon must be positive, got {text!r}")
    return val


def eps_label(eps: float) -> str:
    """Short tag such as ``16`` for 16/255, else the float repr."""
    k = eps * 255
    return str(round(k)) if abs(k - round(k)) < 1e-9 else repr(eps)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    n: int = 500
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    pretrain: PretrainConfig = PretrainConfig()
    attack: AttackConfig = AttackConfig()
    kinds: tuple = ATTACK_KINDS
    eps: tuple = DEFAULT_EPS
    defense: DefenseConfig = DefenseConfig()
    out: str = "runs/exp"

    def __post_init__(self):
        if any(e <= 0 for e in self.eps):
            raise ValueError(f"epsilon values must be positive: {self.eps}")
        unknown = set(self.kinds) - set(ATTACK_KINDS)
        if unknown:
            raise ValueError(f"unknown attack kinds {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["defense"] = self.defense.to_dict()
        d["kinds"], d["eps"] = list(self.kinds), list(self.eps)
        return d

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return config_hash(d)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d.pop("config_hash", None)  # informational copy written next to the config
        sub = {"data": DataConfig, "model": ModelConfig, "pretrain": PretrainConfig,
               "attack": AttackConfig, "defense": DefenseConfig}
        for key, typ in sub.items():
            if key in d:
                val = dict(d[key])
                for k, v in val.items():
                    if isinstance(v, list):
                        val[k] = tuple(v)
                d[key] = typ(**val)
        for key in ("kinds", "eps"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(require(path, "config file").read_text()))
