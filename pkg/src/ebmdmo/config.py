"""Run configuration: one JSON document with a section per job.

Every field has a default; unknown keys are rejected before any job starts;
the fully resolved config is echoed into the output directory so each run
is self-describing.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import __version__
from .errors import IoError


class ConfigError(ValueError):
    """Invalid or unknown configuration content (a usage error)."""


@dataclass
class DatasetSection:
    task: str = "reach"
    train: int = 200
    test: int = 50
    seed: int = 7
    image_size: int = 64
    horizon: int = 15


@dataclass
class VaeSection:
    latent_dim: int = 16
    beta: float = 1e-6
    d_model: int = 96
    layers: int = 2
    heads: int = 4
    ffn: int = 192
    lr: float = 1e-3
    steps: int = 9000
    batch: int = 32
    seed: int = 0


@dataclass
class EbmSection:
    variant: str = "trajectory_aligned"
    k_data: int = 4
    k_vae: int = 4
    include_self_vae_negative: bool = False
    loss_mode: str = "softmax_contrastive"
    reg_weight: float = 1e-3
    lr: float = 2e-4
    steps: int = 2500
    batch: int = 16
    seed: int = 0
    eval_every: int = 250


@dataclass
class DmoSection:
    variant: str = "trajectory_aligned"
    r_train: int = 5
    residual: bool = True
    detach_between_steps: bool = True
    pose_dropout: float = 0.0
    lr: float = 3e-4
    steps: int = 2500
    batch: int = 16
    seed: int = 0


@dataclass
class OptimizerSection:
    kind: str = "dmo"
    step_size: float = 0.001
    iterations: int = 100
    noise_scale: float = 1.0
    prior_weight: float = 1.0


@dataclass
class PredictionSection:
    n: int = 8
    rounds: int = 1


@dataclass
class EvalSection:
    episodes: int = 0  # 0 = the whole test split
    seed: int = 0


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    vae: VaeSection = field(default_factory=VaeSection)
    ebm: EbmSection = field(default_factory=EbmSection)
    dmo: DmoSection = field(default_factory=DmoSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    prediction: PredictionSection = field(default_factory=PredictionSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        cfg = RunConfig()
        section_fields = {f.name: f for f in fields(cfg)}
        unknown = set(doc) - set(section_fields)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        for name, payload in doc.items():
            if not isinstance(payload, dict):
                raise ConfigError(f"section {name!r} must be an object")
            section = getattr(cfg, name)
            allowed = {f.name: f.type for f in fields(section)}
            bad = set(payload) - set(allowed)
            if bad:
                raise ConfigError(f"unknown keys in section {name!r}: {sorted(bad)}")
            for key, value in payload.items():
                current = getattr(section, key)
                if isinstance(current, bool):
                    if not isinstance(value, bool):
                        raise ConfigError(f"{name}.{key} must be a boolean")
                elif isinstance(current, int):
                    if not isinstance(value, int) or isinstance(value, bool):
                        raise ConfigError(f"{name}.{key} must be an integer")
                elif isinstance(current, float):
                    if not isinstance(value, (int, float)) or isinstance(value, bool):
                        raise ConfigError(f"{name}.{key} must be a number")
                    value = float(value)
                elif isinstance(current, str):
                    if not isinstance(value, str):
                        raise ConfigError(f"{name}.{key} must be a string")
                setattr(section, key, value)
        return cfg

    @staticmethod
    def load(path: str | Path) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise IoError(f"missing config file: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return RunConfig.from_dict(doc)

    def echo(self, out_dir: str | Path, command: str) -> None:
        """Write the resolved config + tool version next to the job outputs."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        payload = {
            "tool_version": __version__,
            "command": command,
            "config": self.to_dict(),
        }
        (out / "run_config.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
