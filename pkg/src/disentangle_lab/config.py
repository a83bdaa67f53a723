"""Experiment configuration files (TOML).

Layout::

    seed = 7                  # root seed; data/init/sampling/probe streams derive from it
    output_dir = "runs/demo"

    [model]                   # ModelSpec fields
    architecture = "ecapa_lite"
    channel_multiplier = 0.25

    [adversarial]             # lambda1/lambda2 for nusd, lambda for usd
    lambda = 3e-3
    lambda1 = 4e-5
    lambda2 = 8e-6
    head_mode = "paper_literal"

    [train]                   # TrainConfig fields except seed
    learning_rate = 1e-3
    epochs = 8

    [probe]
    reg = 1e-3
    epochs = 200

    [data.synthetic]          # SynthConfig fields; or [data] manifest = "path.csv"
    num_speakers = 20
"""

from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import SynthConfig
from .errors import ConfigError
from .models import ModelSpec
from .training import AdversarialConfig, TrainConfig

MODES = ("baseline", "usd", "nusd")


@dataclass(frozen=True)
class ProbeConfig:
    reg: float = 1e-3
    epochs: int = 200
    batch_size: int = 32

    def __post_init__(self):
        if self.reg <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("probe reg must be > 0, epochs and batch_size >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    lambda_usd: float = 3e-3
    lambda1: float = 4e-5
    lambda2: float = 8e-6
    head_mode: str = "paper_literal"
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    synthetic: SynthConfig | None = field(default_factory=SynthConfig)
    manifest: Path | None = None
    output_dir: Path = Path("runs")
    seed: int = 7

    def __post_init__(self):
        if (self.synthetic is None) == (self.manifest is None):
            raise ConfigError("exactly one data source (synthetic or manifest) is required")

    def adversarial(self, mode: str) -> AdversarialConfig:
        if mode == "baseline":
            return AdversarialConfig.baseline(self.head_mode)
        if mode == "usd":
            return AdversarialConfig.usd(self.lambda_usd, self.head_mode)
        if mode == "nusd":
            return AdversarialConfig(self.lambda1, self.lambda2, self.head_mode)
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "output_dir": str(self.output_dir),
            "model": self.model.to_dict(),
            "adversarial": {
                "lambda": self.lambda_usd,
                "lambda1": self.lambda1,
                "lambda2": self.lambda2,
                "head_mode": self.head_mode,
            },
            "train": self.train.to_dict(),
            "probe": dataclasses.asdict(self.probe),
            "data": {"synthetic": self.synthetic.to_dict()}
            if self.synthetic is not None
            else {"manifest": str(self.manifest)},
        }


def _section(doc: dict, name: str) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return dict(sec)


def _build(cls, values: dict, section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"[{section}] unknown field(s): {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def config_from_dict(doc: dict, base_dir: Path | None = None) -> ExperimentConfig:
    base_dir = base_dir or Path.cwd()
    top_known = {"seed", "output_dir", "model", "adversarial", "train", "probe", "data"}
    unknown = set(doc) - top_known
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    seed = int(doc.get("seed", 7))

    model_vals = _section(doc, "model")
    for key in ("dan_kernels", "dan_strides"):
        if key in model_vals:
            model_vals[key] = tuple(model_vals[key])
    model = _build(ModelSpec, model_vals, "model")

    adv = _section(doc, "adversarial")
    extra = set(adv) - {"lambda", "lambda1", "lambda2", "head_mode"}
    if extra:
        raise ConfigError(f"[adversarial] unknown field(s): {sorted(extra)}")

    train_vals = _section(doc, "train")
    if "seed" in train_vals:
        raise ConfigError("[train] seed is derived from the top-level seed")
    train = _build(TrainConfig, {**train_vals, "seed": seed}, "train")
    probe = _build(ProbeConfig, _section(doc, "probe"), "probe")

    data = _section(doc, "data")
    synthetic = manifest = None
    extra = set(data) - {"synthetic", "manifest"}
    if extra:
        raise ConfigError(f"[data] unknown field(s): {sorted(extra)}")
    if "synthetic" in data and "manifest" in data:
        raise ConfigError("[data] give either synthetic or manifest, not both")
    if "manifest" in data:
        manifest = (base_dir / data["manifest"]).resolve()
    else:
        synth_vals = dict(data.get("synthetic", {}))
        synth_vals.setdefault("seed", seed)
        try:
            synthetic = SynthConfig.from_dict(synth_vals)
        except TypeError as exc:
            raise ConfigError(f"[data.synthetic] {exc}") from None

    out = Path(doc.get("output_dir", "runs"))
    if not out.is_absolute():
        out = (base_dir / out).resolve()
    return ExperimentConfig(
        model=model,
        lambda_usd=float(adv.get("lambda", 3e-3)),
        lambda1=float(adv.get("lambda1", 4e-5)),
        lambda2=float(adv.get("lambda2", 8e-6)),
        head_mode=adv.get("head_mode", "paper_literal"),
        train=train,
        probe=probe,
        synthetic=synthetic,
        manifest=manifest,
        output_dir=out,
        seed=seed,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(doc, path.parent.resolve())


def ensure_writable(directory: Path) -> Path:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {directory} is not writable: {exc}") from None
    if not os.access(directory, os.W_OK):
        raise ConfigError(f"output directory {directory} is not writable")
    return directory
