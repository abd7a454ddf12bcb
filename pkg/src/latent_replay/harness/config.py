"""Declarative experiment configuration (TOML) with full defaulting.

Every constant the training needs ends up in the resolved config, which is
saved next to the results and hashed to name the run directory.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import tomli

from latent_replay.arch import get_preset
from latent_replay.datasets import LOADERS
from latent_replay.errors import ConfigError
from latent_replay.replay import ReplayStrategy, TrainConfig
from latent_replay.scenario import FIG4_SETUPS, STREAM_PRESETS

KINDS = ("strategies", "fig4", "fig3")
MODES = ("generative", "buffer", "image", "none")
DATASET_CLASSES = {"CIFAR10": 10, "CIFAR100": 100, "FMNIST": 10, "SYNTH": 6}


@dataclass
class GridCell:
    arch: str
    strategies: list = field(default_factory=lambda: ["IR"])


@dataclass
class PretrainSection:
    enabled: bool = False
    source: str = "CIFAR10"
    num_classes_used: int = 10
    augmentation: bool = True
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    # cap on optimizer steps, for quick runs; 0 = no cap
    max_steps: int = 0


@dataclass
class FreezeSection:
    # frozen from the first task on (pretrained extractor)
    extractor: bool = False
    # "extractor" to freeze the classifier's conv layers after task 1
    after_first: str = ""
    generator_decoder_after_first: bool = False


@dataclass
class MfidSection:
    enabled: bool = False
    samples: int = 10000
    level: int = -1
    reference_steps: int = 5000


@dataclass
class Fig4Section:
    setups: list[str] = field(default_factory=lambda: list(FIG4_SETUPS))
    image_hidden: list[int] = field(default_factory=lambda: [400, 400])


@dataclass
class Fig3Section:
    class_counts: list[int] = field(default_factory=lambda: [2, 4, 6, 8, 10])
    augmentation: list[bool] = field(default_factory=lambda: [True, False])


@dataclass
class ExperimentConfig:
    name: str
    kind: str = "strategies"
    dataset: str = "CIFAR100"
    mode: str = "generative"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    num_classes: int = 0
    split_seed: int = -1
    count_updates: bool = False
    grid: list[GridCell] = field(default_factory=list)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    freeze: FreezeSection = field(default_factory=FreezeSection)
    mfid: MfidSection = field(default_factory=MfidSection)
    fig4: Fig4Section = field(default_factory=Fig4Section)
    fig3: Fig3Section = field(default_factory=Fig3Section)
    output_dir: str = "runs"

    @property
    def output_classes(self) -> int | None:
        """Output layer size override; ``None`` keeps the preset's (100 for ARCH1/ARCH2)."""
        return self.num_classes or None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def content_hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def run_dir(self) -> Path:
        return Path(self.output_dir) / f"{self.name}-{self.content_hash()}"

    def errors(self) -> list[str]:
        """Every validation problem, so they can be reported together before any compute."""
        errs = []
        if self.kind not in KINDS:
            errs.append(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.mode not in MODES:
            errs.append(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.dataset not in LOADERS:
            errs.append(f"unknown dataset {self.dataset!r}")
        elif self.dataset not in STREAM_PRESETS:
            errs.append(f"no task split for dataset {self.dataset!r}")
        if not self.seeds:
            errs.append("seeds must not be empty")
        if len(set(self.seeds)) != len(self.seeds):
            errs.append("seeds must be distinct")
        t = self.train
        if t.batch_size <= 0 or t.replay_batch_size <= 0:
            errs.append("batch sizes must be positive")
        if t.steps_per_task <= 0:
            errs.append("steps_per_task must be positive")
        if t.lr <= 0 or t.generator_lr <= 0:
            errs.append("learning rates must be positive")
        if t.latent_dim <= 0:
            errs.append("latent_dim must be positive")
        if t.current_weight not in ("inverse_task", "equal"):
            errs.append(f"unknown current_weight rule {t.current_weight!r}")
        if not self.grid:
            errs.append("no architecture given (set arch or [[grid]])")
        for cell in self.grid:
            try:
                spec = get_preset(cell.arch)
            except ConfigError as e:
                errs.append(str(e))
                continue
            if self.num_classes < 0:
                errs.append("num_classes must be non-negative (0 keeps the preset's output size)")
            elif self.dataset in STREAM_PRESETS:
                n_tasks, per_task = STREAM_PRESETS[self.dataset]
                outputs = self.output_classes or spec.num_classes
                if outputs < n_tasks * per_task:
                    errs.append(f"{cell.arch}: {outputs} outputs cannot cover the {n_tasks * per_task} "
                                f"classes of {self.dataset}")
            if self.kind == "fig4":
                continue
            if not cell.strategies:
                errs.append(f"{cell.arch}: empty strategy list")
            for s in cell.strategies:
                if s == "GR":
                    if self.mode != "image":
                        errs.append("strategy alias GR needs mode = 'image'")
                    continue
                try:
                    ReplayStrategy.parse(s, spec.depth)
                except ConfigError as e:
                    errs.append(f"{cell.arch}: {e}")
        if self.kind == "fig4":
            for s in self.fig4.setups:
                if s not in FIG4_SETUPS:
                    errs.append(f"unknown fig4 setup {s!r}")
        if self.kind == "fig3":
            if not self.pretrain.enabled:
                errs.append("fig3 sweeps pretraining; set pretrain.enabled = true")
            for k in self.fig3.class_counts:
                if k < 2 or k > DATASET_CLASSES.get(self.pretrain.source, 10):
                    errs.append(f"fig3 class count {k} outside 2..{DATASET_CLASSES.get(self.pretrain.source, 10)}")
        if self.pretrain.enabled:
            if self.pretrain.source not in LOADERS:
                errs.append(f"unknown pretraining source {self.pretrain.source!r}")
            if self.pretrain.num_classes_used < 2:
                errs.append("pretraining needs at least 2 classes")
            if self.pretrain.epochs <= 0:
                errs.append("pretraining epochs must be positive")
        if self.freeze.after_first not in ("", "extractor"):
            errs.append(f"freeze.after_first must be '' or 'extractor', got {self.freeze.after_first!r}")
        if self.mfid.enabled and self.mfid.samples < 2:
            errs.append("mfid.samples must be at least 2")
        return errs

    def validate(self) -> ExperimentConfig:
        errs = self.errors()
        if errs:
            raise ConfigError("invalid experiment config:\n  - " + "\n  - ".join(errs))
        return self


def _section(cls, data: dict | None, where: str):
    data = dict(data or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {unknown}")
    if cls is TrainConfig and "betas" in data:
        data["betas"] = tuple(data["betas"])
    return cls(**data)


def from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    if "name" not in data:
        raise ConfigError("config needs a name")
    grid = [GridCell(**g) for g in data.pop("grid", [])]
    arch = data.pop("arch", None)
    strategy = data.pop("strategy", None)
    strategies = data.pop("strategies", None)
    if arch is not None:
        if strategies is None:
            strategies = [strategy] if strategy is not None else ["IR"]
        grid.append(GridCell(arch, list(strategies)))
    sections = {
        "train": TrainConfig, "pretrain": PretrainSection, "freeze": FreezeSection,
        "mfid": MfidSection, "fig4": Fig4Section, "fig3": Fig3Section,
    }
    kwargs = {k: _section(cls, data.pop(k, None), k) for k, cls in sections.items()}
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    return ExperimentConfig(grid=grid, **data, **kwargs)


def recipe_path(name: str) -> Path:
    return Path(str(resources.files("latent_replay") / "recipes" / f"{name}.toml"))


def load_config(path_or_recipe: str | Path) -> ExperimentConfig:
    """Read a TOML experiment file, or a bundled recipe by name (``table1``, ``fig4``...)."""
    path = Path(path_or_recipe)
    if not path.exists():
        candidate = recipe_path(str(path_or_recipe))
        if not candidate.exists():
            raise ConfigError(f"no config file or recipe named {path_or_recipe!r}")
        path = candidate
    try:
        data = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    try:
        return from_dict(data)
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from None
