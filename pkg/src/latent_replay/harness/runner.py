"""Run an experiment config: every grid cell for every seed, persisted on disk.

Layout of a run directory (named ``<name>-<config hash>``)::

    config.resolved.json        fully defaulted config
    results/<cell>__seed<k>.json one RunResult per cell and seed
    checkpoints/<cell>__seed<k>.pt  classifier (+ generator) state dicts
    summary.csv                 per-cell mean accuracy, SEM, R, mFID

Pretrained extractors and mFID reference models are cached under
``<output_dir>/cache``. Finished (cell, seed) pairs are not recomputed
unless ``force`` is set.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from latent_replay.arch import Classifier, get_preset
from latent_replay.cost import blocks_from_spec, relative_cost
from latent_replay.datasets import Dataset, load_dataset
from latent_replay.harness.config import ExperimentConfig
from latent_replay.metrics import RunResult, average_accuracy_sem
from latent_replay.replay import ReplayStrategy
from latent_replay.scenario import (
    MfidSettings,
    PretrainConfig,
    RunSettings,
    build_stream,
    fig4_settings,
    pretrain_extractor,
    run_continual,
    train_reference,
)

log = logging.getLogger(__name__)

RESULT_DIR = "results"
SUMMARY = "summary.csv"


@dataclass
class Cell:
    """One column of work: an architecture and a replay setting, run for every seed."""

    key: str
    arch: str
    label: str
    settings: RunSettings
    pretrain: PretrainConfig | None = None
    info: dict = field(default_factory=dict)


def strategy_slug(label: str) -> str:
    if label.startswith("S=["):
        return "s" + label[3:-1].replace(", ", "-")
    return label


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _pretrain_config(cfg: ExperimentConfig, **overrides) -> PretrainConfig:
    p = cfg.pretrain
    values = dict(source=p.source, num_classes_used=p.num_classes_used, augmentation=p.augmentation,
                  epochs=p.epochs, batch_size=p.batch_size, lr=p.lr)
    values.update(overrides)
    return PretrainConfig(**values)


def build_cells(cfg: ExperimentConfig) -> list[Cell]:
    """Expand a config into its grid of cells (without running anything)."""
    train = cfg.train
    cells = []
    freeze_after = cfg.freeze.after_first or None
    mfid = MfidSettings(cfg.mfid.samples, cfg.mfid.level) if cfg.mfid.enabled else None
    base_pretrain = _pretrain_config(cfg) if cfg.pretrain.enabled else None
    if cfg.kind == "strategies":
        for g in cfg.grid:
            spec = get_preset(g.arch, cfg.output_classes)
            for s in g.strategies:
                if s == "GR" or cfg.mode in ("image", "none"):
                    strategy, label = None, ("GR" if cfg.mode == "image" else cfg.mode.upper())
                else:
                    strategy = ReplayStrategy.parse(s, spec.depth)
                    label = strategy.label()
                settings = RunSettings(
                    mode=cfg.mode, strategy=strategy, train=train, freeze_extractor=cfg.freeze.extractor,
                    freeze_after_first=freeze_after,
                    freeze_generator_decoder=cfg.freeze.generator_decoder_after_first,
                    count_updates=cfg.count_updates, mfid=mfid, image_hidden=tuple(cfg.fig4.image_hidden),
                )
                cells.append(Cell(f"{g.arch}__{strategy_slug(label)}", g.arch, label, settings, base_pretrain,
                                  {"arch": g.arch, "strategy_label": label}))
    elif cfg.kind == "fig4":
        arch = cfg.grid[0].arch
        spec = get_preset(arch, cfg.output_classes)
        for setup in cfg.fig4.setups:
            settings = fig4_settings(setup, train, spec.depth)
            settings.image_hidden = tuple(cfg.fig4.image_hidden)
            settings.count_updates = cfg.count_updates
            cells.append(Cell(f"{arch}__{setup}", arch, setup, settings, None, {"arch": arch, "setup": setup}))
    else:
        arch = cfg.grid[0].arch
        spec = get_preset(arch, cfg.output_classes)
        strategy = ReplayStrategy.parse(cfg.grid[0].strategies[0], spec.depth)
        for aug in cfg.fig3.augmentation:
            for k in cfg.fig3.class_counts:
                settings = RunSettings(mode=cfg.mode, strategy=strategy, train=train, freeze_extractor=True,
                                       count_updates=cfg.count_updates)
                tag = "aug" if aug else "noaug"
                cells.append(Cell(f"{arch}__pre{k}-{tag}", arch, strategy.label(), settings,
                                  _pretrain_config(cfg, num_classes_used=k, augmentation=aug),
                                  {"arch": arch, "pretrain_classes": k, "augmentation": aug}))
    return cells


class Runner:
    def __init__(self, cfg: ExperimentConfig, data_root=None, force: bool = False):
        self.cfg = cfg.validate()
        self.data_root = data_root
        self.force = force
        self.run_dir = cfg.run_dir()
        self.cache_dir = Path(cfg.output_dir) / "cache"
        self._datasets: dict[str, Dataset] = {}

    def dataset(self, name: str) -> Dataset:
        if name not in self._datasets:
            self._datasets[name] = load_dataset(name, self.data_root)
        return self._datasets[name]

    def _cached(self, kind: str, key: dict, build):
        digest = hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]
        path = self.cache_dir / f"{kind}-{digest}.pt"
        if path.exists():
            return torch.load(path, weights_only=True)
        value = build()
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        torch.save(value, path)
        path.with_suffix(".json").write_text(_dumps(key))
        return value

    def extractor_state(self, cell: Cell):
        if cell.pretrain is None:
            return None
        p = cell.pretrain
        spec = get_preset(cell.arch, self.cfg.output_classes)
        key = {"pretrain": vars(p), "extractor": repr(spec.extractor), "seed": self.cfg.pretrain.seed,
               "max_steps": self.cfg.pretrain.max_steps}
        return self._cached("extractor", key, lambda: pretrain_extractor(
            p, spec, self.dataset(p.source), self.cfg.pretrain.seed, self.cfg.pretrain.max_steps or None))

    def reference(self, cell: Cell, extractor_state, seed: int):
        cfg = self.cfg
        spec = get_preset(cell.arch, cfg.output_classes)
        ex_key = None
        if extractor_state is not None:
            ex_key = hashlib.sha256(b"".join(v.numpy().tobytes() for v in extractor_state.values())).hexdigest()
        key = {"dataset": cfg.dataset, "arch": cell.arch, "seed": seed, "steps": cfg.mfid.reference_steps,
               "extractor": ex_key, "lr": cfg.train.lr, "batch_size": cfg.train.batch_size}

        def build():
            model = train_reference(self.dataset(cfg.dataset), spec, seed, cfg.mfid.reference_steps,
                                    cfg.train.batch_size, cfg.train.lr, extractor_state)
            return model.state_dict()

        model = Classifier(spec)
        model.load_state_dict(self._cached("reference", key, build))
        model.eval()
        return model

    def resolved(self) -> dict:
        """The config plus the values left to per-architecture defaults."""
        cfg = self.cfg
        out = cfg.to_dict()
        derived = {}
        for g in cfg.grid:
            spec = get_preset(g.arch, cfg.output_classes)
            d = spec.extractor_width
            derived[g.arch] = {
                "extractor_width": d,
                "hidden_widths": list(spec.hidden_widths),
                "num_classes": spec.num_classes,
                "kl_weight": cfg.train.kl_weight if cfg.train.kl_weight is not None else 1.0 / d,
                "level_weights": cfg.train.level_weights or [1.0] * (spec.depth + 1),
            }
        out["derived"] = derived
        return out

    def run(self) -> list[RunResult]:
        cfg = self.cfg
        dataset = self.dataset(cfg.dataset)
        stream = build_stream(cfg.dataset, split_seed=None if cfg.split_seed < 0 else cfg.split_seed)
        (self.run_dir / RESULT_DIR).mkdir(parents=True, exist_ok=True)
        (self.run_dir / "checkpoints").mkdir(exist_ok=True)
        (self.run_dir / "config.resolved.json").write_text(_dumps(self.resolved()))
        chash = cfg.content_hash()
        results = []
        for cell in build_cells(cfg):
            ex_state = None
            for seed in cfg.seeds:
                path = self.run_dir / RESULT_DIR / f"{cell.key}__seed{seed}.json"
                if path.exists() and not self.force:
                    results.append(RunResult.from_dict(json.loads(path.read_text())))
                    continue
                if ex_state is None:
                    ex_state = self.extractor_state(cell)
                settings = cell.settings
                settings.extractor_state = ex_state
                if cell.pretrain is not None:
                    settings.freeze_extractor = True
                reference = None
                if settings.mfid is not None and settings.mode == "generative":
                    reference = self.reference(cell, ex_state, seed)
                log.info("running %s seed %d", cell.key, seed)
                spec = get_preset(cell.arch, cfg.output_classes)
                result, learner = run_continual(dataset, stream, spec, settings, seed, cell=cell.key,
                                                reference=reference, config_hash=chash)
                result.strategy_label = cell.label
                result.extra.update(cell.info)
                ckpt = {"classifier": learner.classifier.state_dict()}
                if learner.generator is not None:
                    ckpt["generator"] = learner.generator.state_dict()
                torch.save(ckpt, self.run_dir / "checkpoints" / f"{cell.key}__seed{seed}.pt")
                path.write_text(_dumps(result.to_dict()))
                results.append(result)
        write_summary(results, self.run_dir / SUMMARY)
        return results


def run_experiment(cfg: ExperimentConfig, data_root=None, force: bool = False) -> list[RunResult]:
    return Runner(cfg, data_root, force).run()


def load_results(run_dir) -> list[RunResult]:
    files = sorted((Path(run_dir) / RESULT_DIR).glob("*.json"))
    return [RunResult.from_dict(json.loads(f.read_text())) for f in files]


def group_cells(results: list[RunResult]) -> dict[str, list[RunResult]]:
    groups: dict[str, list[RunResult]] = {}
    for r in results:
        groups.setdefault(r.cell, []).append(r)
    return groups


def summarize(results: list[RunResult]) -> list[dict]:
    rows = []
    for cell, rs in group_cells(results).items():
        mean, sem = average_accuracy_sem([r.average_accuracy for r in rs])
        mfids = [r.mfid for r in rs if r.mfid is not None]
        first = rs[0]
        r_value = first.relative_cost
        if r_value is None and first.strategy is not None and "arch" in first.extra:
            r_value = relative_cost(blocks_from_spec(get_preset(first.extra["arch"])), first.strategy)
        rows.append({
            "cell": cell,
            "arch": first.extra.get("arch", ""),
            "strategy": first.strategy_label or "",
            "R": r_value,
            "accuracy": mean,
            "sem": sem,
            "mfid": float(np.mean(mfids)) if mfids else None,
            "seeds": len(rs),
        })
    return rows


def write_summary(results: list[RunResult], path: Path) -> None:
    rows = summarize(results)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["cell", "arch", "strategy", "R", "accuracy", "sem", "mfid", "seeds"])
        w.writeheader()
        for row in rows:
            w.writerow({k: "" if v is None else v for k, v in row.items()})
