"""Replay strategies and the class-incremental training loop.

A replay batch is split over injection levels according to a strategy
``S = [f_0, ..., f_{H-1}]``. Samples assigned to level ``n`` are either drawn
from a generator (decoded only down to level ``n``) or from a buffer of
stored taps, and are pushed through the classifier layers downstream of
level ``n`` only. Internal Replay is the strategy ``[1, 0, ..., 0]``.
"""

from __future__ import annotations

import contextlib
import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F

from latent_replay.arch import Classifier, FeatureTaps
from latent_replay.cost import GradientTouchCounter
from latent_replay.errors import ConfigError, InputError
from latent_replay.generator import (
    EXTRACTOR_LEVEL,
    Generator,
    generator_loss,
    sample_features,
    sample_latent,
)

log = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class ReplayStrategy:
    frequencies: tuple[float, ...]

    def __post_init__(self):
        freqs = tuple(float(f) for f in self.frequencies)
        object.__setattr__(self, "frequencies", freqs)
        if not freqs:
            raise ConfigError("strategy needs at least one level")
        if any(not math.isfinite(f) or f < 0 for f in freqs):
            raise ConfigError(f"strategy frequencies must be finite and non-negative, got {list(freqs)}")
        if abs(sum(freqs) - 1.0) > SIMPLEX_TOL:
            raise ConfigError(f"strategy frequencies must sum to 1, got {sum(freqs)!r}")

    def __len__(self):
        return len(self.frequencies)

    @classmethod
    def internal_replay(cls, depth: int) -> ReplayStrategy:
        return cls((1.0,) + (0.0,) * (depth - 1))

    @classmethod
    def parse(cls, value, depth: int) -> ReplayStrategy:
        """Build from a config value: a list of fractions or the alias ``"IR"``."""
        if isinstance(value, str):
            if value.upper() == "IR":
                return cls.internal_replay(depth)
            raise ConfigError(f"unknown strategy alias {value!r}")
        strategy = cls(tuple(value))
        if len(strategy) != depth:
            raise ConfigError(f"strategy {list(strategy.frequencies)} has {len(strategy)} levels, "
                              f"architecture has {depth}")
        return strategy

    @property
    def is_internal_replay(self) -> bool:
        return self.frequencies[0] == 1.0

    @property
    def shallowest_level(self) -> int:
        return next(i for i, f in enumerate(self.frequencies) if f > 0)

    def label(self) -> str:
        if self.is_internal_replay:
            return "IR"
        return "S=[" + ", ".join(f"{f:g}" for f in self.frequencies) + "]"


def split_batch(batch_size: int, strategy: ReplayStrategy | Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``batch_size`` over the strategy's levels.

    Ties in the fractional parts go to the shallower level.
    """
    if not isinstance(strategy, ReplayStrategy):
        strategy = ReplayStrategy(tuple(strategy))
    if batch_size < 0:
        raise InputError("batch_size must be non-negative")
    exact = [batch_size * f for f in strategy.frequencies]
    counts = [math.floor(e) for e in exact]
    short = batch_size - sum(counts)
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return counts


def soft_target_loss(logits: torch.Tensor, target_logits: torch.Tensor, temperature: float) -> torch.Tensor:
    """Cross-entropy against temperature-softened targets, scaled by ``T**2``."""
    targets = F.softmax(target_logits / temperature, dim=1)
    return -(targets * F.log_softmax(logits / temperature, dim=1)).sum(1).mean() * temperature ** 2


def _counting(counter: GradientTouchCounter | None):
    return counter if counter is not None else contextlib.nullcontext()


def replay_step_generative(classifier: Classifier, generator: Generator, strategy: ReplayStrategy,
                           replay_batch_size: int, rng: torch.Generator | None = None, *,
                           teacher: Classifier | None = None, temperature: float = 2.0, weight: float = 1.0,
                           counter: GradientTouchCounter | None = None) -> dict[int, float]:
    """Accumulate replay gradients from generated features; returns the loss per level.

    Features for level ``n`` are soft-labelled by ``teacher`` (by default the
    classifier itself) evaluated from the same level before any update. The
    training loop passes the classifier snapshot taken at the end of the
    previous task; distilling the live classifier into itself gives a zero
    gradient. Gradients are added to ``.grad``; no optimizer step is taken.
    """
    teacher = classifier if teacher is None else teacher
    counts = split_batch(replay_batch_size, strategy)
    losses = {}
    for level, count in enumerate(counts):
        if count == 0:
            continue
        with torch.no_grad():
            feats = sample_features(generator, level, count, rng=rng)
            targets = teacher.forward_from_level(feats, level)
        with _counting(counter):
            loss = soft_target_loss(classifier.forward_from_level(feats, level), targets, temperature)
            (weight * count / replay_batch_size * loss).backward()
        losses[level] = loss.item()
    return losses


def replay_step_buffer(classifier: Classifier, buffer: FeatureBuffer, strategy: ReplayStrategy,
                       replay_batch_size: int, rng: torch.Generator | None = None, *, weight: float = 1.0,
                       counter: GradientTouchCounter | None = None) -> dict[int, float]:
    """Accumulate replay gradients from stored taps with their hard labels."""
    if len(buffer) == 0:
        log.info("replay buffer is empty; skipping replay")
        return {}
    counts = split_batch(replay_batch_size, strategy)
    losses = {}
    for level, count in enumerate(counts):
        if count == 0:
            continue
        feats, labels = buffer.sample(level, count, rng)
        with _counting(counter):
            loss = F.cross_entropy(classifier.forward_from_level(feats, level), labels)
            (weight * count / replay_batch_size * loss).backward()
        losses[level] = loss.item()
    return losses


def replay_step_images(classifier: Classifier, generator: Generator, replay_batch_size: int,
                       rng: torch.Generator | None = None, *, teacher: Classifier | None = None,
                       temperature: float = 2.0, weight: float = 1.0,
                       counter: GradientTouchCounter | None = None) -> dict[int, float]:
    """Standard generative replay: generated images through the whole classifier."""
    teacher = classifier if teacher is None else teacher
    shape = (replay_batch_size, *classifier.spec.extractor.input_shape)
    with torch.no_grad():
        images = sample_features(generator, EXTRACTOR_LEVEL, replay_batch_size, rng=rng).reshape(shape)
        targets = teacher(images)
    with _counting(counter):
        loss = soft_target_loss(classifier(images), targets, temperature)
        (weight * loss).backward()
    return {EXTRACTOR_LEVEL: loss.item()}


class FeatureBuffer:
    """Fixed-capacity store of taps at all levels with class-balanced retention.

    After every insertion each seen class keeps an equal share of the
    capacity (shares differ by at most one); which samples survive within a
    class is random.
    """

    def __init__(self, capacity: int = 512):
        if capacity <= 0:
            raise ConfigError("buffer capacity must be positive")
        self.capacity = capacity
        # class id -> (levels [tensor per level], task ids)
        self._store: dict[int, tuple[list[torch.Tensor], torch.Tensor]] = {}
        self._flat = None

    def __len__(self):
        return sum(len(t) for _, t in self._store.values())

    @property
    def classes(self) -> list[int]:
        return sorted(self._store)

    def class_counts(self) -> dict[int, int]:
        return {c: len(self._store[c][1]) for c in self.classes}

    def quotas(self, classes: Sequence[int]) -> dict[int, int]:
        classes = sorted(classes)
        base, extra = divmod(self.capacity, len(classes))
        return {c: base + (1 if i < extra else 0) for i, c in enumerate(classes)}

    def candidates(self, labels: torch.Tensor, rng: torch.Generator | None = None) -> torch.Tensor:
        """Indices of new samples worth computing taps for (at most one quota per new class)."""
        new_classes = sorted(int(c) for c in labels.unique())
        quota = self.quotas(set(self._store) | set(new_classes))
        picked = []
        for c in new_classes:
            idx = (labels == c).nonzero().flatten()
            idx = idx[torch.randperm(len(idx), generator=rng)[: quota[c]]]
            picked.append(idx)
        return torch.cat(picked).sort().values

    def add(self, taps: FeatureTaps | Sequence[torch.Tensor], labels: torch.Tensor, task_id: int,
            rng: torch.Generator | None = None) -> None:
        levels = taps.levels if isinstance(taps, FeatureTaps) else list(taps)
        levels = [t.detach() for t in levels]
        labels = labels.detach().long()
        if self._store and len(levels) != len(next(iter(self._store.values()))[0]):
            raise InputError("taps have a different number of levels than the buffer")
        for c in sorted(int(c) for c in labels.unique()):
            mask = labels == c
            new_levels = [t[mask] for t in levels]
            new_tasks = torch.full((int(mask.sum()),), task_id, dtype=torch.long)
            if c in self._store:
                old_levels, old_tasks = self._store[c]
                new_levels = [torch.cat([o, n]) for o, n in zip(old_levels, new_levels)]
                new_tasks = torch.cat([old_tasks, new_tasks])
            self._store[c] = (new_levels, new_tasks)
        quota = self.quotas(self._store)
        for c in self.classes:
            lv, tasks = self._store[c]
            if len(tasks) > quota[c]:
                keep = torch.randperm(len(tasks), generator=rng)[: quota[c]].sort().values
                self._store[c] = ([t[keep] for t in lv], tasks[keep])
        self._flat = None

    def _flatten(self):
        if self._flat is None:
            classes = self.classes
            depth = len(self._store[classes[0]][0])
            levels = [torch.cat([self._store[c][0][n] for c in classes]) for n in range(depth)]
            labels = torch.cat([torch.full((len(self._store[c][1]),), c, dtype=torch.long) for c in classes])
            tasks = torch.cat([self._store[c][1] for c in classes])
            self._flat = (levels, labels, tasks)
        return self._flat

    def entries(self):
        """All stored ``(levels, labels, task ids)`` in class order."""
        return self._flatten()

    def sample(self, level: int, count: int, rng: torch.Generator | None = None):
        """Uniformly drawn taps at ``level`` with their labels (without replacement while possible)."""
        levels, labels, _ = self._flatten()
        n = len(labels)
        if count <= n:
            idx = torch.randperm(n, generator=rng)[:count]
        else:
            idx = torch.randint(n, (count,), generator=rng)
        return levels[level][idx], labels[idx]


@dataclass
class TrainConfig:
    """Optimization constants for one continual run."""

    steps_per_task: int = 2000
    batch_size: int = 256
    replay_batch_size: int = 256
    lr: float = 1e-4
    generator_lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    temperature: float = 2.0
    latent_dim: int = 100
    conditional: bool = False
    kl_weight: float | None = None
    level_weights: list[float] | None = None
    buffer_capacity: int = 512
    # weight on the current-task loss at task t; replay gets the rest
    current_weight: str = "inverse_task"

    def mixing(self, task_index: int) -> float:
        """Current-task loss weight for the 1-based ``task_index``."""
        if self.current_weight == "inverse_task":
            return 1.0 / task_index
        if self.current_weight == "equal":
            return 0.5 if task_index > 1 else 1.0
        raise ConfigError(f"unknown current_weight rule {self.current_weight!r}")


@dataclass
class TaskLog:
    task_index: int
    steps: int
    current_loss: float
    replay_loss: float
    generator_loss: float | None = None
    replay_samples: int = 0
    touches: int = 0


def index_batches(num: int, batch_size: int, steps: int, rng: torch.Generator):
    """Yield ``steps`` index batches, reshuffling at every pass over the data."""
    if batch_size >= num:
        for _ in range(steps):
            yield torch.randperm(num, generator=rng)
        return
    perm = torch.randperm(num, generator=rng)
    pos = 0
    for _ in range(steps):
        if pos + batch_size > num:
            perm = torch.randperm(num, generator=rng)
            pos = 0
        yield perm[pos:pos + batch_size]
        pos += batch_size


@dataclass
class Learner:
    """A classifier plus its replay source, trained task by task.

    ``mode`` is one of ``"generative"`` (feature-level generator, PLR/IR),
    ``"buffer"`` (stored taps), ``"image"`` (image-space generative replay)
    or ``"none"`` (plain fine-tuning).
    """

    classifier: Classifier
    mode: str
    strategy: ReplayStrategy | None
    config: TrainConfig
    rng: torch.Generator
    generator: Generator | None = None
    buffer: FeatureBuffer | None = None
    counter: GradientTouchCounter | None = None
    freeze_after_first: str | None = None
    freeze_generator_decoder: bool = False
    tasks_seen: int = 0
    logs: list[TaskLog] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in ("generative", "buffer", "image", "none"):
            raise ConfigError(f"unknown replay mode {self.mode!r}")
        if self.mode in ("generative", "buffer") and self.strategy is None:
            raise ConfigError(f"{self.mode} replay needs a strategy")
        if self.mode in ("generative", "image") and self.generator is None:
            raise ConfigError(f"{self.mode} replay needs a generator")
        if self.mode == "buffer" and self.buffer is None:
            self.buffer = FeatureBuffer(self.config.buffer_capacity)
        if self.strategy is not None and len(self.strategy) != self.classifier.depth:
            raise ConfigError("strategy length does not match the classifier depth")

    def train_task(self, images: torch.Tensor, labels: torch.Tensor) -> TaskLog:
        if len(labels) == 0:
            raise ConfigError("task has no training samples")
        t = self.tasks_seen + 1
        cfg = self.config
        replaying = t > 1 and self.mode != "none"
        teacher = prev_gen = None
        if replaying and self.mode in ("generative", "image"):
            teacher = _frozen_copy(self.classifier)
            prev_gen = _frozen_copy(self.generator)
        w_cur = cfg.mixing(t) if replaying else 1.0

        clf_opt = torch.optim.Adam(self.classifier.trainable_parameters(), lr=cfg.lr, betas=cfg.betas)
        gen_opt = None
        if self.generator is not None:
            gen_params = [p for p in self.generator.parameters() if p.requires_grad]
            gen_opt = torch.optim.Adam(gen_params, lr=cfg.generator_lr, betas=cfg.betas)

        cur_sum = rep_sum = gen_sum = 0.0
        replay_samples = 0
        touches_before = self.counter.total if self.counter is not None else 0
        self.classifier.train()
        for idx in index_batches(len(labels), cfg.batch_size, cfg.steps_per_task, self.rng):
            x, y = images[idx], labels[idx]
            clf_opt.zero_grad(set_to_none=True)
            loss = F.cross_entropy(self.classifier(x), y)
            (w_cur * loss).backward()
            cur_sum += loss.item()
            if replaying:
                per_level = self._replay(teacher, prev_gen, 1.0 - w_cur)
                if per_level:
                    counts = (split_batch(cfg.replay_batch_size, self.strategy) if self.strategy is not None
                              else [cfg.replay_batch_size])
                    nz = [c for c in counts if c > 0]
                    rep_sum += sum(c * l for c, l in zip(nz, per_level.values())) / cfg.replay_batch_size
                    replay_samples += cfg.replay_batch_size
            clf_opt.step()
            if gen_opt is not None:
                gen_sum += self._generator_step(gen_opt, x, y, prev_gen, w_cur)

        if self.mode == "buffer":
            self._fill_buffer(images, labels, t)
        if t == 1:
            self._freeze_after_first()
        self.tasks_seen = t
        steps = cfg.steps_per_task
        entry = TaskLog(
            task_index=t, steps=steps, current_loss=cur_sum / steps, replay_loss=rep_sum / steps,
            generator_loss=gen_sum / steps if gen_opt is not None else None, replay_samples=replay_samples,
            touches=(self.counter.total - touches_before) if self.counter is not None else 0,
        )
        self.logs.append(entry)
        return entry

    def _replay(self, teacher, prev_gen, weight) -> dict[int, float]:
        cfg = self.config
        if self.mode == "generative":
            return replay_step_generative(self.classifier, prev_gen, self.strategy, cfg.replay_batch_size,
                                          self.rng, teacher=teacher, temperature=cfg.temperature,
                                          weight=weight, counter=self.counter)
        if self.mode == "buffer":
            return replay_step_buffer(self.classifier, self.buffer, self.strategy, cfg.replay_batch_size,
                                      self.rng, weight=weight, counter=self.counter)
        return replay_step_images(self.classifier, prev_gen, cfg.replay_batch_size, self.rng, teacher=teacher,
                                  temperature=cfg.temperature, weight=weight, counter=self.counter)

    def _generator_step(self, opt, x, y, prev_gen, w_cur) -> float:
        cfg = self.config
        gen = self.generator
        gen.train()
        opt.zero_grad(set_to_none=True)
        with torch.no_grad():
            taps = self._generator_targets(x)
        gen.mark_seen(y)
        *_, loss = generator_loss(gen, taps, labels=y, level_weights=cfg.level_weights,
                                  kl_weight=cfg.kl_weight, rng=self.rng)
        total = w_cur * loss
        if prev_gen is not None:
            with torch.no_grad():
                z = sample_latent(prev_gen, cfg.replay_batch_size, rng=self.rng)
                bottom = prev_gen.decode_to_level(z, EXTRACTOR_LEVEL)
                if self.mode == "generative":
                    replay_taps, _ = self.classifier.forward_from_extractor(bottom)
                else:
                    replay_taps = FeatureTaps([], bottom)
            *_, rloss = generator_loss(gen, replay_taps, level_weights=cfg.level_weights,
                                       kl_weight=cfg.kl_weight, rng=self.rng)
            total = total + (1.0 - w_cur) * rloss
        total.backward()
        opt.step()
        return total.item()

    def _generator_targets(self, x: torch.Tensor) -> FeatureTaps:
        if self.mode == "image":
            return _image_taps(x, self.generator)
        _, taps = self.classifier.forward_with_taps(x)
        return taps.detach()

    def _fill_buffer(self, images, labels, task_id):
        idx = self.buffer.candidates(labels, self.rng)
        self.classifier.eval()
        with torch.no_grad():
            _, taps = self.classifier.forward_with_taps(images[idx])
        self.buffer.add(taps, labels[idx], task_id, self.rng)

    def _freeze_after_first(self):
        if self.freeze_after_first == "extractor":
            self.classifier.freeze("extractor")
        elif self.freeze_after_first is not None:
            raise ConfigError(f"unknown freeze setting {self.freeze_after_first!r}")
        if self.freeze_generator_decoder and self.generator is not None:
            for p in self.generator.decoder.parameters():
                p.requires_grad_(False)


def _frozen_copy(module):
    clone = copy.deepcopy(module)
    clone.eval()
    for p in clone.parameters():
        p.requires_grad_(False)
    return clone


def _image_taps(x: torch.Tensor, gen: Generator) -> FeatureTaps:
    """Image batch as generator targets: flattened pixels only, no hidden-level targets."""
    return FeatureTaps([], x.reshape(len(x), -1))
