"""Class-incremental task streams, extractor pretraining and continual runs.

A run trains one classifier through every task of a stream with a given
replay mode, then reports per-task test accuracy after the final task.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from latent_replay.arch import Classifier, ClassifierSpec, build_classifier
from latent_replay.cost import GradientTouchCounter, blocks_from_spec, relative_cost
from latent_replay.datasets import Dataset
from latent_replay.errors import ConfigError
from latent_replay.generator import build_generator, build_image_generator, sample_features
from latent_replay.metrics import RunResult, modified_fid, task_accuracies
from latent_replay.replay import Learner, ReplayStrategy, TrainConfig, index_batches

log = logging.getLogger(__name__)

# dataset -> (number of tasks, classes per task)
STREAM_PRESETS = {
    "CIFAR10": (2, 5),
    "CIFAR100": (10, 10),
    "FMNIST": (5, 2),
    "SYNTH": (3, 2),
}

FIG4_SETUPS = ("GR", "IR_freeze_enc", "GR_freeze_enc_dec", "IR_naive")


@dataclass(frozen=True)
class TaskStream:
    dataset: str
    tasks: tuple[tuple[int, ...], ...]
    split_seed: int | None = None

    def __len__(self):
        return len(self.tasks)

    def seen_classes(self, t: int) -> list[int]:
        """Union of the classes of tasks ``1..t``."""
        return sorted(c for task in self.tasks[:t] for c in task)


def build_stream(dataset: str, preset: tuple[int, int] | None = None, split_seed: int | None = None) -> TaskStream:
    """Split the label space into consecutive tasks.

    Classes go in ascending order unless ``split_seed`` is given, in which
    case they are permuted by it first.
    """
    if preset is None:
        try:
            preset = STREAM_PRESETS[dataset]
        except KeyError:
            raise ConfigError(f"no task split preset for dataset {dataset!r}") from None
    n_tasks, per_task = preset
    order = np.arange(n_tasks * per_task)
    if split_seed is not None:
        order = np.random.default_rng(split_seed).permutation(order)
    tasks = tuple(tuple(int(c) for c in order[i * per_task:(i + 1) * per_task]) for i in range(n_tasks))
    return TaskStream(dataset, tasks, split_seed)


# -- pretraining ---------------------------------------------------------

@dataclass
class PretrainConfig:
    source: str = "CIFAR10"
    num_classes_used: int = 10
    augmentation: bool = True
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-3

    def validate(self, source_classes: int | None = None) -> None:
        if self.num_classes_used < 2:
            raise ConfigError("pretraining a classifier needs at least 2 classes")
        if source_classes is not None and self.num_classes_used > source_classes:
            raise ConfigError(f"{self.source} has only {source_classes} classes")
        if self.epochs <= 0:
            raise ConfigError("pretraining epochs must be positive")


def augment(x: torch.Tensor, rng: torch.Generator, pad: int = 4) -> torch.Tensor:
    """Random crop after zero padding by ``pad`` pixels, and random horizontal flip."""
    n, _, h, w = x.shape
    padded = F.pad(x, (pad, pad, pad, pad))
    dx = torch.randint(0, 2 * pad + 1, (n,), generator=rng).tolist()
    dy = torch.randint(0, 2 * pad + 1, (n,), generator=rng).tolist()
    out = torch.stack([padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])
    flip = torch.rand(n, generator=rng) < 0.5
    out[flip] = out[flip].flip(3)
    return out


def pretrain_extractor(config: PretrainConfig, spec: ClassifierSpec, dataset: Dataset, seed: int = 0,
                       max_steps: int | None = None) -> dict[str, torch.Tensor]:
    """Train a full classifier on the first ``num_classes_used`` classes of ``dataset``
    and export its convolutional weights only."""
    config.validate(dataset.num_classes)
    if dataset.name != config.source:
        raise ConfigError(f"pretraining source is {config.source}, got {dataset.name}")
    torch.manual_seed(seed)
    rng = torch.Generator().manual_seed(seed)
    model = build_classifier(spec, seed)
    x, y = dataset.subset(range(config.num_classes_used), "train")
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    model.train()
    steps = 0
    for _ in range(config.epochs):
        perm = torch.randperm(len(y), generator=rng)
        for start in range(0, len(y), config.batch_size):
            idx = perm[start:start + config.batch_size]
            xb = augment(x[idx], rng) if config.augmentation else x[idx]
            opt.zero_grad(set_to_none=True)
            F.cross_entropy(model(xb), y[idx]).backward()
            opt.step()
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        if max_steps is not None and steps >= max_steps:
            break
    return {k: v.detach().clone() for k, v in model.extractor.state_dict().items()}


def train_reference(dataset: Dataset, spec: ClassifierSpec, seed: int = 0, steps: int = 5000,
                    batch_size: int = 256, lr: float = 1e-4,
                    extractor_state: dict | None = None) -> Classifier:
    """Classifier of the evaluated architecture trained on all training classes jointly.

    With ``extractor_state`` the pretrained extractor is loaded and kept frozen,
    so extractor-level features mean the same thing as in the continual run.
    """
    torch.manual_seed(seed)
    rng = torch.Generator().manual_seed(seed)
    model = build_classifier(spec, seed)
    if extractor_state is not None:
        model.extractor.load_state_dict(extractor_state)
        model.freeze("extractor")
    x, y = dataset.subset(range(dataset.num_classes), "train")
    opt = torch.optim.Adam(model.trainable_parameters(), lr=lr)
    model.train()
    for idx in index_batches(len(y), batch_size, steps, rng):
        opt.zero_grad(set_to_none=True)
        F.cross_entropy(model(x[idx]), y[idx]).backward()
        opt.step()
    model.eval()
    return model


# -- continual runs ------------------------------------------------------

@dataclass
class MfidSettings:
    samples: int = 10000
    # injection level of the generated features; -1 means extractor level
    level: int = -1


@dataclass
class RunSettings:
    """Everything that defines one continual run apart from data and seed."""

    mode: str
    strategy: ReplayStrategy | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    extractor_state: dict | None = None
    freeze_extractor: bool = False
    freeze_after_first: str | None = None
    freeze_generator_decoder: bool = False
    count_updates: bool = False
    mfid: MfidSettings | None = None
    image_hidden: tuple[int, ...] = (400, 400)


def _build_learner(spec: ClassifierSpec, settings: RunSettings, seed: int, image_shape) -> Learner:
    classifier = build_classifier(spec, seed)
    if settings.extractor_state is not None:
        classifier.extractor.load_state_dict(settings.extractor_state)
    if settings.freeze_extractor:
        classifier.freeze("extractor")
    cfg = settings.train
    generator = None
    if settings.mode == "generative":
        generator = build_generator(spec, cfg.latent_dim, seed + 1, conditional=cfg.conditional)
    elif settings.mode == "image":
        generator = build_image_generator(image_shape, settings.image_hidden, cfg.latent_dim, seed + 1)
    counter = GradientTouchCounter(classifier) if settings.count_updates else None
    return Learner(
        classifier=classifier, mode=settings.mode, strategy=settings.strategy, config=cfg,
        rng=torch.Generator().manual_seed(seed), generator=generator, counter=counter,
        freeze_after_first=settings.freeze_after_first,
        freeze_generator_decoder=settings.freeze_generator_decoder,
    )


def run_continual(dataset: Dataset, stream: TaskStream, spec: ClassifierSpec, settings: RunSettings, seed: int,
                  cell: str = "", reference: Classifier | None = None, config_hash: str = ""):
    """Train through every task and evaluate after the last one.

    Returns ``(RunResult, Learner)``.
    """
    if dataset.image_shape != spec.extractor.input_shape:
        raise ConfigError(f"{dataset.name} images {dataset.image_shape} do not fit the architecture "
                          f"input {spec.extractor.input_shape}")
    if max(max(t) for t in stream.tasks) >= spec.num_classes:
        raise ConfigError("the output layer is smaller than the label space of the stream")
    start = time.perf_counter()
    torch.manual_seed(seed)
    learner = _build_learner(spec, settings, seed, dataset.image_shape)
    for t, classes in enumerate(stream.tasks, 1):
        x, y = dataset.subset(classes, "train")
        entry = learner.train_task(x, y)
        log.info("task %d/%d: current loss %.4f, replay loss %.4f", t, len(stream), entry.current_loss,
                 entry.replay_loss)

    test_x, test_y = dataset.subset(stream.seen_classes(len(stream)), "test")
    accs = task_accuracies(learner.classifier, test_x, test_y, stream.tasks)
    extra = {"task_logs": [vars(e) for e in learner.logs]}
    strategy = settings.strategy
    r_value = None
    if strategy is not None:
        r_value = relative_cost(blocks_from_spec(spec), strategy)
    if learner.counter is not None:
        samples = sum(e.replay_samples for e in learner.logs)
        extra["measured_updates_per_sample"] = learner.counter.total / samples if samples else None
    mfid = None
    if settings.mfid is not None and settings.mode == "generative" and reference is not None:
        gen_rng = torch.Generator().manual_seed(seed + 2)
        with torch.no_grad():
            feats = sample_features(learner.generator, settings.mfid.level, settings.mfid.samples, rng=gen_rng)
        mfid = modified_fid(feats, settings.mfid.level, test_x, reference)
    result = RunResult(
        cell=cell, seed=seed, task_accuracies=accs, average_accuracy=float(np.mean(accs)),
        strategy=list(strategy.frequencies) if strategy is not None else None,
        strategy_label=strategy.label() if strategy is not None else settings.mode.upper(),
        relative_cost=r_value, mfid=mfid, config_hash=config_hash,
        wall_clock=time.perf_counter() - start, extra=extra,
    )
    return result, learner


def fig4_settings(setup: str, train: TrainConfig, depth: int) -> RunSettings:
    """The four FashionMNIST setups: generative replay and Internal Replay with and without freezing."""
    ir = ReplayStrategy.internal_replay(depth)
    if setup == "GR":
        return RunSettings(mode="image", train=train)
    if setup == "IR_freeze_enc":
        return RunSettings(mode="generative", strategy=ir, train=train, freeze_after_first="extractor")
    if setup == "GR_freeze_enc_dec":
        return RunSettings(mode="image", train=train, freeze_after_first="extractor",
                           freeze_generator_decoder=True)
    if setup == "IR_naive":
        return RunSettings(mode="generative", strategy=ir, train=train)
    raise ConfigError(f"unknown setup {setup!r}; choose from {FIG4_SETUPS}")


def run_fig4_setup(setup: str, dataset: Dataset, stream: TaskStream, spec: ClassifierSpec, train: TrainConfig,
                   seed: int, config_hash: str = ""):
    settings = fig4_settings(setup, train, spec.depth)
    result, _ = run_continual(dataset, stream, spec, settings, seed, cell=setup, config_hash=config_hash)
    result.strategy_label = setup
    return result
