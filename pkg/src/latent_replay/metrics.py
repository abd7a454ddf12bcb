"""Accuracy aggregation and the Frechet distance over internal representations."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from latent_replay.arch import Classifier
from latent_replay.errors import ConfigError, InputError

COV_EPS = 1e-6


@dataclass
class RunResult:
    """Outcome of one seed of one experiment cell."""

    cell: str
    seed: int
    task_accuracies: list[float]
    average_accuracy: float
    strategy: list[float] | None = None
    strategy_label: str | None = None
    relative_cost: float | None = None
    mfid: float | None = None
    config_hash: str = ""
    wall_clock: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(not 0.0 <= a <= 1.0 for a in self.task_accuracies):
            raise ValueError("accuracies must lie in [0, 1]")

    def to_dict(self, include_timing: bool = True) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_clock")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunResult:
        return cls(**d)


def average_accuracy_sem(accuracies: Sequence[float]) -> tuple[float, float | None]:
    """Mean and standard error of the mean (sample std / sqrt(n)); SEM is ``None`` for one seed."""
    acc = np.asarray(list(accuracies), dtype=np.float64)
    if acc.size == 0:
        raise InputError("no accuracies to aggregate")
    mean = float(acc.mean())
    if acc.size < 2:
        return mean, None
    return mean, float(acc.std(ddof=1) / math.sqrt(acc.size))


def format_accuracy(mean: float, sem: float | None) -> str:
    """``"xx.x% ± y.y%"``, or just the mean when there is no SEM."""
    if sem is None:
        return f"{100 * mean:.1f}%"
    return f"{100 * mean:.1f}% ± {100 * sem:.1f}%"


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def fit(cls, features) -> GaussianStats:
        """Mean and covariance of a ``(samples, dim)`` array; covariance projected onto PSD matrices."""
        if isinstance(features, torch.Tensor):
            features = features.detach().cpu().numpy()
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 2:
            raise InputError(f"need a (samples >= 2, dim) array, got shape {x.shape}")
        mean = x.mean(axis=0)
        cov = np.atleast_2d(np.cov(x, rowvar=False))
        return cls(mean, _psd(cov))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def _psd(mat: np.ndarray) -> np.ndarray:
    mat = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * vals) @ vecs.T


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats, eps: float = COV_EPS) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})``.

    The trace of the product square root is taken from the eigenvalues of the
    symmetric matrix ``S_a^{1/2} S_b S_a^{1/2}``, which are those of ``S_a S_b``.
    ``eps`` is added to both diagonals first.
    """
    if a.dim != b.dim or a.cov.shape != b.cov.shape:
        raise InputError(f"dimension mismatch: {a.dim} vs {b.dim}")
    eye = np.eye(a.dim)
    sa = a.cov + eps * eye
    sb = b.cov + eps * eye
    root_a = _sqrtm_psd(sa)
    inner = root_a @ sb @ root_a
    eig = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    tr_sqrt = float(np.sqrt(np.clip(eig, 0.0, None)).sum())
    diff = a.mean - b.mean
    fd = float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * tr_sqrt)
    return max(fd, 0.0)


@torch.no_grad()
def representations(reference: Classifier, inputs: torch.Tensor, level: int | None = None,
                    batch_size: int = 1024) -> torch.Tensor:
    """Last-hidden-layer output of ``reference``.

    ``level=None`` treats ``inputs`` as images; ``level=-1`` as extractor
    features; ``0..H-1`` as features injected at that hidden level.
    """
    reference.eval()
    outs = []
    for start in range(0, len(inputs), batch_size):
        chunk = inputs[start:start + batch_size]
        if level is None:
            _, taps = reference.forward_with_taps(chunk)
            outs.append(taps.levels[-1])
        elif level == -1:
            taps, _ = reference.forward_from_extractor(chunk)
            outs.append(taps.levels[-1])
        elif level == reference.depth - 1:
            reference._check_level(chunk, level)
            outs.append(chunk)
        else:
            reference._check_level(chunk, level)
            deeper, _ = reference.tail(chunk, level)
            outs.append(deeper[-1])
    return torch.cat(outs)


def modified_fid(generated: torch.Tensor, level: int, real_images: torch.Tensor, reference: Classifier,
                 expected_spec=None) -> float:
    """Frechet distance between the reference model's representations of real images and of
    generated features injected at ``level`` (``-1`` = extractor level)."""
    if expected_spec is not None and reference.spec != expected_spec:
        raise ConfigError("reference model architecture does not match the evaluated architecture")
    real = GaussianStats.fit(representations(reference, real_images))
    fake = GaussianStats.fit(representations(reference, generated, level))
    return frechet_distance(real, fake)


@torch.no_grad()
def task_accuracies(classifier: Classifier, images: torch.Tensor, labels: torch.Tensor,
                    tasks: Sequence[Sequence[int]], batch_size: int = 1024) -> list[float]:
    """Test accuracy on each task's classes, predicting over all output units."""
    classifier.eval()
    preds = torch.cat([classifier(images[i:i + batch_size]).argmax(1) for i in range(0, len(images), batch_size)])
    accs = []
    for classes in tasks:
        mask = torch.isin(labels, torch.as_tensor(list(classes)))
        if mask.sum() == 0:
            raise InputError(f"no test samples for classes {list(classes)}")
        accs.append(float((preds[mask] == labels[mask]).double().mean()))
    return accs
