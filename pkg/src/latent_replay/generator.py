"""Feature-space VAE that mirrors the classifier's FC stack.

The encoder repeats the classifier's fully-connected shapes
(``D -> h_0 -> ... -> h_{H-1}``) and ends in mean/log-variance heads. The
decoder runs the shapes backwards, one stage per level::

    stage 0:   z       -> h_{H-1}     (level H-1)
    stage 1:   h_{H-1} -> h_{H-2}     (level H-2)
    ...
    stage H:   h_0     -> D           (extractor level)

so decoding to a deep level only executes a short prefix of the decoder.
Training reconstructs every level at once (sum of per-level MSE).
"""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from latent_replay.arch import ClassifierSpec, FeatureTaps, init_uniform_, widths_of
from latent_replay.errors import ConfigError, InputError

EXTRACTOR_LEVEL = -1


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor, prior_mean: torch.Tensor | None = None) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(prior_mean, I)) summed over latent dims, per sample."""
    diff = mu if prior_mean is None else mu - prior_mean
    return 0.5 * torch.sum(diff.pow(2) + logvar.exp() - 1.0 - logvar, dim=-1)


class Generator(nn.Module):
    """VAE over the feature widths ``widths = [w_bottom, w_0, ..., w_{H-1}]``.

    Levels ``0..H-1`` correspond to ``widths[1:]``; :data:`EXTRACTOR_LEVEL`
    is the bottom width (extractor features, or flattened images for the
    image-space baseline, where ``bottom_activation="none"``).
    """

    def __init__(self, widths: Sequence[int], latent_dim: int = 100, conditional: bool = False,
                 num_classes: int | None = None, bottom_activation: str = "relu"):
        super().__init__()
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ConfigError(f"generator widths must hold >= 2 positive entries, got {widths}")
        if latent_dim <= 0:
            raise ConfigError(f"latent_dim must be positive, got {latent_dim}")
        if conditional and not num_classes:
            raise ConfigError("a conditional generator needs num_classes")
        if bottom_activation not in ("relu", "none"):
            raise ConfigError(f"bottom_activation must be 'relu' or 'none', got {bottom_activation!r}")
        self.widths = widths
        self.latent_dim = latent_dim
        self.conditional = conditional
        self.num_classes = num_classes
        self.bottom_activation = bottom_activation

        self.encoder = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))
        self.to_mu = nn.Linear(widths[-1], latent_dim)
        self.to_logvar = nn.Linear(widths[-1], latent_dim)
        rev = [latent_dim, *reversed(widths)]
        self.decoder = nn.ModuleList(nn.Linear(a, b) for a, b in zip(rev[:-1], rev[1:]))
        if conditional:
            self.class_means = nn.Parameter(torch.zeros(num_classes, latent_dim))
        else:
            self.register_parameter("class_means", None)
        self.register_buffer("seen_classes", torch.zeros(num_classes or 1, dtype=torch.bool))
        # stages run by the most recent decode, and in total since construction
        self.last_stages = 0
        self.stages_executed = 0

    @property
    def depth(self) -> int:
        return len(self.widths) - 1

    def level_width(self, level: int) -> int:
        return self.widths[level + 1]

    def _stages_for(self, level: int) -> int:
        if not EXTRACTOR_LEVEL <= level < self.depth:
            raise InputError(f"level {level} outside {EXTRACTOR_LEVEL}..{self.depth - 1}")
        return self.depth - level

    # -- encoder --------------------------------------------------------

    def encode(self, features: torch.Tensor, noise: torch.Tensor | None = None,
               rng: torch.Generator | None = None):
        """Posterior statistics and a reparameterized sample ``z = mu + exp(logvar/2) * eps``."""
        if features.dim() != 2 or features.shape[1] != self.widths[0]:
            raise InputError(f"encoder expects width {self.widths[0]}, got {tuple(features.shape)}")
        h = features
        for layer in self.encoder:
            h = F.relu(layer(h))
        mu, logvar = self.to_mu(h), self.to_logvar(h)
        if noise is None:
            noise = torch.randn(mu.shape, generator=rng, dtype=mu.dtype, device=mu.device)
        z = mu + torch.exp(0.5 * logvar) * noise
        return mu, logvar, z

    # -- decoder --------------------------------------------------------

    def _stage(self, i: int, h: torch.Tensor) -> torch.Tensor:
        h = self.decoder[i](h)
        if i == self.depth and self.bottom_activation == "none":
            return h
        return F.relu(h)

    def decode_to_level(self, z: torch.Tensor, level: int) -> torch.Tensor:
        """Reconstruction at ``level``, running only the decoder stages needed for it."""
        n = self._stages_for(level)
        h = z
        for i in range(n):
            h = self._stage(i, h)
        self.last_stages = n
        self.stages_executed += n
        return h

    def decode_all(self, z: torch.Tensor) -> tuple[list[torch.Tensor], torch.Tensor]:
        """Reconstructions for levels ``0..H-1`` (in level order) and the bottom level."""
        outs = []
        h = z
        for i in range(self.depth + 1):
            h = self._stage(i, h)
            outs.append(h)
        self.last_stages = self.depth + 1
        self.stages_executed += self.depth + 1
        levels = outs[:-1][::-1]
        return levels, outs[-1]

    def prior_mean(self, labels: torch.Tensor | None) -> torch.Tensor | None:
        if not self.conditional or labels is None:
            return None
        return self.class_means[labels]

    def mark_seen(self, labels: torch.Tensor) -> None:
        if self.conditional:
            self.seen_classes[labels.unique()] = True


def build_generator(classifier_spec: ClassifierSpec, latent_dim: int = 100, seed: int = 0,
                    conditional: bool = False) -> Generator:
    """Generator mirroring the extractor width and hidden FC widths of ``classifier_spec``."""
    gen = Generator(widths_of(classifier_spec), latent_dim, conditional=conditional,
                    num_classes=classifier_spec.num_classes if conditional else None)
    init_uniform_(gen, torch.Generator().manual_seed(seed))
    return gen


def build_image_generator(image_shape: Sequence[int], hidden: Sequence[int] = (400, 400), latent_dim: int = 100,
                          seed: int = 0) -> Generator:
    """Plain image-space VAE on flattened (normalized) images for standard generative replay."""
    size = 1
    for s in image_shape:
        size *= int(s)
    gen = Generator([size, *hidden], latent_dim, bottom_activation="none")
    init_uniform_(gen, torch.Generator().manual_seed(seed))
    return gen


def reconstruction_loss(targets: Sequence[torch.Tensor], recons: Sequence[torch.Tensor],
                        weights: Sequence[float] | None = None) -> torch.Tensor:
    """Weighted sum of per-level mean squared errors (uniform weights by default)."""
    if weights is None:
        weights = [1.0] * len(targets)
    if not len(weights) == len(targets) == len(recons):
        raise InputError("targets, reconstructions and weights differ in length")
    total = targets[0].new_zeros(())
    for w, t, r in zip(weights, targets, recons):
        if t.shape != r.shape:
            raise InputError(f"reconstruction shape {tuple(r.shape)} != target shape {tuple(t.shape)}")
        total = total + w * F.mse_loss(r, t)
    return total


def generator_loss(generator: Generator, taps: FeatureTaps, labels: torch.Tensor | None = None,
                   level_weights: Sequence[float] | None = None, kl_weight: float | None = None,
                   noise: torch.Tensor | None = None, rng: torch.Generator | None = None):
    """Return ``(L_recon, L_latent, L_vae)`` for one batch of real-data taps.

    ``taps.extractor`` is encoded; the decoder reconstructs it and every
    ``taps.levels[n]`` (only the bottom level when ``taps.levels`` is empty). ``level_weights`` (length ``H+1``, extractor level
    last) reweights the per-level MSE terms. The KL term is averaged over the
    batch and scaled by ``kl_weight``, by default ``1 / D`` so that it lives on
    the same per-element scale as the MSE terms.
    """
    if taps.extractor is None:
        raise InputError("generator_loss needs extractor-level features in taps")
    if taps.levels and len(taps.levels) != generator.depth:
        raise InputError(f"expected {generator.depth} levels, got {len(taps.levels)}")
    mu, logvar, z = generator.encode(taps.extractor, noise=noise, rng=rng)
    levels, bottom = generator.decode_all(z)
    if taps.levels:
        l_recon = reconstruction_loss([*taps.levels, taps.extractor], [*levels, bottom], level_weights)
    else:
        # plain VAE: only the bottom (e.g. image) level has a target
        l_recon = F.mse_loss(bottom, taps.extractor)
    if kl_weight is None:
        kl_weight = 1.0 / generator.widths[0]
    l_latent = kl_weight * kl_divergence(mu, logvar, generator.prior_mean(labels)).mean()
    return l_recon, l_latent, l_recon + l_latent


def sample_latent(generator: Generator, count: int, class_hint=None, rng: torch.Generator | None = None):
    """Draw ``count`` latent vectors from the prior.

    Conditional generators draw from the mixture component of ``class_hint``
    (an int or a tensor of ``count`` class ids), or from a uniformly chosen
    seen class when no hint is given.
    """
    if class_hint is not None and not generator.conditional:
        raise ConfigError("class_hint requires a conditional generator")
    ref = generator.to_mu.weight
    z = torch.randn((count, generator.latent_dim), generator=rng, dtype=ref.dtype, device=ref.device)
    if generator.conditional:
        if class_hint is None:
            seen = generator.seen_classes.nonzero().flatten()
            if len(seen) == 0:
                seen = torch.arange(generator.num_classes)
            idx = torch.randint(len(seen), (count,), generator=rng)
            classes = seen[idx]
        elif isinstance(class_hint, int):
            classes = torch.full((count,), class_hint, dtype=torch.long)
        else:
            classes = torch.as_tensor(class_hint, dtype=torch.long)
        z = z + generator.class_means[classes]
    return z


def sample_features(generator: Generator, level: int, count: int, class_hint=None,
                    rng: torch.Generator | None = None) -> torch.Tensor:
    """Sample ``count`` generated features at ``level`` (no decoder work when ``count == 0``)."""
    if count < 0:
        raise InputError("count must be non-negative")
    width = generator.widths[level + 1] if level >= 0 else generator.widths[0]
    generator._stages_for(level)
    if class_hint is not None and not generator.conditional:
        raise ConfigError("class_hint requires a conditional generator")
    if count == 0:
        generator.last_stages = 0
        return generator.to_mu.weight.new_zeros((0, width))
    return generator.decode_to_level(sample_latent(generator, count, class_hint, rng), level)
