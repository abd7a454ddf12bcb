"""Analytic replay update cost and an empirical counter to check it.

Replay at level ``n`` updates every FC layer downstream of hidden layer
``n``. With ``P_n`` the weight count of the layer *consuming* level ``n``
(hidden layer ``n+1``, or the output layer for the last level), a strategy
``S = [f_0, ..., f_{H-1}]`` updates, per replayed sample on average::

    U(S) = sum_n (f_0 + ... + f_n) * P_n

and its cost relative to Internal Replay is ``R(S) = U(S) / U([1, 0, ..., 0])``.
The extractor -> hidden-0 block never receives replay gradients and is not
part of ``P``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from latent_replay.arch import ClassifierSpec, parameter_blocks
from latent_replay.errors import ConfigError, InstrumentationError


@dataclass(frozen=True)
class CostModel:
    blocks: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        if not self.blocks or any(b <= 0 for b in self.blocks):
            raise ConfigError(f"cost blocks must be non-empty and positive, got {self.blocks}")

    def __len__(self):
        return len(self.blocks)

    @property
    def max_updates(self) -> int:
        """U of Internal Replay, i.e. the sum of all blocks."""
        return sum(self.blocks)


def blocks_from_spec(spec: ClassifierSpec, include_biases: bool = False) -> CostModel:
    # drop the extractor -> hidden-0 layer
    return CostModel(tuple(parameter_blocks(spec, include_biases)[1:]))


def _frequencies(strategy) -> np.ndarray:
    freqs = getattr(strategy, "frequencies", strategy)
    return np.asarray(freqs, dtype=np.float64)


def updates(cost_model: CostModel, strategy) -> float:
    freqs = _frequencies(strategy)
    if len(freqs) != len(cost_model):
        raise ConfigError(f"strategy has {len(freqs)} levels, cost model has {len(cost_model)}")
    return float(np.dot(np.cumsum(freqs), np.asarray(cost_model.blocks, dtype=np.float64)))


def relative_cost(cost_model: CostModel, strategy) -> float:
    return updates(cost_model, strategy) / cost_model.max_updates


class GradientTouchCounter:
    """Counts (sample, weight) pairs that receive a gradient during backward.

    While active, every Linear/Conv2d forward under autograd registers a hook
    on its output; when a gradient reaches that output, ``batch * weight.numel()``
    is added to the tally. Frozen layers and layers above an injection point
    never see a gradient and therefore are never counted.

    >>> with GradientTouchCounter(model) as counter:
    ...     loss.backward()
    """

    def __init__(self, model: nn.Module, kinds=(nn.Linear, nn.Conv2d)):
        self.model = model
        self.kinds = kinds
        self.touches: dict[str, int] = {}
        self._handles = []
        self._depth = 0

    def _hook(self, name: str):
        def forward_hook(module, inputs, output):
            if not (torch.is_grad_enabled() and module.weight.requires_grad and output.requires_grad):
                return
            n = int(output.shape[0]) * module.weight.numel()

            def on_grad(grad):
                self.touches[name] = self.touches.get(name, 0) + n

            output.register_hook(on_grad)
        return forward_hook

    def __enter__(self):
        # re-entrant: nested use keeps a single set of hooks
        if self._depth == 0:
            for name, m in self.model.named_modules():
                if isinstance(m, self.kinds):
                    self._handles.append(m.register_forward_hook(self._hook(name)))
        self._depth += 1
        return self

    def __exit__(self, *exc):
        self._depth -= 1
        if self._depth == 0:
            for h in self._handles:
                h.remove()
            self._handles.clear()
        return False

    @property
    def total(self) -> int:
        return sum(self.touches.values())

    def reset(self) -> None:
        self.touches.clear()


def measured_updates(counter: GradientTouchCounter | None, replay_samples: int, steps: int = 1) -> float:
    """Weight touches per replayed sample, averaged over ``steps`` replay batches.

    Comparable to :func:`updates` for the same strategy.
    """
    if counter is None:
        raise InstrumentationError("no gradient-touch counter was attached to this run")
    if replay_samples <= 0 or steps <= 0:
        raise InstrumentationError("no replay samples were counted")
    return counter.total / (replay_samples * steps)


def cost_table(spec: ClassifierSpec, strategies: Sequence, include_biases: bool = False) -> list[dict]:
    model = blocks_from_spec(spec, include_biases)
    rows = []
    for s in strategies:
        freqs = [float(f) for f in _frequencies(s)]
        rows.append({"strategy": freqs, "U": updates(model, freqs), "R": relative_cost(model, freqs)})
    return rows
