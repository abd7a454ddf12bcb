import math

import pytest
import torch
from hypothesis import given, strategies as st

from latent_replay.arch import build_classifier
from latent_replay.cost import GradientTouchCounter, blocks_from_spec, updates
from latent_replay.errors import ConfigError, InputError
from latent_replay.generator import build_generator
from latent_replay.replay import (
    FeatureBuffer,
    Learner,
    ReplayStrategy,
    TrainConfig,
    index_batches,
    replay_step_buffer,
    replay_step_generative,
    soft_target_loss,
    split_batch,
)


def test_split_examples():
    assert split_batch(256, [0.7, 0.3]) == [179, 77]
    assert split_batch(256, [0.5, 0.3, 0.2]) == [128, 77, 51]
    assert split_batch(3, [0.5, 0.5]) == [2, 1]
    assert split_batch(0, [0.5, 0.5]) == [0, 0]
    assert split_batch(10, [0.0, 1.0]) == [0, 10]
    with pytest.raises(InputError):
        split_batch(-1, [1.0])


@given(st.integers(0, 5000), st.lists(st.integers(0, 100), min_size=1, max_size=6).filter(lambda v: sum(v) > 0))
def test_split_properties(batch, weights):
    freqs = [w / sum(weights) for w in weights]
    if abs(sum(freqs) - 1) > 1e-9:
        return
    counts = split_batch(batch, freqs)
    assert sum(counts) == batch
    for c, f in zip(counts, freqs):
        assert abs(c - batch * f) < 1
        if f == 0:
            assert c == 0


@pytest.mark.parametrize("freqs", [(0.5, 0.6), (-0.1, 1.1), (float("nan"), 1.0), ()])
def test_strategy_validation(freqs):
    with pytest.raises(ConfigError):
        ReplayStrategy(freqs)


def test_strategy_parse_and_labels():
    ir = ReplayStrategy.parse("IR", 3)
    assert ir.frequencies == (1.0, 0.0, 0.0) and ir.is_internal_replay and ir.label() == "IR"
    s = ReplayStrategy.parse([0.2, 0.3, 0.5], 3)
    assert s.label() == "S=[0.2, 0.3, 0.5]" and s.shallowest_level == 0
    assert ReplayStrategy((0.0, 1.0)).shallowest_level == 1
    with pytest.raises(ConfigError):
        ReplayStrategy.parse([0.5, 0.5], 3)
    with pytest.raises(ConfigError):
        ReplayStrategy.parse("XR", 3)


def test_soft_target_loss_reference():
    g = torch.Generator().manual_seed(0)
    logits, target = torch.randn(5, 4, generator=g), torch.randn(5, 4, generator=g)
    p = torch.softmax(target / 2, 1)
    expected = -(p * torch.log(torch.softmax(logits / 2, 1))).sum(1).mean() * 4
    torch.testing.assert_close(soft_target_loss(logits, target, 2.0), expected)


def test_self_distillation_has_zero_gradient(tiny_spec):
    # the live classifier as its own teacher: softmax(z) - softmax(z) == 0
    clf = build_classifier(tiny_spec, 0)
    gen = build_generator(tiny_spec, 4, 1)
    replay_step_generative(clf, gen, ReplayStrategy((0.5, 0.5)), 32, torch.Generator().manual_seed(0))
    assert all(p.grad is None or p.grad.abs().max() < 1e-7 for p in clf.parameters())


@pytest.mark.parametrize("strategy", [(1.0, 0.0), (0.0, 1.0), (0.5, 0.5)])
def test_replay_touches_only_downstream(tiny_spec, strategy):
    clf = build_classifier(tiny_spec, 0)
    teacher = build_classifier(tiny_spec, 9)
    gen = build_generator(tiny_spec, 4, 1)
    s = ReplayStrategy(strategy)
    replay_step_generative(clf, gen, s, 40, torch.Generator().manual_seed(0), teacher=teacher)
    assert all(p.grad is None for p in clf.extractor.parameters())
    assert clf.hidden[0].weight.grad is None
    if s.shallowest_level == 1:
        assert clf.hidden[1].weight.grad is None
    else:
        assert clf.hidden[1].weight.grad.abs().sum() > 0
    assert clf.head.weight.grad.abs().sum() > 0


def test_replay_counts_match_analytic_cost(tiny_spec):
    clf = build_classifier(tiny_spec, 0)
    teacher = build_classifier(tiny_spec, 9)
    gen = build_generator(tiny_spec, 4, 1)
    s = ReplayStrategy((0.25, 0.75))
    with GradientTouchCounter(clf) as counter:
        replay_step_generative(clf, gen, s, 100, teacher=teacher, counter=counter)
    assert counter.total == pytest.approx(100 * updates(blocks_from_spec(tiny_spec), s.frequencies))


def test_buffer_bound_and_balance():
    buf = FeatureBuffer(capacity=10)
    rng = torch.Generator().manual_seed(0)
    for task, classes in enumerate([(0, 1), (2, 3), (4, 5)], start=1):
        labels = torch.tensor([c for c in classes for _ in range(20)])
        taps = [torch.randn(len(labels), 3), torch.randn(len(labels), 2)]
        buf.add(taps, labels, task, rng)
        counts = buf.class_counts()
        assert len(buf) <= 10
        assert max(counts.values()) - min(counts.values()) <= 1
    assert sorted(buf.class_counts()) == [0, 1, 2, 3, 4, 5]
    levels, labels, tasks = buf.entries()
    assert levels[0].shape == (10, 3) and set(tasks.tolist()) == {1, 2, 3}
    feats, lab = buf.sample(1, 4, rng)
    assert feats.shape == (4, 2) and lab.shape == (4,)
    with pytest.raises(InputError):
        buf.add([torch.randn(2, 3)], torch.tensor([0, 1]), 4)


def test_buffer_candidates_limits_per_class():
    buf = FeatureBuffer(capacity=6)
    labels = torch.tensor([0] * 10 + [1] * 10)
    idx = buf.candidates(labels, torch.Generator().manual_seed(0))
    assert (labels[idx] == 0).sum() == 3 and (labels[idx] == 1).sum() == 3


def test_empty_buffer_skips(tiny_spec, caplog):
    clf = build_classifier(tiny_spec, 0)
    with caplog.at_level("INFO"):
        assert replay_step_buffer(clf, FeatureBuffer(4), ReplayStrategy((1.0, 0.0)), 8) == {}
    assert "empty" in caplog.text


def test_index_batches_deterministic():
    a = list(index_batches(10, 4, 5, torch.Generator().manual_seed(1)))
    b = list(index_batches(10, 4, 5, torch.Generator().manual_seed(1)))
    assert len(a) == 5 and all(torch.equal(x, y) for x, y in zip(a, b))
    assert all(len(x) == 4 for x in a)


def test_mixing_weights():
    cfg = TrainConfig()
    assert cfg.mixing(1) == 1.0 and cfg.mixing(2) == 0.5 and math.isclose(cfg.mixing(5), 0.2)


def test_learner_validation(tiny_spec):
    clf = build_classifier(tiny_spec, 0)
    rng = torch.Generator()
    with pytest.raises(ConfigError):
        Learner(clf, "bogus", None, TrainConfig(), rng)
    with pytest.raises(ConfigError):
        Learner(clf, "generative", ReplayStrategy((1.0, 0.0)), TrainConfig(), rng)
    with pytest.raises(ConfigError):
        Learner(clf, "buffer", ReplayStrategy((1.0,)), TrainConfig(), rng)


def _learner(spec, mode, seed=0, steps=20):
    cfg = TrainConfig(steps_per_task=steps, batch_size=32, replay_batch_size=32, lr=1e-3, generator_lr=1e-3)
    clf = build_classifier(spec, seed)
    gen = build_generator(spec, 4, seed + 1) if mode == "generative" else None
    return Learner(clf, mode, ReplayStrategy((0.5, 0.5)), cfg, torch.Generator().manual_seed(seed),
                   generator=gen, counter=GradientTouchCounter(clf), freeze_after_first="extractor")


@pytest.mark.parametrize("mode", ["generative", "buffer"])
def test_learner_runs_and_is_deterministic(synth, tiny_spec, mode):
    runs = []
    for _ in range(2):
        learner = _learner(tiny_spec, mode)
        for classes in [(0, 1), (2, 3)]:
            x, y = synth.subset(classes)
            learner.train_task(x, y)
        runs.append(learner)
    a, b = runs
    for pa, pb in zip(a.classifier.parameters(), b.classifier.parameters()):
        assert torch.equal(pa, pb)
    assert a.logs[1].replay_samples == 20 * 32
    assert a.logs[0].replay_samples == 0
    assert all(a.classifier.frozen_mask[n] for n in a.classifier.frozen_mask if n.startswith("extractor"))
    if mode == "buffer":
        assert sorted(a.buffer.class_counts()) == [0, 1, 2, 3]


def test_learner_rejects_empty_task(tiny_spec):
    learner = _learner(tiny_spec, "buffer")
    with pytest.raises(ConfigError):
        learner.train_task(torch.empty(0, 1, 8, 8), torch.empty(0, dtype=torch.long))
