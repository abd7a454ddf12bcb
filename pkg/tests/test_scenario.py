import gzip
import pickle
import struct

import numpy as np
import pytest
import torch

from latent_replay.arch import get_preset
from latent_replay.datasets import (
    load_cifar10,
    load_cifar100,
    load_dataset,
    load_fashion_mnist,
    read_idx,
    synthetic,
)
from latent_replay.errors import ConfigError, MissingDataError
from latent_replay.replay import ReplayStrategy, TrainConfig
from latent_replay.scenario import (
    FIG4_SETUPS,
    PretrainConfig,
    RunSettings,
    augment,
    build_stream,
    fig4_settings,
    pretrain_extractor,
    run_continual,
    train_reference,
)


def test_stream_presets():
    c10 = build_stream("CIFAR10")
    assert c10.tasks == ((0, 1, 2, 3, 4), (5, 6, 7, 8, 9))
    c100 = build_stream("CIFAR100")
    assert len(c100) == 10 and all(len(t) == 10 for t in c100.tasks)
    fm = build_stream("FMNIST")
    assert fm.tasks[0] == (0, 1) and len(fm) == 5
    assert fm.seen_classes(2) == [0, 1, 2, 3]
    with pytest.raises(ConfigError):
        build_stream("MNIST")


def test_stream_permutation_is_seeded():
    a, b = build_stream("CIFAR100", split_seed=3), build_stream("CIFAR100", split_seed=3)
    assert a.tasks == b.tasks != build_stream("CIFAR100").tasks
    assert sorted(c for t in a.tasks for c in t) == list(range(100))


# -- readers against files written in the original distribution formats --------------

def _img(n, seed):
    return np.random.default_rng(seed).integers(0, 256, size=(n, 3072), dtype=np.uint8)


def test_cifar10_pickle(tmp_path):
    d = tmp_path / "cifar-10-batches-py"
    d.mkdir()
    for i in range(1, 6):
        with open(d / f"data_batch_{i}", "wb") as f:
            pickle.dump({b"data": _img(4, i), b"labels": [i % 10, 1, 2, 3]}, f)
    with open(d / "test_batch", "wb") as f:
        pickle.dump({b"data": _img(2, 9), b"labels": [7, 8]}, f)
    ds = load_cifar10(tmp_path)
    assert ds.train_x.shape == (20, 3, 32, 32) and ds.train_y[0] == 1
    assert ds.test_y.tolist() == [7, 8] and ds.num_classes == 10
    # channel-first layout: the first 1024 bytes are the red plane
    np.testing.assert_array_equal(ds.train_x[0, 0].ravel(), _img(4, 1)[0, :1024])


def test_cifar10_binary(tmp_path):
    d = tmp_path / "cifar-10-batches-bin"
    d.mkdir()
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        rec = np.concatenate([np.array([[3], [9]], dtype=np.uint8), _img(2, 0)], axis=1)
        rec.tofile(d / name)
    ds = load_cifar10(tmp_path)
    assert ds.train_y.tolist()[:2] == [3, 9] and ds.train_x.shape == (10, 3, 32, 32)


def test_cifar100_formats(tmp_path):
    py = tmp_path / "py" / "cifar-100-python"
    py.mkdir(parents=True)
    for name, labels in [("train", [5, 99]), ("test", [42, 0])]:
        with open(py / name, "wb") as f:
            pickle.dump({b"data": _img(2, 1), b"fine_labels": labels, b"coarse_labels": [0, 0]}, f)
    assert load_cifar100(tmp_path / "py").train_y.tolist() == [5, 99]

    bin_ = tmp_path / "bin" / "cifar-100-binary"
    bin_.mkdir(parents=True)
    for name in ("train.bin", "test.bin"):
        rec = np.concatenate([np.array([[1, 77], [2, 13]], dtype=np.uint8), _img(2, 2)], axis=1)
        rec.tofile(bin_ / name)
    ds = load_cifar100(tmp_path / "bin")
    assert ds.train_y.tolist() == [77, 13] and ds.num_classes == 100


def _write_idx(path, arr, compress):
    header = struct.pack(">HBB", 0, 8, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    data = header + arr.astype(np.uint8).tobytes()
    if compress:
        with gzip.open(str(path) + ".gz", "wb") as f:
            f.write(data)
    else:
        path.write_bytes(data)


@pytest.mark.parametrize("compress", [True, False])
def test_fashion_mnist_idx(tmp_path, compress):
    d = tmp_path / "fashion-mnist"
    d.mkdir()
    imgs = np.random.default_rng(0).integers(0, 256, size=(5, 28, 28))
    _write_idx(d / "train-images-idx3-ubyte", imgs, compress)
    _write_idx(d / "train-labels-idx1-ubyte", np.arange(5), compress)
    _write_idx(d / "t10k-images-idx3-ubyte", imgs[:2], compress)
    _write_idx(d / "t10k-labels-idx1-ubyte", np.array([9, 8]), compress)
    ds = load_fashion_mnist(tmp_path)
    assert ds.train_x.shape == (5, 1, 28, 28) and ds.test_y.tolist() == [9, 8]
    np.testing.assert_array_equal(ds.train_x[:, 0], imgs)


def test_read_idx_rejects_other_types(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(struct.pack(">HBB", 0, 0x0D, 1) + struct.pack(">I", 1) + b"\0\0\0\0")
    with pytest.raises(ValueError):
        read_idx(p)


@pytest.mark.parametrize("name", ["CIFAR10", "CIFAR100", "FMNIST"])
def test_missing_data_names_the_download(tmp_path, name):
    with pytest.raises(MissingDataError, match="download"):
        load_dataset(name, tmp_path)


def test_unknown_dataset():
    with pytest.raises(ConfigError):
        load_dataset("SVHN")


def test_normalization_uses_train_stats(synth):
    x, y = synth.subset(range(6))
    assert abs(float(x.mean())) < 1e-3 and abs(float(x.std()) - 1) < 1e-2
    assert x.dtype == torch.float32 and y.dtype == torch.int64
    assert synthetic().train_x.tobytes() == synth.train_x.tobytes()


# -- augmentation and pretraining -------------------------------------------

def test_augment_crops_and_flips():
    x = torch.arange(2 * 1 * 4 * 4, dtype=torch.float32).reshape(2, 1, 4, 4) + 1
    out = augment(x, torch.Generator().manual_seed(0), pad=2)
    assert out.shape == x.shape
    # every output is a shifted (possibly flipped) window of the zero-padded input
    for i in range(2):
        nonzero = out[i][out[i] != 0]
        assert set(nonzero.tolist()) <= set(x[i].flatten().tolist())
    same = augment(x, torch.Generator().manual_seed(0), pad=2)
    assert torch.equal(out, same)
    assert torch.equal(augment(x, torch.Generator(), pad=0).abs().sum(), x.sum())


def test_pretrain_config_validation():
    with pytest.raises(ConfigError):
        PretrainConfig(num_classes_used=1).validate()
    with pytest.raises(ConfigError):
        PretrainConfig(num_classes_used=20).validate(source_classes=10)
    with pytest.raises(ConfigError):
        PretrainConfig(epochs=0).validate()


def test_pretrain_is_deterministic(synth, tiny_spec):
    cfg = PretrainConfig(source="SYNTH", num_classes_used=4, epochs=1, batch_size=64)
    a = pretrain_extractor(cfg, tiny_spec, synth, seed=1, max_steps=5)
    b = pretrain_extractor(cfg, tiny_spec, synth, seed=1, max_steps=5)
    assert set(a) == {"0.weight", "0.bias", "2.weight", "2.bias"}
    assert all(torch.equal(a[k], b[k]) for k in a)
    with pytest.raises(ConfigError):
        pretrain_extractor(PretrainConfig(source="CIFAR10", num_classes_used=4), tiny_spec, synth)


def test_reference_keeps_pretrained_extractor(synth, tiny_spec):
    cfg = PretrainConfig(source="SYNTH", num_classes_used=4, epochs=1, batch_size=64)
    state = pretrain_extractor(cfg, tiny_spec, synth, seed=1, max_steps=3)
    ref = train_reference(synth, tiny_spec, steps=5, batch_size=32, extractor_state=state)
    assert all(torch.equal(ref.extractor.state_dict()[k], state[k]) for k in state)


# -- continual runs ----------------------------------------------------------

FAST = TrainConfig(steps_per_task=15, batch_size=32, replay_batch_size=32, lr=1e-3, generator_lr=1e-3,
                   latent_dim=4)


def test_run_continual_result(synth, tiny_spec):
    stream = build_stream("SYNTH")
    settings = RunSettings(mode="generative", strategy=ReplayStrategy((0.5, 0.5)), train=FAST, count_updates=True)
    result, learner = run_continual(synth, stream, tiny_spec, settings, seed=0, cell="x")
    assert len(result.task_accuracies) == 3
    assert result.average_accuracy == pytest.approx(np.mean(result.task_accuracies))
    assert result.strategy_label == "S=[0.5, 0.5]"
    assert result.extra["measured_updates_per_sample"] == pytest.approx(0.5 * 256 + 96)
    assert len(learner.logs) == 3


def test_run_continual_checks(synth, tiny_spec):
    stream = build_stream("SYNTH")
    with pytest.raises(ConfigError):
        run_continual(synth, stream, get_preset("FMNIST3"), RunSettings(mode="none", train=FAST), 0)
    with pytest.raises(ConfigError):
        run_continual(synth, stream, get_preset("TINY", 4), RunSettings(mode="none", train=FAST), 0)


@pytest.mark.parametrize("setup", FIG4_SETUPS)
def test_fig4_settings(setup):
    s = fig4_settings(setup, FAST, 3)
    assert s.mode == ("image" if setup.startswith("GR") else "generative")
    assert (s.freeze_after_first == "extractor") == ("freeze" in setup)
    assert s.freeze_generator_decoder == (setup == "GR_freeze_enc_dec")
    if s.strategy is not None:
        assert s.strategy.is_internal_replay


def test_fig4_unknown_setup():
    with pytest.raises(ConfigError):
        fig4_settings("XR", FAST, 3)


@pytest.mark.parametrize("setup", ["GR", "GR_freeze_enc_dec"])
def test_image_replay_runs(synth, tiny_spec, setup):
    settings = fig4_settings(setup, FAST, tiny_spec.depth)
    settings.image_hidden = (32,)
    result, learner = run_continual(synth, build_stream("SYNTH"), tiny_spec, settings, seed=0)
    assert len(result.task_accuracies) == 3
    if setup == "GR_freeze_enc_dec":
        assert not any(p.requires_grad for p in learner.generator.decoder.parameters())
