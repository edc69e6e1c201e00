import math

import numpy as np
import pytest
import torch

from tap.config import TrainConfig
from tap.datastore import EmbeddingStore, ShapesDataset, precompute_embeddings
from tap.network import load_checkpoint
from tap.teacher import SyntheticTeacher
from tap.trainer import (
    FinetuneRunner,
    FrozenParameterError,
    PretrainRunner,
    ResumeMismatchError,
    frozen_image_parameters,
    lr_at,
)

from conftest import tiny_model_config


# -- schedule ---------------------------------------------------------------------


def test_lr_closed_form():
    cfg = TrainConfig(base_lr=1e-3, steps=1000)
    assert lr_at(0, cfg) == pytest.approx(1e-3, abs=0)
    assert lr_at(500, cfg) == pytest.approx(5.05e-4, rel=1e-12)
    assert lr_at(1000, cfg) == pytest.approx(1e-5, rel=1e-12)
    with pytest.raises(ValueError):
        lr_at(1001, cfg)


def test_lr_monotone_decreasing():
    cfg = TrainConfig(steps=200)
    values = [lr_at(s, cfg) for s in range(201)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert cfg.final_lr == pytest.approx(0.01 * cfg.base_lr, abs=0)


def test_invalid_train_config():
    with pytest.raises(ValueError):
        TrainConfig(w_mask=-0.5).validate()
    with pytest.raises(ValueError):
        TrainConfig(final_lr_fraction=1.5).validate()


# -- pretrain ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def world(tmp_path_factory, tiny_dataset):
    tmp = tmp_path_factory.mktemp("world")
    teacher = SyntheticTeacher(d_text=16, seed=0, sigma=0.05)
    precompute_embeddings(tiny_dataset, teacher, tmp / "emb")
    return tiny_dataset, EmbeddingStore(tmp / "emb")


def make_runner(world, **overrides):
    dataset, store = world
    cfg = dict(steps=6, images_per_step=2, seed=0, teacher_seed=0, teacher_sigma=0.05)
    cfg.update(overrides)
    return PretrainRunner(tiny_model_config(), TrainConfig(**cfg), dataset, store)


def test_pretrain_step_finite_and_reproducible(world):
    a = make_runner(world)
    b = make_runner(world)
    bd_a = a.pretrain_step()
    bd_b = b.pretrain_step()
    assert bd_a == bd_b  # bit-identical floats under a fixed seed
    for v in bd_a.as_dict().values():
        assert math.isfinite(v)
    assert bd_a.mask_total == pytest.approx(20.0 * bd_a.focal + bd_a.dice, abs=2e-6)


def test_pretrain_missing_embedding_error(world):
    dataset, _ = world
    runner = make_runner(world)
    victim = dataset.records[0].regions[0].region_id
    del runner._targets[victim]
    with pytest.raises(KeyError, match=victim):
        for _ in range(6):
            runner.pretrain_step()


def test_resume_reproduces_uninterrupted_run(world, tmp_path):
    straight = make_runner(world)
    for _ in range(4):
        straight.pretrain_step()
    reference = straight.state_blobs()

    first_half = make_runner(world)
    first_half.pretrain_step()
    first_half.pretrain_step()
    ckpt_path = tmp_path / "mid.tapckpt"
    first_half.save(ckpt_path)

    resumed = make_runner(world)
    resumed.resume(ckpt_path)
    assert resumed.step == 2
    resumed.pretrain_step()
    resumed.pretrain_step()
    restored = resumed.state_blobs()

    assert reference.keys() == restored.keys()
    for name, arr in reference.items():
        assert np.array_equal(arr, restored[name]), f"blob {name} diverged after resume"


def test_resume_hash_mismatch(world, tmp_path):
    runner = make_runner(world)
    runner.pretrain_step()
    path = tmp_path / "ck.tapckpt"
    runner.save(path)
    other = make_runner(world, seed=1)
    with pytest.raises(ResumeMismatchError):
        other.resume(path)


def test_checkpoint_carries_concepts(world, tmp_path):
    runner = make_runner(world)
    runner.save(tmp_path / "c.tapckpt")
    ckpt = load_checkpoint(tmp_path / "c.tapckpt")
    assert ckpt.extra["concepts"] == list(world[0].concepts)


# -- fine-tune ----------------------------------------------------------------------


def overfit_dataset(dataset: ShapesDataset, n_regions: int = 10) -> ShapesDataset:
    records = []
    total = 0
    for rec in dataset.records:
        keep = rec.regions[: max(0, n_regions - total)]
        if keep:
            records.append(type(rec)(rec.image_id, rec.image, list(keep)))
            total += len(keep)
        if total >= n_regions:
            break
    return ShapesDataset(
        image_size=dataset.image_size, concepts=dataset.concepts,
        seed=dataset.seed, records=records,
    )


@pytest.fixture(scope="module")
def pretrain_ckpt(world, tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "pre.tapckpt"
    make_runner(world).save(path)
    return path


def test_finetune_freezes_image_path(world, pretrain_ckpt):
    dataset, _ = world
    cfg = TrainConfig(steps=5, batch_captions=8, seed=0)
    runner = FinetuneRunner(tiny_model_config(), cfg, dataset, pretrain_ckpt)
    before = {n: p.detach().clone() for n, p in frozen_image_parameters(runner.model)}
    for _ in range(5):
        runner.finetune_step()
    for name, p in frozen_image_parameters(runner.model):
        assert torch.equal(before[name], p.detach()), f"{name} changed during fine-tune"


def test_finetune_detects_unfrozen_parameters(world, pretrain_ckpt):
    dataset, _ = world
    runner = FinetuneRunner(tiny_model_config(), TrainConfig(steps=1), dataset, pretrain_ckpt)
    next(iter(runner.model.image_encoder.parameters())).requires_grad_(True)
    with pytest.raises(FrozenParameterError):
        runner.finetune_step()


def test_finetune_initial_loss_near_log_vocab(world, pretrain_ckpt):
    dataset, _ = world
    runner = FinetuneRunner(tiny_model_config(), TrainConfig(steps=1), dataset, pretrain_ckpt)
    loss = float(runner.caption_loss(list(range(8))).detach())
    expected = math.log(tiny_model_config().txt_vocab_size)
    assert abs(loss - expected) <= 0.1 * expected


def test_finetune_strictly_decreases_on_overfit_set(world, pretrain_ckpt):
    dataset, _ = world
    small = overfit_dataset(dataset, n_regions=10)
    cfg = TrainConfig(steps=50, batch_captions=64, seed=0)  # full batch every step
    runner = FinetuneRunner(tiny_model_config(), cfg, small, pretrain_ckpt)
    history = [runner.finetune_step().caption_ce for _ in range(50)]
    assert all(a > b for a, b in zip(history, history[1:])), history
