import json

import numpy as np
import pytest
import torch
from scipy import ndimage

import oracles
from osma import bench, trainer
from osma.data import ImageSet
from osma.errors import DatasetError, DivergenceError
from osma.models import load_checkpoint

SMALL = dict(input_size=16, width=0.125, embed_dim=16, batch_per_class=4, aug_steps_per_epoch=3, epochs=2)


def toy_set(rng, k=3, per_class=8, size=16):
    # class c carries a constant brightness offset so the task is learnable
    imgs = rng.random((k * per_class, 3, size, size)).astype(np.float32) * 0.5
    labels = np.repeat(np.arange(k), per_class)
    imgs += (labels * 0.2)[:, None, None, None].astype(np.float32)
    return ImageSet(imgs, labels, ["none"] * len(labels), [str(i) for i in range(k)], k)


@pytest.fixture
def toy(rng):
    return toy_set(rng)


# triplet mining ---------------------------------------------------------------------


def test_mine_triplets_small_case():
    got = trainer.mine_triplets([0, 0, 1, 1])
    assert got == [(0, 1, 2), (0, 1, 3), (1, 0, 2), (1, 0, 3), (2, 3, 0), (2, 3, 1), (3, 2, 0), (3, 2, 1)]


def test_mine_triplets_none_available():
    assert trainer.mine_triplets([0, 1, 2]) == []
    assert trainer.mine_triplets([4, 4, 4]) == []


@pytest.mark.parametrize("seed", range(20))
def test_mine_triplets_matches_enumeration(seed):
    labels = list(np.random.default_rng(seed).integers(0, 4, 9))
    assert trainer.mine_triplets(labels) == sorted(oracles.triplets(labels))


def test_balanced_batches(rng):
    labels = np.repeat([0, 1, 2], [10, 9, 12])
    batches = list(trainer.balanced_batches(labels, 4, rng))
    assert len(batches) == 2
    seen = np.concatenate(batches)
    assert len(set(seen.tolist())) == len(seen)
    for b in batches:
        assert np.bincount(labels[b]).tolist() == [4, 4, 4]


# configuration and data checks ------------------------------------------------------


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        trainer.TrainConfig(learning_rate=0.1)


def test_nodiv_resolves_to_zero_weights():
    cfg = trainer.TrainConfig(mode="pose-nodiv").resolved()
    assert cfg.loss.alpha == 0 and cfg.loss.beta == 0
    assert trainer.TrainConfig(mode="pose").resolved().loss.beta == 1e-2


def test_data_checks(toy):
    cfg = trainer.TrainConfig(**SMALL)
    with pytest.raises(DatasetError):
        trainer.train_pose(toy, cfg.model_copy(update={"batch_per_class": 9}))
    with pytest.raises(DatasetError):
        trainer.train_pose(toy, cfg.model_copy(update={"input_size": 32}))
    bad = ImageSet(toy.images, np.where(toy.labels == 2, -1, toy.labels), toy.unseen_types, toy.class_names, 3)
    with pytest.raises(DatasetError):
        trainer.train_pose(bad, cfg)


# training loop ------------------------------------------------------------------------


@pytest.mark.parametrize(
    "mode,expected",
    [("base", 0), ("pose", 2), ("pose-nodiv", 2)],
)
def test_pool_size_by_mode(toy, mode, expected):
    state = trainer.train_pose(toy, trainer.TrainConfig(mode=mode, **SMALL))
    assert len(state.pool) == expected
    assert state.pool.epochs == list(range(expected))
    aug_steps = [e for e in state.log if e["phase"] == "aug"]
    assert len(aug_steps) == 3 * expected


def test_joint_and_progressive_pool_sizes_agree(toy):
    cfg = dict(SMALL, epochs=3, aug_steps_per_epoch=2)
    joint = trainer.train_pose(toy, trainer.TrainConfig(mode="joint", **cfg))
    prog = trainer.train_pose(toy, trainer.TrainConfig(mode="pose", **cfg))
    assert len(joint.pool) == len(prog.pool) == 3


def test_diversity_only_after_first_model(toy):
    state = trainer.train_pose(toy, trainer.TrainConfig(mode="pose", **SMALL))
    first = [e for e in state.log if e["phase"] == "aug" and e["epoch"] == 0]
    later = [e for e in state.log if e["phase"] == "aug" and e["epoch"] == 1]
    assert all("div" not in e for e in first)
    assert all("div" in e and e["old_id"] == 0 for e in later)
    nodiv = trainer.train_pose(toy, trainer.TrainConfig(mode="pose-nodiv", **SMALL))
    assert all("div" not in e for e in nodiv.log if e["phase"] == "aug")


def test_task_frozen_during_aug_phase(toy):
    state = trainer.init_state(toy, trainer.TrainConfig(**SMALL))
    before = {k: v.clone() for k, v in state.task.state_dict().items()}
    trainer.train_aug_epoch(state, toy)
    state.epoch = 1
    trainer.train_aug_epoch(state, toy)
    after = state.task.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert all(p.requires_grad for p in state.task.parameters())
    assert all(not p.requires_grad for m in state.pool for p in m.parameters())


def test_training_is_deterministic(toy):
    cfg = trainer.TrainConfig(mode="pose", **SMALL)
    a = trainer.train_pose(toy, cfg)
    b = trainer.train_pose(toy, cfg)
    assert json.dumps(a.log) == json.dumps(b.log)
    x = torch.from_numpy(toy.images)
    assert torch.equal(a.task.logits(x), b.task.logits(x))


def test_task_learns_toy_problem(rng):
    data = toy_set(rng, per_class=16)
    cfg = trainer.TrainConfig(mode="base", lr_task=1e-3, **dict(SMALL, epochs=8))
    state = trainer.train_pose(data, cfg)
    accs = [e["train_accuracy"] for e in state.log if e["phase"] == "epoch"]
    assert accs[-1] >= 0.9


def test_run_dir_artifacts(toy, tmp_path):
    cfg = trainer.TrainConfig(mode="pose", **SMALL)
    state = trainer.train_pose(toy, cfg, run_dir=tmp_path)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(line) for line in lines] == state.log
    saved = trainer.TrainConfig.model_validate_json((tmp_path / "train_config.json").read_text())
    assert saved == cfg.resolved()
    task, pool, rec = load_checkpoint(tmp_path / "checkpoints")
    assert rec["epoch"] == 1 and len(pool) == 2
    x = torch.from_numpy(toy.images)
    assert torch.equal(task.logits(x), state.task.logits(x))
    _, pool0, _ = load_checkpoint(tmp_path / "checkpoints", epoch=0)
    assert len(pool0) == 1
    # a second run in the same place replaces the checkpoint index
    trainer.train_pose(toy, cfg, run_dir=tmp_path)
    _, pool, _ = load_checkpoint(tmp_path / "checkpoints")
    assert len(pool) == 2


def test_divergence_guard_reports_context(toy):
    bad = ImageSet(toy.images.copy(), toy.labels, toy.unseen_types, toy.class_names, 3)
    cfg = trainer.TrainConfig(mode="base", **dict(SMALL, batch_per_class=2))
    state = trainer.init_state(bad, cfg)
    bad.images[:] = np.nan
    with pytest.raises(DivergenceError) as info:
        trainer.train_task_epoch(state, bad)
    assert info.value.phase == "task"
    assert info.value.step == 2
    assert info.value.epoch == 0


def test_immunized_training_runs(toy):
    cfg = trainer.TrainConfig(mode="base", perturb_kind="noise", perturb_max=0.1, **SMALL)
    state = trainer.train_pose(toy, cfg)
    assert state.epochs_completed == 2


# spectral feasibility ---------------------------------------------------------------


def test_spectral_feasibility_reduces_distance():
    src = bench.synth_base_corpus("shapes", 24, 0, size=16)
    # target: the same images with boosted high frequencies
    tgt = np.clip(src + 0.3 * (src - ndimage.uniform_filter(src, (0, 0, 3, 3))), 0, 1).astype(np.float32)
    _, rep = trainer.spectral_feasibility(src, tgt, trainer.FeasibilityConfig(steps=100, batch_size=8))
    assert rep["final_distance"] < 0.5 * rep["initial_distance"]
    assert rep["final_pixel_mse"] < 0.01
    assert set(rep) >= {"initial_distance", "final_distance", "initial_distance_power_normalized",
                        "final_distance_power_normalized", "final_pixel_mse"}


def test_spectral_feasibility_shape_mismatch(rng):
    with pytest.raises(ValueError):
        trainer.spectral_feasibility(rng.random((2, 3, 8, 8)), rng.random((2, 3, 16, 16)))
