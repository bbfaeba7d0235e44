"""Training loop for a task model with a growing pool of augmentation models.

Each epoch first trains one new augmentation model (task model frozen) and
appends it to the pool, then trains the task model for one class-balanced
pass over the known images together with their augmented copies from the
new model and from a randomly chosen old one.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from . import bench
from .data import ImageSet
from .errors import DatasetError, DivergenceError, InvalidInputError
from .losses import LossConfig, aug_loss, diversity_loss, reconstruction_loss, spectral_loss, task_loss_terms
from .models import (
    ModelPool,
    TaskModel,
    init_augmentation_model,
    save_augmentation_model,
    save_task_model,
)
from .spectrum import mean_profile, profile_distance

log = logging.getLogger(__name__)

MODES = ("pose", "base", "pose-nodiv", "joint")


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = Field(20, ge=1)
    mode: Literal["pose", "base", "pose-nodiv", "joint"] = "pose"
    lr_task: float = Field(1e-4, gt=0)
    lr_aug: float = Field(1e-2, gt=0)
    lr_decay: float = Field(0.9, gt=0, le=1)
    lr_decay_every: int = Field(500, ge=1)
    batch_per_class: int = Field(8, ge=2)
    input_size: int = Field(128, ge=8)
    aug_steps_per_epoch: int | None = Field(None, ge=1)
    aug_steps_cap: int = Field(200, ge=1)
    seed: int = 0
    loss: LossConfig = LossConfig()
    # task model
    width: float = Field(1.0, gt=0)
    embed_dim: int = Field(128, ge=2)
    head_depth: int = Field(1, ge=1, le=2)
    dct_eps: float = Field(1e-3, gt=0)
    # augmentation models
    aug_layers: int = Field(2, ge=1, le=4)
    aug_kernel: int = Field(3, ge=1)
    aug_variant: Literal["conv", "up_down"] = "conv"
    joint_models: int | None = Field(None, ge=1)
    # gradient-norm bound for augmentation-model updates; None disables
    aug_grad_clip: float | None = Field(1.0, gt=0)
    # quantize augmented images to 8 bits before the task model sees them
    quantize_aug: bool = True
    # train-time perturbation ("immunized" training)
    perturb_kind: Literal["blur", "jpeg", "lighting", "noise", "crop_resize"] | None = None
    perturb_max: float | None = None
    divergence_patience: int = Field(3, ge=1)

    def resolved(self) -> "TrainConfig":
        """Copy with mode-implied settings made explicit."""
        if self.mode == "pose-nodiv" and self.loss.diversity_enabled:
            return self.model_copy(update={"loss": self.loss.model_copy(update={"alpha": 0.0, "beta": 0.0})})
        return self

    @property
    def uses_augmentation(self):
        return self.mode != "base"


# settings that make a run fit a single CPU core in minutes: 32px images,
# a quarter-width extractor and a fixed augmentation budget per epoch
DESK_PRESET = dict(epochs=10, input_size=32, width=0.25, embed_dim=64, aug_steps_per_epoch=200)


def desk_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**DESK_PRESET, **overrides})


@dataclass
class TrainState:
    config: TrainConfig
    task: TaskModel
    pool: ModelPool
    opt_task: torch.optim.Optimizer
    sched_task: torch.optim.lr_scheduler.LRScheduler
    rng: np.random.Generator
    epoch: int = 0
    epochs_completed: int = 0
    task_step: int = 0
    log: list = field(default_factory=list)
    joint: list = field(default_factory=list)
    run_dir: Path | None = None
    _log_fh: object = None

    def record(self, entry: dict):
        self.log.append(entry)
        if self._log_fh is not None:
            self._log_fh.write(json.dumps(entry) + "\n")
            self._log_fh.flush()


def mine_triplets(extended_labels) -> list[tuple[int, int, int]]:
    """Every (anchor, positive, negative) index triple, in lexicographic order."""
    labels = list(extended_labels)
    n = len(labels)
    out = []
    for a in range(n):
        pos = [p for p in range(n) if p != a and labels[p] == labels[a]]
        if not pos:
            continue
        neg = [q for q in range(n) if labels[q] != labels[a]]
        out.extend((a, p, q) for p in pos for q in neg)
    return out


def balanced_batches(labels, per_class, rng):
    """Index batches holding ``per_class`` items of every class; one pass."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    perms = [rng.permutation(np.flatnonzero(labels == c)) for c in classes]
    nb = min(len(p) for p in perms) // per_class
    for b in range(nb):
        yield np.concatenate([p[b * per_class : (b + 1) * per_class] for p in perms])


def _check_data(data: ImageSet, cfg: TrainConfig):
    labels = np.asarray(data.labels)
    if np.any(labels < 0):
        raise DatasetError("training data must contain known classes only")
    counts = np.bincount(labels, minlength=data.num_classes)
    if data.num_classes < 2 or len(counts) != data.num_classes:
        raise DatasetError("need at least two known classes")
    if counts.min() < cfg.batch_per_class:
        raise DatasetError(
            f"every class needs >= {cfg.batch_per_class} training images, smallest has {counts.min()}"
        )
    if data.images.shape[-1] != cfg.input_size or data.images.shape[-2] != cfg.input_size:
        raise DatasetError(f"images are {data.images.shape[-2:]}, config expects {cfg.input_size}px")


def aug_steps(cfg: TrainConfig, data: ImageSet) -> int:
    if cfg.aug_steps_per_epoch is not None:
        return cfg.aug_steps_per_epoch
    counts = np.bincount(data.labels, minlength=data.num_classes)
    return max(1, min(cfg.aug_steps_cap, int(counts.min()) // cfg.batch_per_class))


def _aug_seed(cfg, index):
    return bench._key_seed(cfg.seed, "augmentation", index) % (2**31)


def _to_task_input(x, cfg):
    x = x.detach().clamp(0.0, 1.0)
    if cfg.quantize_aug:
        x = torch.round(x * 255.0) / 255.0
    return x


def _clip(params, max_norm):
    if max_norm is not None:
        torch.nn.utils.clip_grad_norm_(params, max_norm)


def _set_trainable(module, flag):
    for p in module.parameters():
        p.requires_grad_(flag)


class _Guard:
    def __init__(self, patience, phase, state):
        self.bad = 0
        self.patience = patience
        self.phase = phase
        self.state = state

    def ok(self, loss, step):
        if torch.isfinite(loss):
            self.bad = 0
            return True
        self.bad += 1
        if self.bad >= self.patience:
            raise DivergenceError("non-finite loss", epoch=self.state.epoch, step=step, phase=self.phase)
        return False


def _batch(data, idx, cfg, rng):
    x = data.images[idx]
    if cfg.perturb_kind is not None:
        x = x.copy()
        lo, hi = bench.PERTURB_RANGES[cfg.perturb_kind]
        identity = {"jpeg": hi, "crop_resize": hi, "lighting": 0.0}.get(cfg.perturb_kind, lo)
        top = cfg.perturb_max if cfg.perturb_max is not None else (lo if identity == hi else hi)
        for j in range(len(x)):
            if rng.random() < 0.5:
                s = float(rng.uniform(min(identity, top), max(identity, top)))
                x[j] = bench.perturb(x[j], cfg.perturb_kind, s, seed=int(rng.integers(2**31)))
    return torch.from_numpy(np.ascontiguousarray(x)), torch.from_numpy(data.labels[idx])


def _cycle_batches(data, cfg, rng, data_rng=None):
    while True:
        yield from (_batch(data, idx, cfg, data_rng or rng) for idx in balanced_batches(data.labels, cfg.batch_per_class, rng))


def init_state(data: ImageSet, cfg: TrainConfig, run_dir=None) -> TrainState:
    cfg = cfg.resolved()
    _check_data(data, cfg)
    torch.manual_seed(cfg.seed)
    task = TaskModel(
        num_classes=data.num_classes,
        input_size=cfg.input_size,
        width=cfg.width,
        embed_dim=cfg.embed_dim,
        head_depth=cfg.head_depth,
        dct_eps=cfg.dct_eps,
    )
    task.front.fit(torch.from_numpy(data.images))
    opt = torch.optim.Adam(task.parameters(), lr=cfg.lr_task, betas=(0.9, 0.999))
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.lr_decay_every, gamma=cfg.lr_decay)
    state = TrainState(cfg, task, ModelPool(seed=cfg.seed), opt, sched, np.random.default_rng(cfg.seed))
    if run_dir is not None:
        state.run_dir = Path(run_dir)
        state.run_dir.mkdir(parents=True, exist_ok=True)
        # a fresh run replaces any earlier checkpoint index in the same place
        for stale in ("manifest.jsonl", "shapes.txt"):
            (state.run_dir / "checkpoints" / stale).unlink(missing_ok=True)
        state._log_fh = (state.run_dir / "metrics.jsonl").open("w")
    return state


def _arch(cfg):
    return dict(layers=cfg.aug_layers, kernel_size=cfg.aug_kernel, variant=cfg.aug_variant)


def train_aug_epoch(state: TrainState, data: ImageSet):
    """Train one new augmentation model and append it to the pool."""
    cfg = state.config
    task = state.task
    index = len(state.pool)
    model = init_augmentation_model(_aug_seed(cfg, index), model_id=index, **_arch(cfg))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_aug, betas=(0.9, 0.999))
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.lr_decay_every, gamma=cfg.lr_decay)
    task.eval()
    _set_trainable(task, False)
    use_div = len(state.pool) > 0 and cfg.loss.diversity_enabled
    guard = _Guard(cfg.divergence_patience, "aug", state)
    batches = _cycle_batches(data, cfg, state.rng)
    try:
        for step in range(aug_steps(cfg, data)):
            x, _ = next(batches)
            x_new = model(x)
            entry = {"phase": "aug", "epoch": state.epoch, "step": step, "model_id": index}
            if use_div:
                old = state.pool.sample_old(state.rng)
                with torch.no_grad():
                    z_old = task.embed(old(x))
                    z_known = task.embed(x)
                z_new = task.embed(x_new)
                recons = reconstruction_loss(x, x_new, cfg.loss.epsilon_floor)
                div = diversity_loss(z_new, z_old, z_known, cfg.loss)
                loss = recons + div
                entry.update(
                    div=div.item(),
                    cos_old=F.cosine_similarity(z_new, z_old, dim=-1).mean().item(),
                    cos_known=F.cosine_similarity(z_new, z_known, dim=-1).mean().item(),
                    old_id=old.model_id,
                )
            else:
                loss = aug_loss(x, x_new, cfg.loss)
                recons = loss
            entry.update(loss=loss.item(), recons=recons.item(), lr=sched.get_last_lr()[0])
            state.record(entry)
            opt.zero_grad()
            if guard.ok(loss, step):
                loss.backward()
                _clip(model.parameters(), cfg.aug_grad_clip)
                opt.step()
            sched.step()
    finally:
        _set_trainable(task, True)
    state.pool.append(model, epoch=state.epoch)
    if state.run_dir is not None:
        save_augmentation_model(state.run_dir / "checkpoints", model, state.epoch, _aug_seed(cfg, index))
    return model


def train_joint_aug_epoch(state: TrainState, data: ImageSet):
    """Joint-training ablation: every model of a fixed-size set is updated together."""
    cfg = state.config
    task = state.task
    n_models = cfg.joint_models or cfg.epochs
    if not state.joint:
        state.joint = [init_augmentation_model(_aug_seed(cfg, i), model_id=i, **_arch(cfg)) for i in range(n_models)]
        state._joint_opt = torch.optim.Adam(
            [p for m in state.joint for p in m.parameters()], lr=cfg.lr_aug, betas=(0.9, 0.999)
        )
    opt = state._joint_opt
    task.eval()
    _set_trainable(task, False)
    guard = _Guard(cfg.divergence_patience, "aug", state)
    batches = _cycle_batches(data, cfg, state.rng)
    try:
        for step in range(aug_steps(cfg, data)):
            x, _ = next(batches)
            outs = [m(x) for m in state.joint]
            loss = sum(reconstruction_loss(x, o, cfg.loss.epsilon_floor) for o in outs)
            if cfg.loss.diversity_enabled and len(outs) > 1:
                with torch.no_grad():
                    z_known = task.embed(x)
                zs = [task.embed(o) for o in outs]
                for j in range(len(zs)):
                    k = int(state.rng.integers(len(zs) - 1))
                    k = k + 1 if k >= j else k
                    loss = loss + diversity_loss(zs[j], zs[k], z_known, cfg.loss)
            state.record({"phase": "aug", "epoch": state.epoch, "step": step, "model_id": "joint",
                          "loss": loss.item()})
            opt.zero_grad()
            if guard.ok(loss, step):
                loss.backward()
                _clip([p for m in state.joint for p in m.parameters()], cfg.aug_grad_clip)
                opt.step()
    finally:
        _set_trainable(task, True)


def _task_pair(state: TrainState):
    """(new, old) augmentation models used in this epoch's task phase."""
    cfg = state.config
    if cfg.mode == "joint":
        members = state.joint
        j = state.epoch % len(members)
        if len(members) == 1:
            return members[j], members[j]
        k = int(state.rng.integers(len(members) - 1))
        return members[j], members[k + 1 if k >= j else k]
    new = state.pool[-1]
    if len(state.pool) == 1:
        return new, new
    return new, state.pool[int(state.rng.integers(len(state.pool) - 1))]


def train_task_epoch(state: TrainState, data: ImageSet):
    cfg = state.config
    task = state.task
    task.train()
    guard = _Guard(cfg.divergence_patience, "task", state)
    for step, idx in enumerate(balanced_batches(data.labels, cfg.batch_per_class, state.rng)):
        x, y = _batch(data, idx, cfg, state.rng)
        entry = {"phase": "task", "epoch": state.epoch, "step": step, "lr": state.sched_task.get_last_lr()[0]}
        if cfg.uses_augmentation:
            new, old = _task_pair(state)
            with torch.no_grad():
                x_new = _to_task_input(new(x), cfg)
                x_old = x_new if old is new else _to_task_input(old(x), cfg)
            terms = task_loss_terms(task, x, x_old, x_new, y, cfg.loss)
            loss = terms["cls"] + terms["metric_old"] + terms["metric_new"]
            entry.update({k: v.item() for k, v in terms.items()})
        else:
            loss = F.cross_entropy(task.logits(x), y)
            entry["cls"] = loss.item()
        entry["loss"] = loss.item()
        state.record(entry)
        state.opt_task.zero_grad()
        if guard.ok(loss, step):
            loss.backward()
            state.opt_task.step()
            state.sched_task.step()
        state.task_step += 1
    task.eval()
    return task


@torch.no_grad()
def train_accuracy(task, data: ImageSet, batch=256):
    task.eval()
    correct = 0
    for i in range(0, len(data), batch):
        x = torch.from_numpy(data.images[i : i + batch])
        correct += int((task.logits(x).argmax(-1).numpy() == data.labels[i : i + batch]).sum())
    return correct / len(data)


def train_pose(data: ImageSet, cfg: TrainConfig, run_dir=None, eval_data: ImageSet | None = None) -> TrainState:
    """Run every epoch of training; returns the final state.

    With ``run_dir`` the per-step metrics log (``metrics.jsonl``), the resolved
    config and per-epoch checkpoints are written there.
    """
    state = init_state(data, cfg, run_dir)
    cfg = state.config
    if state.run_dir is not None:
        (state.run_dir / "train_config.json").write_text(cfg.model_dump_json(indent=2))
    try:
        for epoch in range(cfg.epochs):
            state.epoch = epoch
            if cfg.mode in ("pose", "pose-nodiv"):
                train_aug_epoch(state, data)
            elif cfg.mode == "joint":
                train_joint_aug_epoch(state, data)
            train_task_epoch(state, data)
            state.epochs_completed = epoch + 1
            summary = {"phase": "epoch", "epoch": epoch, "pool_size": len(state.pool),
                       "train_accuracy": train_accuracy(state.task, data)}
            if eval_data is not None:
                summary["eval_accuracy"] = train_accuracy(state.task, eval_data.closed)
            state.record(summary)
            log.info("epoch %d: %s", epoch, summary)
            if state.run_dir is not None:
                save_task_model(state.run_dir / "checkpoints", state.task, epoch, cfg.seed,
                                metrics={"train_accuracy": summary["train_accuracy"]})
        if cfg.mode == "joint":
            for m in state.joint:
                state.pool.append(m, epoch=cfg.epochs - 1)
                if state.run_dir is not None:
                    save_augmentation_model(state.run_dir / "checkpoints", m, cfg.epochs - 1,
                                            _aug_seed(cfg, m.model_id))
    finally:
        if state._log_fh is not None:
            state._log_fh.close()
            state._log_fh = None
    return state


# Spectral feasibility ----------------------------------------------------------------


class FeasibilityConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    steps: int = Field(600, ge=1)
    lr: float = Field(1e-2, gt=0)  # cosine-annealed to 1% over the run
    batch_size: int = Field(64, ge=1)
    seed: int = 0
    # profile scale the loss compares: log of the ring means (default) or power
    log_power: bool = True
    normalize: bool = False
    loss: LossConfig = LossConfig(lambda_spectral=1e-2)
    aug_layers: int = 2
    aug_kernel: int = 3
    grad_clip: float | None = Field(1.0, gt=0)


def _profile_of(images, model=None, normalize=False, log_power=False, chunk=256):
    if model is not None:
        with torch.no_grad():
            images = np.concatenate(
                [model(torch.as_tensor(images[i : i + chunk])).numpy() for i in range(0, len(images), chunk)]
            )
    return mean_profile(images, normalize=normalize, log_power=log_power)


def spectral_feasibility(source_images, target_images, cfg: FeasibilityConfig = FeasibilityConfig()):
    """Fit one augmentation model so that augmented source images take on the
    target corpus' mean spectrum profile while staying close in pixels.

    Returns (model, report). The report holds the raw-profile distances the
    loss optimizes, the same distances after DC normalization, and the final
    pixel MSE over all source images.
    """
    src = np.asarray(source_images, dtype=np.float32)
    tgt = np.asarray(target_images, dtype=np.float32)
    if src.shape[1:] != tgt.shape[1:]:
        raise InvalidInputError(f"corpora differ in shape: {src.shape[1:]} vs {tgt.shape[1:]}")
    target = _profile_of(tgt, normalize=cfg.normalize, log_power=cfg.log_power)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = init_augmentation_model(cfg.seed, layers=cfg.aug_layers, kernel_size=cfg.aug_kernel)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.steps, eta_min=cfg.lr * 0.01)
    everything = np.concatenate([src, tgt])
    history = []
    for step in range(cfg.steps):
        xs = torch.from_numpy(src[rng.choice(len(src), min(cfg.batch_size, len(src)), replace=False)])
        xa = torch.from_numpy(everything[rng.choice(len(everything), min(cfg.batch_size, len(everything)), replace=False)])
        loss = spectral_loss(xa, model(xa), model(xs), target, cfg.loss)
        opt.zero_grad()
        loss.backward()
        _clip(model.parameters(), cfg.grad_clip)
        opt.step()
        sched.step()
        history.append(loss.item())
    model.eval()
    report = _feasibility_report(model, src, tgt, cfg)
    report["loss_first"] = history[0]
    report["loss_last"] = history[-1]
    return model, report


def _feasibility_report(model, src, tgt, cfg):
    """Distances in the fitted profile scale, plus DC-normalized power
    profiles for reference, and the final pixel MSE on all source images."""
    out = {}
    for tag, norm, log in (("", cfg.normalize, cfg.log_power), ("_power_normalized", True, False)):
        target = _profile_of(tgt, normalize=norm, log_power=log)
        out[f"initial_distance{tag}"] = profile_distance(_profile_of(src, normalize=norm, log_power=log), target)
        out[f"final_distance{tag}"] = profile_distance(_profile_of(src, model, normalize=norm, log_power=log), target)
    with torch.no_grad():
        x = torch.from_numpy(src)
        out["final_pixel_mse"] = float(((model(x) - x) ** 2).mean())
    out["log_power"] = cfg.log_power
    out["normalized"] = cfg.normalize
    return out
