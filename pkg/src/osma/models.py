"""Network definitions: augmentation models, the task model and the model pool."""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DegenerateReferenceError, InvalidInputError, InvalidParameterError
from .spectrum import DEFAULT_DCT_EPS, dct_matrix_torch

EXTRACTOR_CHANNELS = (64, 64, 128, 128, 256, 256, 512, 512)
AUG_VARIANTS = ("conv", "up_down")


class AugmentationModel(nn.Module):
    """Tiny convolutional image-to-image network.

    The default (two 3x3 convolutions, 3 -> 32 -> 3 channels, tanh in between)
    keeps the spatial size and channel count of its input. ``layers`` and
    ``kernel_size`` change depth and receptive field; ``variant="up_down"``
    wraps the first convolution in a 2x average-pool / nearest-upsample pair.
    """

    def __init__(self, layers=2, kernel_size=3, hidden=32, variant="conv", model_id=0):
        super().__init__()
        if variant not in AUG_VARIANTS:
            raise InvalidParameterError(f"unknown augmentation variant {variant!r}")
        if layers < 1 or kernel_size < 1 or kernel_size % 2 == 0:
            raise InvalidParameterError("layers must be >= 1 and kernel_size odd")
        if variant == "up_down" and layers != 2:
            raise InvalidParameterError("the up_down variant has exactly two convolutions")
        chans = [3] + [hidden] * (layers - 1) + [3]
        self.convs = nn.ModuleList(
            nn.Conv2d(cin, cout, kernel_size, padding=kernel_size // 2) for cin, cout in zip(chans[:-1], chans[1:])
        )
        self.variant = variant
        self.model_id = model_id
        self.arch = dict(layers=layers, kernel_size=kernel_size, hidden=hidden, variant=variant)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise InvalidInputError(f"expected (B,3,H,W) input, got {tuple(x.shape)}")
        if self.variant == "up_down":
            size = x.shape[-2:]
            h = torch.tanh(self.convs[0](F.avg_pool2d(x, 2)))
            h = F.interpolate(h, size=size, mode="nearest")
            return self.convs[1](h)
        h = x
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = torch.tanh(h)
        return h


def init_augmentation_model(seed: int, model_id: int = 0, **arch) -> AugmentationModel:
    """Fresh augmentation model with fan-in scaled uniform weights drawn from ``seed``."""
    model = AugmentationModel(model_id=model_id, **arch)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for conv in model.convs:
            fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
            bound = 1.0 / math.sqrt(fan_in)
            conv.weight.copy_((torch.rand(conv.weight.shape, generator=gen) * 2 - 1) * bound)
            conv.bias.copy_((torch.rand(conv.bias.shape, generator=gen) * 2 - 1) * bound)
    return model


def aug_forward(model: AugmentationModel, x: torch.Tensor, export: bool = False) -> torch.Tensor:
    """Apply an augmentation model; ``export=True`` clamps to [0, 1] and detaches."""
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    out = model(x)
    if export:
        out = out.detach().clamp(0.0, 1.0)
    return out[0] if squeeze else out


class DCTFrontEnd(nn.Module):
    """log |DCT-II| per channel, standardized per coefficient.

    The standardization statistics start as identity and are set once from
    training images with :meth:`fit`.
    """

    def __init__(self, size, eps=DEFAULT_DCT_EPS):
        super().__init__()
        self.eps = eps
        self.register_buffer("basis", dct_matrix_torch(size))
        self.register_buffer("mean", torch.zeros(3, size, size))
        self.register_buffer("std", torch.ones(3, size, size))

    def transform(self, x):
        c = self.basis @ x @ self.basis.T
        return torch.log(c.abs() + self.eps)

    @torch.no_grad()
    def fit(self, images, chunk=256):
        feats = torch.cat([self.transform(images[i : i + chunk]) for i in range(0, len(images), chunk)])
        self.mean.copy_(feats.mean(0))
        self.std.copy_(feats.std(0).clamp_min(1e-6))

    def forward(self, x):
        return (self.transform(x) - self.mean) / self.std


class TaskModel(nn.Module):
    """DCT front end, 8-layer CNN extractor, projection head and classifier.

    ``width`` scales every extractor channel count (1.0 reproduces 64 .. 512).
    Every second convolution has stride 2. The projection head is an MLP with
    two hidden layers producing ``embed_dim`` outputs; the classification head
    is dropout followed by one linear layer (``head_depth=2`` inserts a hidden
    layer).
    """

    def __init__(
        self,
        num_classes,
        input_size=128,
        width=1.0,
        embed_dim=128,
        head_depth=1,
        dropout=0.2,
        dct_eps=DEFAULT_DCT_EPS,
        channels=EXTRACTOR_CHANNELS,
    ):
        super().__init__()
        self.config = dict(
            num_classes=num_classes,
            input_size=input_size,
            width=width,
            embed_dim=embed_dim,
            head_depth=head_depth,
            dropout=dropout,
            dct_eps=dct_eps,
            channels=list(channels),
        )
        self.num_classes = num_classes
        self.input_size = input_size
        self.front = DCTFrontEnd(input_size, dct_eps)
        layers = []
        cin = 3
        for i, c in enumerate(channels):
            cout = max(4, int(round(c * width)))
            layers += [
                nn.Conv2d(cin, cout, 3, stride=2 if i % 2 else 1, padding=1),
                nn.BatchNorm2d(cout),
                nn.ReLU(inplace=True),
            ]
            cin = cout
        self.extractor = nn.Sequential(*layers, nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self.feature_dim = cin
        self.projection = nn.Sequential(
            nn.Linear(cin, cin),
            nn.ReLU(inplace=True),
            nn.Linear(cin, cin),
            nn.ReLU(inplace=True),
            nn.Linear(cin, embed_dim),
        )
        if head_depth == 1:
            self.classifier = nn.Sequential(nn.Dropout(dropout), nn.Linear(cin, num_classes))
        elif head_depth == 2:
            self.classifier = nn.Sequential(
                nn.Linear(cin, cin), nn.ReLU(inplace=True), nn.Dropout(dropout), nn.Linear(cin, num_classes)
            )
        else:
            raise InvalidParameterError("head_depth must be 1 or 2")

    def _check(self, x):
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[-1] != self.input_size or x.shape[-2] != self.input_size:
            raise InvalidInputError(
                f"expected (B,3,{self.input_size},{self.input_size}) input, got {tuple(x.shape)}"
            )

    def features(self, x):
        self._check(x)
        return self.extractor(self.front(x))

    def forward(self, x):
        """Return (logits, embeddings) for a batch."""
        f = self.features(x)
        return self.classifier(f), self.projection(f)

    def embed(self, x):
        return self.projection(self.features(x))

    def logits(self, x):
        return self.classifier(self.features(x))


def _batched(x):
    return (x.unsqueeze(0), True) if x.dim() == 3 else (x, False)


def extract_embedding(task: TaskModel, x: torch.Tensor, normalized: bool = False) -> torch.Tensor:
    """Projection-head output for one image (C,H,W) or a batch.

    Inference only: call with the model in eval mode.
    """
    x, single = _batched(x)
    z = task.embed(x)
    if normalized:
        z = F.normalize(z, dim=-1)
    return z[0] if single else z


def classify(task: TaskModel, x: torch.Tensor) -> torch.Tensor:
    x, single = _batched(x)
    out = task.logits(x)
    return out[0] if single else out


class ModelPool:
    """Append-only list of trained augmentation models."""

    def __init__(self, seed=0):
        self.members: list[AugmentationModel] = []
        self.epochs: list[int] = []
        self.rng = np.random.default_rng(seed)

    def append(self, model, epoch=None):
        epoch = len(self.members) if epoch is None else epoch
        if self.epochs and epoch < self.epochs[-1]:
            raise InvalidParameterError("pool members must be appended in epoch order")
        for p in model.parameters():
            p.requires_grad_(False)
        model.eval()
        self.members.append(model)
        self.epochs.append(epoch)

    def sample_old(self, rng=None):
        rng = self.rng if rng is None else rng
        return self.members[int(rng.integers(len(self.members)))]

    def __len__(self):
        return len(self.members)

    def __getitem__(self, i):
        return self.members[i]

    def __iter__(self):
        return iter(self.members)


def layer_weights(model: nn.Module) -> list[np.ndarray]:
    """Learnable parameters grouped per layer (weight and bias flattened together)."""
    out = []
    for module in model.modules():
        w = getattr(module, "weight", None)
        if isinstance(w, torch.nn.Parameter) and not list(module.children()):
            parts = [w.detach().double().flatten()]
            b = getattr(module, "bias", None)
            if isinstance(b, torch.nn.Parameter):
                parts.append(b.detach().double().flatten())
            out.append(torch.cat(parts).numpy())
    return out


def weight_distance(w1, w2) -> float:
    """Mean relative Frobenius distance between corresponding layers.

    Accepts modules (see :func:`layer_weights`) or sequences of arrays.
    """
    if isinstance(w1, nn.Module):
        w1 = layer_weights(w1)
    if isinstance(w2, nn.Module):
        w2 = layer_weights(w2)
    if len(w1) != len(w2) or not w1:
        raise InvalidInputError("weight collections must have the same non-zero number of layers")
    total = 0.0
    for a, b in zip(w1, w2):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise InvalidInputError(f"layer shapes differ: {a.shape} vs {b.shape}")
        ref = np.linalg.norm(a)
        if ref == 0:
            raise DegenerateReferenceError("reference layer has zero norm")
        total += np.linalg.norm(b - a) / ref
    return float(total / len(w1))


def weight_checksum(model: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# Checkpoints -----------------------------------------------------------------


def _shape_lines(name, model):
    return [f"{name}:{k} {tuple(v.shape)} {str(v.dtype).replace('torch.', '')}" for k, v in model.state_dict().items()]


def save_augmentation_model(directory, model, epoch, seed, metrics=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    fname = f"aug_{model.model_id:03d}.pt"
    torch.save({"arch": model.arch, "model_id": model.model_id, "state_dict": model.state_dict()}, directory / fname)
    record = {"kind": "augmentation", "file": fname, "model_id": model.model_id, "epoch": epoch, "seed": seed,
              "metrics": metrics or {}}
    _append_manifest(directory, record, _shape_lines(fname, model))
    return record


def save_task_model(directory, task, epoch, seed, metrics=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    fname = f"task_epoch_{epoch:03d}.pt"
    torch.save({"config": task.config, "state_dict": task.state_dict()}, directory / fname)
    record = {"kind": "task", "file": fname, "model_id": "task", "epoch": epoch, "seed": seed,
              "metrics": metrics or {}}
    _append_manifest(directory, record, _shape_lines(fname, task))
    return record


def _append_manifest(directory, record, shape_lines):
    with (directory / "manifest.jsonl").open("a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
    with (directory / "shapes.txt").open("a") as fh:
        fh.write("\n".join(shape_lines) + "\n")


def read_manifest(directory):
    path = Path(directory) / "manifest.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def load_task_model(path) -> TaskModel:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    task = TaskModel(**blob["config"])
    task.load_state_dict(blob["state_dict"])
    task.eval()
    return task


def load_augmentation_model(path) -> AugmentationModel:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    model = AugmentationModel(model_id=blob["model_id"], **blob["arch"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model


def load_checkpoint(directory, epoch=None):
    """Task model (latest or at ``epoch``) and the pool as of that epoch."""
    directory = Path(directory)
    records = read_manifest(directory)
    tasks = [r for r in records if r["kind"] == "task"]
    if not tasks:
        raise FileNotFoundError(f"no task model checkpoint in {directory}")
    if epoch is None:
        rec = tasks[-1]
    else:
        found = [r for r in tasks if r["epoch"] == epoch]
        if not found:
            raise FileNotFoundError(f"no task model checkpoint for epoch {epoch} in {directory}")
        rec = found[-1]
    task = load_task_model(directory / rec["file"])
    pool = ModelPool()
    for r in records:
        if r["kind"] == "augmentation" and r["epoch"] <= rec["epoch"]:
            pool.append(load_augmentation_model(directory / r["file"]), epoch=r["epoch"])
    return task, pool, rec
