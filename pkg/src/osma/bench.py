"""Synthetic open-set model attribution benchmark.

A "source model" is a :class:`TraceStamp`: a fixed, seeded convolutional
network that adds a small bounded high-frequency residual to procedurally
generated base images. Stamps that share an architecture also share a
prototype set of weights which the seed only perturbs, so stamps differing
only in seed leave related but distinguishable traces, stamps of different
architectures leave unrelated ones, and the same stamp applied to another
base domain keeps its trace but changes content.
"""
from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage

from .errors import InvalidInputError, InvalidParameterError, InvalidSpecError
from .models import AugmentationModel

ARCHITECTURES = {
    "conv2_k3": dict(layers=2, kernel_size=3),
    "conv1_k3": dict(layers=1, kernel_size=3),
    "conv3_k3": dict(layers=3, kernel_size=3),
    "conv2_k5": dict(layers=2, kernel_size=5),
    "up_down": dict(layers=2, kernel_size=3, variant="up_down"),
}
DOMAINS = ("fractal", "shapes", "mosaic", "gratings", "blobs", "cells")
PERTURBATIONS = ("blur", "jpeg", "lighting", "noise", "crop_resize")
UNSEEN_TYPES = ("seed", "architecture", "dataset")
UNSEEN_REAL = "unseen_real"

# relative size of the seed-specific part of a stamp's weights
SEED_SPREAD = 0.6
DATA_SPREAD = 1.0
STAMP_HIDDEN = 16
# periodic pattern added to a stamp network's input (period, amplitude)
TILE_PERIOD = 8
TILE_INPUT = 2.0


def _key_seed(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def image_rng(global_seed, class_name, index) -> np.random.Generator:
    """Per-image generator; independent of generation order."""
    return np.random.default_rng(_key_seed(global_seed, class_name, index))


# Base corpora ------------------------------------------------------------------


def _rescale(a, lo=0.05, hi=0.95):
    a = a - a.min()
    m = a.max()
    return lo + (hi - lo) * (a / m if m > 0 else a)


def _power_law_noise(rng, n, exponent):
    fx = np.fft.fftfreq(n)[:, None]
    fy = np.fft.fftfreq(n)[None, :]
    f = np.hypot(fx, fy)
    f[0, 0] = 1.0
    amp = f ** (-exponent / 2)
    amp[0, 0] = 0.0
    phase = rng.uniform(0, 2 * np.pi, (n, n))
    return np.real(np.fft.ifft2(amp * np.exp(1j * phase)))


def _fractal(rng, n):
    exponent = rng.uniform(3.0, 3.6)
    base = _power_law_noise(rng, n, exponent)
    tint = rng.uniform(0.6, 1.0, 3)
    detail = [_power_law_noise(rng, n, exponent) * 0.3 for _ in range(3)]
    return np.stack([_rescale(base + d) * t for d, t in zip(detail, tint)])


def _shapes(rng, n):
    yy, xx = np.mgrid[0:n, 0:n] / n
    c0, c1 = rng.uniform(0.1, 0.9, (2, 3))
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * xx + np.sin(angle) * yy + 1) / 2
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
    for _ in range(rng.integers(3, 7)):
        color = rng.uniform(0.05, 0.95, 3)
        cx, cy = rng.uniform(0, 1, 2)
        rx, ry = rng.uniform(0.08, 0.3, 2)
        if rng.random() < 0.5:
            mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 < 1
        else:
            mask = (np.abs(xx - cx) < rx) & (np.abs(yy - cy) < ry)
        img[:, mask] = color[:, None]
    return ndimage.gaussian_filter(img, sigma=(0, 0.7, 0.7))


def _mosaic(rng, n):
    k = rng.integers(6, 16)
    pts = rng.uniform(0, n, (k, 2))
    colors = rng.uniform(0.05, 0.95, (k, 3))
    yy, xx = np.mgrid[0:n, 0:n]
    d = (yy[..., None] - pts[:, 0]) ** 2 + (xx[..., None] - pts[:, 1]) ** 2
    lab = d.argmin(-1)
    img = colors[lab].transpose(2, 0, 1)
    img = img + rng.normal(0, 0.03, (3, n, n))
    return np.clip(img, 0, 1)


def _gratings(rng, n):
    yy, xx = np.mgrid[0:n, 0:n] / n
    img = np.zeros((3, n, n))
    for _ in range(rng.integers(2, 4)):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(2, 10)
        wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + rng.uniform(0, 2 * np.pi))
        img += rng.uniform(0.2, 1.0, 3)[:, None, None] * wave
    return _rescale(img)


def _blobs(rng, n):
    yy, xx = np.mgrid[0:n, 0:n] / n
    img = np.zeros((3, n, n)) + rng.uniform(0, 0.3, 3)[:, None, None]
    for _ in range(rng.integers(4, 10)):
        cx, cy = rng.uniform(0, 1, 2)
        s = rng.uniform(0.05, 0.2)
        g = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
        img += rng.uniform(0, 0.8, 3)[:, None, None] * g
    return _rescale(img)


def _cells(rng, n):
    yy, xx = np.mgrid[0:n, 0:n] / n
    turb = _power_law_noise(rng, n, 3.0)
    turb = turb / (np.abs(turb).max() + 1e-12)
    freq = rng.uniform(3, 8)
    marble = np.sin(2 * np.pi * freq * (xx + yy) / 2 + 4 * turb)
    c0, c1 = rng.uniform(0.05, 0.95, (2, 3))
    t = (marble + 1) / 2
    return c0[:, None, None] * (1 - t) + c1[:, None, None] * t


_GENERATORS = {
    "fractal": _fractal,
    "shapes": _shapes,
    "mosaic": _mosaic,
    "gratings": _gratings,
    "blobs": _blobs,
    "cells": _cells,
}


def base_image(domain, rng, size) -> np.ndarray:
    if domain not in _GENERATORS:
        raise InvalidParameterError(f"unknown domain {domain!r}; choose from {DOMAINS}")
    return np.clip(_GENERATORS[domain](rng, size), 0.0, 1.0).astype(np.float32)


def synth_base_corpus(domain: str, count: int, seed: int, size: int = 128, tag: str | None = None) -> np.ndarray:
    """``count`` procedural images of one domain, shape (count, 3, size, size), in [0, 1]."""
    if domain not in _GENERATORS:
        raise InvalidParameterError(f"unknown domain {domain!r}; choose from {DOMAINS}")
    if count < 1:
        raise InvalidParameterError("count must be at least 1")
    tag = domain if tag is None else tag
    return np.stack([base_image(domain, image_rng(seed, tag, i), size) for i in range(count)])


# Trace stamps ------------------------------------------------------------------


@dataclass(frozen=True)
class TraceStamp:
    seed: int
    architecture_tag: str = "conv2_k3"
    amplitude: float = 0.02
    base_domain: str = "fractal"

    def __post_init__(self):
        if self.architecture_tag not in ARCHITECTURES:
            raise InvalidParameterError(f"unknown architecture {self.architecture_tag!r}")
        if self.amplitude < 0:
            raise InvalidParameterError("amplitude must be non-negative")


_STAMP_CACHE: dict = {}


def _mixed(shape, stamp, what):
    """Architecture prototype plus a seed draw plus a training-data draw.

    The data draw is keyed by (architecture, domain), so stamps that share
    architecture and domain differ only through their seed, while a stamp
    moved to another domain keeps its seed draw but gets new data influence.
    """
    parts = (
        (1.0, ("prototype", what, stamp.architecture_tag)),
        (SEED_SPREAD, ("seed", what, stamp.architecture_tag, stamp.seed)),
        (DATA_SPREAD, ("data", what, stamp.architecture_tag, stamp.base_domain)),
    )
    total = torch.zeros(shape)
    for weight, key in parts:
        total += weight * torch.randn(shape, generator=torch.Generator().manual_seed(_key_seed(*key)))
    return total / np.sqrt(sum(w * w for w, _ in parts))


def stamp_network(stamp: TraceStamp) -> AugmentationModel:
    """Fixed network of a stamp, weights drawn with :func:`_mixed`."""
    key = ("net", stamp.seed, stamp.architecture_tag, stamp.base_domain, SEED_SPREAD, DATA_SPREAD)
    if key in _STAMP_CACHE:
        return _STAMP_CACHE[key]
    net = AugmentationModel(hidden=STAMP_HIDDEN, **ARCHITECTURES[stamp.architecture_tag])
    with torch.no_grad():
        for i, conv in enumerate(net.convs):
            fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
            conv.weight.copy_(_mixed(conv.weight.shape, stamp, f"w{i}") * np.sqrt(3.0 / fan_in))
            conv.bias.copy_(_mixed(conv.bias.shape, stamp, f"b{i}") * np.sqrt(3.0 / fan_in))
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    _STAMP_CACHE[key] = net
    return net


def stamp_tile(stamp: TraceStamp) -> torch.Tensor:
    """Zero-mean, unit-variance (3, P, P) periodic pattern of a stamp.

    Stands in for the grid artifacts that upsampling layers leave behind;
    uses the same prototype/seed mixing as the network weights.
    """
    key = ("tile", stamp.seed, stamp.architecture_tag, stamp.base_domain, TILE_PERIOD, SEED_SPREAD, DATA_SPREAD)
    if key not in _STAMP_CACHE:
        t = _mixed((3, TILE_PERIOD, TILE_PERIOD), stamp, "tile")
        t = t - t.mean(dim=(1, 2), keepdim=True)
        _STAMP_CACHE[key] = t / t.std()
    return _STAMP_CACHE[key]


def _high_pass(r):
    return r - F.avg_pool2d(F.pad(r, (1, 1, 1, 1), mode="reflect"), 3, stride=1)


def stamp_residual(stamp: TraceStamp, x: torch.Tensor) -> torch.Tensor:
    """Bounded high-frequency residual g(x) in (-1, 1) of shape (B,3,H,W)."""
    h, w = x.shape[-2:]
    reps = (1, -(-h // TILE_PERIOD), -(-w // TILE_PERIOD))
    t = stamp_tile(stamp).repeat(*reps)[:, :h, :w].to(x.dtype)
    # the pattern passes through the network, so how it shows up depends on
    # the content it is laid over
    r = _high_pass(stamp_network(stamp)(x + TILE_INPUT * t))
    r = r / (r.std(dim=(1, 2, 3), keepdim=True) + 1e-8)
    return torch.tanh(r)


def apply_trace(stamp: TraceStamp, x) -> np.ndarray:
    """clip(x + amplitude * g(x), 0, 1) for one (3,H,W) image or a batch."""
    a = np.asarray(x, dtype=np.float32)
    single = a.ndim == 3
    t = torch.from_numpy(a[None] if single else a)
    if stamp.amplitude == 0:
        out = t.clone()
    else:
        with torch.no_grad():
            out = (t + stamp.amplitude * stamp_residual(stamp, t)).clamp(0.0, 1.0)
    out = out.numpy()
    return out[0] if single else out


# Split specification ---------------------------------------------------------------


class StampSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    seed: int
    architecture: Literal["conv2_k3", "conv1_k3", "conv3_k3", "conv2_k5", "up_down"] = "conv2_k3"
    domain: Literal["fractal", "shapes", "mosaic", "gratings", "blobs", "cells"]

    def stamp(self, amplitude) -> TraceStamp:
        return TraceStamp(self.seed, self.architecture, amplitude, self.domain)


class SplitSpec(BaseModel):
    """Which classes exist, what each one is, and how many images to draw."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    global_seed: int = 0
    input_size: int = Field(128, ge=8)
    train_per_class: int = Field(200, ge=2)
    test_per_class: int = Field(100, ge=1)
    amplitude: float = Field(0.02, ge=0)
    real_class: str = "real"
    seen_real_domains: list[str] = ["fractal", "shapes"]
    unseen_real_domains: list[str] = ["blobs", "cells"]
    seen: list[StampSpec]
    unseen_seed: list[StampSpec] = []
    unseen_architecture: list[StampSpec] = []
    unseen_dataset: list[StampSpec] = []

    @model_validator(mode="after")
    def _check_sharing(self):
        for d in self.seen_real_domains + self.unseen_real_domains:
            if d not in DOMAINS:
                raise InvalidSpecError(f"unknown domain {d!r}")
        names = [self.real_class, UNSEEN_REAL] + [s.name for s in self.all_stamps()]
        if len(set(names)) != len(names):
            raise InvalidSpecError(f"class names must be unique ({UNSEEN_REAL!r} is reserved)")
        if set(self.seen_real_domains) & set(self.unseen_real_domains):
            raise InvalidSpecError("unseen real domains must not overlap seen real domains")
        for s in self.unseen_seed:
            if not any(t.architecture == s.architecture and t.domain == s.domain for t in self.seen):
                raise InvalidSpecError(f"{s.name}: no seen stamp shares its architecture and domain")
            if any(t.architecture == s.architecture and t.domain == s.domain and t.seed == s.seed for t in self.seen):
                raise InvalidSpecError(f"{s.name}: identical to a seen stamp")
        for s in self.unseen_architecture:
            same_domain = [t for t in self.seen if t.domain == s.domain]
            if not same_domain:
                raise InvalidSpecError(f"{s.name}: no seen stamp shares its domain")
            if any(t.architecture == s.architecture for t in same_domain):
                raise InvalidSpecError(f"{s.name}: architecture already seen on domain {s.domain}")
        for s in self.unseen_dataset:
            twins = [t for t in self.seen if t.seed == s.seed and t.architecture == s.architecture]
            if not twins:
                raise InvalidSpecError(f"{s.name}: no seen stamp shares its seed and architecture")
            if any(t.domain == s.domain for t in twins):
                raise InvalidSpecError(f"{s.name}: domain must differ from its seen twin")
        return self

    def all_stamps(self):
        return self.seen + self.unseen_seed + self.unseen_architecture + self.unseen_dataset

    @property
    def num_known(self):
        return 1 + len(self.seen)


def default_split_spec(**overrides) -> SplitSpec:
    """Desk benchmark: real + 4 seen stamps, 4 unseen stamps of each type."""
    spec = dict(
        seen=[
            StampSpec(name="m1_conv2k3_fractal", seed=1, architecture="conv2_k3", domain="fractal"),
            StampSpec(name="m2_conv2k5_fractal", seed=2, architecture="conv2_k5", domain="fractal"),
            StampSpec(name="m3_conv2k3_shapes", seed=3, architecture="conv2_k3", domain="shapes"),
            StampSpec(name="m4_conv2k5_shapes", seed=4, architecture="conv2_k5", domain="shapes"),
        ],
        unseen_seed=[
            StampSpec(name="s1_conv2k3_fractal", seed=11, architecture="conv2_k3", domain="fractal"),
            StampSpec(name="s2_conv2k5_fractal", seed=12, architecture="conv2_k5", domain="fractal"),
            StampSpec(name="s3_conv2k3_shapes", seed=13, architecture="conv2_k3", domain="shapes"),
            StampSpec(name="s4_conv2k5_shapes", seed=14, architecture="conv2_k5", domain="shapes"),
        ],
        unseen_architecture=[
            StampSpec(name="a1_conv1k3_fractal", seed=21, architecture="conv1_k3", domain="fractal"),
            StampSpec(name="a2_updown_fractal", seed=22, architecture="up_down", domain="fractal"),
            StampSpec(name="a3_conv3k3_shapes", seed=23, architecture="conv3_k3", domain="shapes"),
            StampSpec(name="a4_updown_shapes", seed=24, architecture="up_down", domain="shapes"),
        ],
        unseen_dataset=[
            StampSpec(name="d1_conv2k3_mosaic", seed=1, architecture="conv2_k3", domain="mosaic"),
            StampSpec(name="d2_conv2k5_gratings", seed=2, architecture="conv2_k5", domain="gratings"),
            StampSpec(name="d3_conv2k3_gratings", seed=3, architecture="conv2_k3", domain="gratings"),
            StampSpec(name="d4_conv2k5_mosaic", seed=4, architecture="conv2_k5", domain="mosaic"),
        ],
    )
    spec.update(overrides)
    return SplitSpec(**spec)


# Manifest ------------------------------------------------------------------------

MANIFEST_FIELDS = ("image_path", "class_name", "known_class_id", "split", "openness", "unseen_type")


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    class_name: str
    known_class_id: int
    split: str
    openness: str
    unseen_type: str


@dataclass
class BenchmarkManifest:
    records: list
    global_seed: int
    num_known: int
    root: Path | None = None
    class_names: list | None = None

    def select(self, split=None, openness=None, unseen_type=None):
        return [
            r
            for r in self.records
            if (split is None or r.split == split)
            and (openness is None or r.openness == openness)
            and (unseen_type is None or r.unseen_type == unseen_type)
        ]

    def check(self):
        """Raise InvalidSpecError if any manifest invariant is broken."""
        for r in self.records:
            if r.unseen_type != "none" and r.openness != "unseen":
                raise InvalidSpecError(f"{r.image_path}: unseen_type set on a seen record")
            if r.unseen_type != "none" and r.known_class_id != -1:
                raise InvalidSpecError(f"{r.image_path}: unseen_type set but known_class_id != -1")
            if r.split == "train" and r.openness != "seen":
                raise InvalidSpecError(f"{r.image_path}: unseen record in train split")
            if r.openness == "unseen" and r.unseen_type == "none":
                raise InvalidSpecError(f"{r.image_path}: unseen record without unseen_type")
            if r.class_name == UNSEEN_REAL and (r.known_class_id != 0 or r.split != "test"):
                raise InvalidSpecError(f"{r.image_path}: unseen real images are test-only class 0")
        if self.class_names and self.class_names[0] != "real":
            raise InvalidSpecError("class 0 must be the real class")

    def summary(self):
        groups = {
            "seen_real": [r for r in self.records if r.known_class_id == 0 and r.class_name != UNSEEN_REAL],
            "seen_fake": [r for r in self.records if r.openness == "seen" and r.known_class_id > 0],
            "unseen_real": [r for r in self.records if r.class_name == UNSEEN_REAL],
            "unseen_fake": [r for r in self.records if r.unseen_type != "none"],
        }
        out = {"num_known": self.num_known, "classes": self.class_names, "groups": {}}
        for name, recs in groups.items():
            counts = {}
            for r in recs:
                key = f"{r.split}/{r.unseen_type}" if r.unseen_type != "none" else r.split
                counts[key] = counts.get(key, 0) + 1
            out["groups"][name] = counts
        return out


def save_png(path, image):
    arr = np.round(np.clip(np.asarray(image), 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, "RGB").save(path, format="PNG", optimize=False, compress_level=6)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def quantize(image):
    return np.round(np.clip(image, 0, 1) * 255).astype(np.float32) / 255.0


def build_benchmark(spec: SplitSpec, out_dir) -> BenchmarkManifest:
    """Render every class of ``spec`` to PNG files under ``out_dir`` and write the manifest.

    Files: ``images/<class>/<split>_<index>.png``, ``manifest.jsonl`` (one
    record per image), ``manifest_meta.json`` and ``split_spec.json``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gs, size = spec.global_seed, spec.input_size
    records = []
    class_names = [spec.real_class] + [s.name for s in spec.seen]

    def emit(class_name, split, index, image, known_id, openness, unseen_type):
        rel = Path("images") / class_name / f"{split}_{index:05d}.png"
        (out_dir / rel).parent.mkdir(parents=True, exist_ok=True)
        save_png(out_dir / rel, image)
        records.append(ManifestRecord(rel.as_posix(), class_name, known_id, split, openness, unseen_type))

    def stamped(s: StampSpec, split, n):
        bases = np.stack([base_image(s.domain, image_rng(gs, s.name, f"{split}{i}"), size) for i in range(n)])
        return apply_trace(s.stamp(spec.amplitude), bases)

    for split, n in (("train", spec.train_per_class), ("test", spec.test_per_class)):
        doms = spec.seen_real_domains
        for i in range(n):
            img = base_image(doms[i % len(doms)], image_rng(gs, spec.real_class, f"{split}{i}"), size)
            emit(spec.real_class, split, i, img, 0, "seen", "none")
        for cid, s in enumerate(spec.seen, start=1):
            for i, img in enumerate(stamped(s, split, n)):
                emit(s.name, split, i, img, cid, "seen", "none")

    doms = spec.unseen_real_domains
    for i in range(spec.test_per_class if doms else 0):
        # real images from unseen domains keep the known label 0, so they
        # count as closed-set records; the class name tells them apart
        img = base_image(doms[i % len(doms)], image_rng(gs, UNSEEN_REAL, f"test{i}"), size)
        emit(UNSEEN_REAL, "test", i, img, 0, "seen", "none")
    for utype, stamps in (
        ("seed", spec.unseen_seed),
        ("architecture", spec.unseen_architecture),
        ("dataset", spec.unseen_dataset),
    ):
        for s in stamps:
            for i, img in enumerate(stamped(s, "test", spec.test_per_class)):
                emit(s.name, "test", i, img, -1, "unseen", utype)

    with (out_dir / "manifest.jsonl").open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r)) + "\n")
    meta = {"global_seed": gs, "num_known": spec.num_known, "class_names": class_names, "input_size": size}
    (out_dir / "manifest_meta.json").write_text(json.dumps(meta, indent=2))
    (out_dir / "split_spec.json").write_text(spec.model_dump_json(indent=2))
    manifest = BenchmarkManifest(records, gs, spec.num_known, out_dir, class_names)
    manifest.check()
    return manifest


def load_manifest(path) -> BenchmarkManifest:
    """Read ``manifest.jsonl`` (or the directory holding it)."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    root = path.parent
    records = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            d = json.loads(line)
            if tuple(sorted(d)) != tuple(sorted(MANIFEST_FIELDS)):
                raise InvalidSpecError(f"manifest record has fields {sorted(d)}")
            records.append(ManifestRecord(**d))
    meta_path = root / "manifest_meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    num_known = meta.get("num_known", 1 + max(r.known_class_id for r in records))
    manifest = BenchmarkManifest(records, meta.get("global_seed", 0), num_known, root, meta.get("class_names"))
    manifest.check()
    return manifest


def manifest_checksum(out_dir) -> str:
    """SHA-256 over the manifest and every image file it lists."""
    out_dir = Path(out_dir)
    h = hashlib.sha256()
    manifest = out_dir / "manifest.jsonl"
    h.update(manifest.read_bytes())
    for line in manifest.read_text().splitlines():
        if line.strip():
            h.update((out_dir / json.loads(line)["image_path"]).read_bytes())
    return h.hexdigest()


def load_image_folder(path, size=None) -> np.ndarray:
    """All images in a folder as a (N,3,S,S) float array, optionally resized."""
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
    if not files:
        raise InvalidInputError(f"no images in {path}")
    out = []
    for f in files:
        with Image.open(f) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), Image.BICUBIC)
            out.append(np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0)
    shapes = {a.shape for a in out}
    if len(shapes) != 1:
        raise InvalidInputError(f"images in {path} have different sizes: {sorted(shapes)}")
    return np.stack(out)


# Perturbations ---------------------------------------------------------------------

PERTURB_RANGES = {
    "blur": (0.0, 3.0),  # gaussian sigma in pixels
    "jpeg": (1.0, 100.0),  # quality; 100 is the weakest
    "lighting": (-0.5, 0.5),  # additive brightness shift
    "noise": (0.0, 0.5),  # gaussian sigma
    "crop_resize": (0.1, 1.0),  # kept side fraction; 1.0 is the identity
}


def perturb(x, kind: str, strength: float, seed: int = 0) -> np.ndarray:
    """Apply one post-processing operation to a (3,H,W) image in [0, 1]."""
    if kind not in PERTURB_RANGES:
        raise InvalidParameterError(f"unknown perturbation {kind!r}; choose from {PERTURBATIONS}")
    lo, hi = PERTURB_RANGES[kind]
    if not lo <= strength <= hi:
        raise InvalidParameterError(f"{kind} strength must lie in [{lo}, {hi}], got {strength}")
    a = np.asarray(x, dtype=np.float32)
    if kind == "blur":
        out = a if strength == 0 else ndimage.gaussian_filter(a, sigma=(0, strength, strength), mode="reflect")
    elif kind == "jpeg":
        arr = np.round(np.clip(a, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
        buf = io.BytesIO()
        Image.fromarray(arr, "RGB").save(buf, format="JPEG", quality=int(round(strength)))
        buf.seek(0)
        with Image.open(buf) as im:
            out = np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
    elif kind == "lighting":
        out = a + strength
    elif kind == "noise":
        out = a if strength == 0 else a + np.random.default_rng(seed).normal(0, strength, a.shape).astype(np.float32)
    else:
        n = a.shape[-1]
        side = max(2, int(round(n * strength)))
        if side == n:
            out = a
        else:
            off = (n - side) // 2
            crop = torch.from_numpy(np.ascontiguousarray(a[:, off : off + side, off : off + side]))[None]
            out = F.interpolate(crop, size=(n, n), mode="bilinear", align_corners=False)[0].numpy()
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def psnr(a, b) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    return float("inf") if mse == 0 else 10 * np.log10(1.0 / mse)
