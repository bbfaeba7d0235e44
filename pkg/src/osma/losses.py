"""Training objectives.

All functions take torch tensors and are dtype-agnostic, so they can be
checked against finite differences in float64.
"""
from __future__ import annotations

import warnings

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import InvalidInputError, InvalidLabelError, UndefinedCosineError
from .spectrum import LOG_FLOOR, SpectrumProfile, azimuthal_profile_torch, power_spectrum_torch


class LossConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lambda_spectral: float = Field(1e-4, gt=0)
    alpha: float = Field(1e-4, ge=0)
    beta: float = Field(1e-2, ge=0)
    d_margin: float = Field(0.95, gt=0, le=1)
    m_margin: float = Field(0.3, gt=0)
    epsilon_floor: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def _diversity_weights(self):
        # alpha = beta = 0 is the "no diversity" ablation; mixed zeros are a typo
        if (self.alpha == 0) != (self.beta == 0):
            raise ValueError("alpha and beta must both be positive, or both zero to disable diversity")
        return self

    @property
    def diversity_enabled(self):
        return self.alpha > 0 and self.beta > 0


class EmptyTripletWarning(UserWarning):
    """No anchor/positive/negative triple exists in the batch."""


def cross_entropy_loss(logits: torch.Tensor, label) -> torch.Tensor:
    """-log softmax(logits)[label]; batches are averaged."""
    single = logits.dim() == 1
    logits2 = logits.unsqueeze(0) if single else logits
    labels = torch.as_tensor(label, dtype=torch.long).reshape(-1)
    k = logits2.shape[-1]
    if labels.numel() != logits2.shape[0]:
        raise InvalidInputError("one label per row of logits required")
    if torch.any(labels < 0) or torch.any(labels >= k):
        raise InvalidLabelError(f"labels must lie in [0, {k})")
    logp = F.log_softmax(logits2, dim=-1)
    return -logp.gather(1, labels[:, None]).mean()


def extend_label(known_class, num_known: int):
    """Label K + i given to augmented copies of known class i."""
    labels = torch.as_tensor(known_class)
    if torch.any(labels < 0) or torch.any(labels >= num_known):
        raise InvalidLabelError(f"known class must lie in [0, {num_known})")
    if labels.dim() == 0:
        return int(labels) + num_known
    return labels + num_known


def triplet_mask(labels: torch.Tensor) -> torch.Tensor:
    """Boolean (n, n, n) mask of valid (anchor, positive, negative) triples."""
    same = labels[:, None] == labels[None, :]
    not_self = ~torch.eye(len(labels), dtype=torch.bool, device=labels.device)
    ap = same & not_self
    an = ~same
    return ap[:, :, None] & an[:, None, :]


def triplet_metric_loss(embeddings: torch.Tensor, labels, margin: float = 0.3) -> torch.Tensor:
    """Batch-all triplet loss: mean of [d(a,p) - d(a,n) + m]+ over every valid triple.

    Distances are squared Euclidean. With no valid triple the result is zero
    and an :class:`EmptyTripletWarning` is emitted.
    """
    labels = torch.as_tensor(labels, device=embeddings.device).reshape(-1)
    mask = triplet_mask(labels)
    count = mask.sum()
    if count == 0:
        warnings.warn("no valid triplet in batch", EmptyTripletWarning, stacklevel=2)
        return embeddings.sum() * 0.0
    diff = embeddings[:, None, :] - embeddings[None, :, :]
    d2 = (diff * diff).sum(-1)
    raw = d2[:, :, None] - d2[:, None, :] + margin
    return (F.relu(raw) * mask).sum() / count


def reconstruction_loss(x: torch.Tensor, x_aug: torch.Tensor, epsilon_floor: float = 0.0) -> torch.Tensor:
    """Mean squared pixel error, optionally floored at ``epsilon_floor``.

    Below the floor the returned value is the constant floor, so no gradient
    reaches ``x_aug``.
    """
    if x.shape != x_aug.shape:
        raise InvalidInputError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_aug.shape)}")
    r = ((x_aug - x) ** 2).mean()
    if epsilon_floor > 0:
        floor = torch.as_tensor(epsilon_floor, dtype=r.dtype, device=r.device)
        return torch.where(r < floor, floor, r)
    return r


def _unit(z, name):
    norms = z.norm(dim=-1, keepdim=True)
    if torch.any(norms == 0):
        raise UndefinedCosineError(f"{name} contains a zero vector")
    return z / norms


def diversity_loss(z_new, z_old, z_known, cfg: LossConfig) -> torch.Tensor:
    """alpha * cos(z_new, z_old) - beta * min(cos(z_new, z_known), d), batch-averaged.

    The first term pushes the new model's embeddings away from the old
    model's; the second pulls them toward the known images but stops pulling
    once the similarity exceeds the margin d.
    """
    u_new, u_old, u_known = _unit(z_new, "z_new"), _unit(z_old, "z_old"), _unit(z_known, "z_known")
    cos_old = (u_new * u_old).sum(-1)
    cos_known = (u_new * u_known).sum(-1)
    d = torch.as_tensor(cfg.d_margin, dtype=cos_known.dtype, device=cos_known.device)
    capped = torch.where(cos_known > d, d, cos_known)
    return (cfg.alpha * cos_old - cfg.beta * capped).mean()


def batch_profile(images: torch.Tensor, normalize: bool = False, log_power: bool = False) -> torch.Tensor:
    """Azimuthal profile of the batch-mean power spectrum (luminance).

    With ``log_power`` the log of that profile; normalizing then subtracts
    the DC value.
    """
    if not log_power:
        return azimuthal_profile_torch(power_spectrum_torch(images).mean(0), normalize=normalize)
    prof = torch.log(azimuthal_profile_torch(power_spectrum_torch(images).mean(0)) + LOG_FLOOR)
    return prof - prof[:1] if normalize else prof


def spectral_loss(x_all, x_all_aug, x_src_aug, target_profile: SpectrumProfile, cfg: LossConfig) -> torch.Tensor:
    """Pixel MSE of the augmentation over all images plus lambda times the
    distance between the augmented source profile and the target profile.
    """
    n = x_src_aug.shape[-1]
    if len(target_profile) != n // 2 or x_src_aug.shape[-2] != n:
        raise InvalidInputError(f"target profile of length {len(target_profile)} does not match {n}x{n} images")
    recons = reconstruction_loss(x_all, x_all_aug)
    prof = batch_profile(x_src_aug, normalize=target_profile.normalized, log_power=target_profile.log_power)
    target = torch.as_tensor(target_profile.values, dtype=prof.dtype, device=prof.device)
    return recons + cfg.lambda_spectral * torch.linalg.vector_norm(prof - target)


def metric_term(z_known, z_aug, labels, num_known, margin):
    """Triplet loss over known embeddings (labels i) merged with augmented ones (labels K + i)."""
    z = F.normalize(torch.cat([z_known, z_aug]), dim=-1)
    merged = torch.cat([labels, extend_label(labels, num_known)])
    return triplet_metric_loss(z, merged, margin)


def task_loss_terms(task, x, x_old, x_new, labels, cfg: LossConfig) -> dict:
    """Constituents of the task objective from one joint forward pass.

    Returns ``cls`` (cross-entropy on known images only), ``metric_old`` and
    ``metric_new``. Embeddings are L2-normalized before the triplet terms.
    """
    b = len(x)
    logits, z = task(torch.cat([x, x_old, x_new]))
    z_known, z_old, z_new = z[:b], z[b : 2 * b], z[2 * b :]
    k = task.num_classes
    return {
        "cls": cross_entropy_loss(logits[:b], labels),
        "metric_old": metric_term(z_known, z_old, labels, k, cfg.m_margin),
        "metric_new": metric_term(z_known, z_new, labels, k, cfg.m_margin),
    }


def task_loss(task, x, x_old, x_new, labels, cfg: LossConfig) -> torch.Tensor:
    terms = task_loss_terms(task, x, x_old, x_new, labels, cfg)
    return terms["cls"] + terms["metric_old"] + terms["metric_new"]


def aug_loss(x, x_new, cfg: LossConfig, z_new=None, z_old=None, z_known=None) -> torch.Tensor:
    """Reconstruction plus diversity; without old-model embeddings (first
    epoch) it is the reconstruction term alone.
    """
    loss = reconstruction_loss(x, x_new, cfg.epsilon_floor)
    if z_old is not None and cfg.diversity_enabled:
        loss = loss + diversity_loss(z_new, z_old, z_known, cfg)
    return loss
