"""
Training objectives
===================

The augmentation models minimize reconstruction error plus a diversity term;
the task model adds triplet terms over known and augmented embeddings to the
usual cross-entropy. All losses are plain torch functions, so they can be
checked against finite differences.
"""
import torch

from osma import losses
from osma.losses import LossConfig

torch.manual_seed(0)
cfg = LossConfig()
print(cfg)

# %%
# Diversity: pushed away from the previous model's embeddings, pulled toward
# the known image's embedding until the cosine passes d = 0.95.
z_known = torch.randn(4, 8)
z_old = torch.randn(4, 8)
z_new = (z_known + 0.05 * torch.randn(4, 8)).requires_grad_(True)
z_known.requires_grad_(True)
loss = losses.diversity_loss(z_new, z_old, z_known, cfg)
loss.backward()
print("diversity", loss.item(), "grad on z_known", z_known.grad.abs().max().item())

# %%
# Triplet loss on a tiny batch; augmented copies of class i get label K + i.
emb = torch.nn.functional.normalize(torch.randn(6, 4), dim=-1)
labels = torch.tensor([0, 0, 1, 1, 2, 2])
print("triplet", losses.triplet_metric_loss(emb, labels, margin=0.3).item())
print("extended labels", losses.extend_label(torch.tensor([0, 1]), num_known=3))

# %%
# Gradient check in float64 with torch's own finite-difference tester.
x = torch.rand(2, 3, 4, 4, dtype=torch.float64)
xa = (x + 0.1 * torch.randn_like(x)).requires_grad_(True)
print("reconstruction gradcheck", torch.autograd.gradcheck(lambda a: losses.reconstruction_loss(x, a), (xa,)))
