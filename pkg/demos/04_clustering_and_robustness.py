"""
Clustering unknown sources and robustness to post-processing
============================================================

Embeddings of a trained task model can be clustered to group images by
source, and the open-set score can be tracked while test images are blurred.
"""
import tempfile
from pathlib import Path

import numpy as np

from osma import bench, evalkit, trainer
from osma.data import load_split

root = Path(tempfile.mkdtemp())
manifest = bench.build_benchmark(bench.default_split_spec(input_size=32, train_per_class=100,
                                                          test_per_class=30), root)
train, test = load_split(manifest, "train"), load_split(manifest, "test")
cfg = trainer.desk_config(mode="pose", epochs=6, aug_steps_per_epoch=30, lr_task=1e-3)
state = trainer.train_pose(train, cfg)

# %%
# k-means on the embeddings of every test image, scored against the source
# of each image (every unseen stamp is its own group).
feats = evalkit.embeddings(state.task, test.images)
k = len(set(test.names))
purity, nmi, ari = evalkit.cluster_metrics(feats, test.names, k)
print(f"k={k} purity={purity:.3f} nmi={nmi:.3f} ari={ari:.3f}")

# %%
# OSCR as the test images get blurrier.
for sigma in (0.0, 0.5, 1.0, 2.0):
    images = np.stack([bench.perturb(x, "blur", sigma) for x in test.images])
    recs = evalkit.make_records(evalkit.softmax_scores(state.task, images), test.labels, test.unseen_types)
    closed = [r for r in recs if not r.is_open]
    opened = [r for r in recs if r.is_open]
    print(f"blur sigma {sigma}: OSCR {evalkit.oscr(closed, opened):.3f}")
