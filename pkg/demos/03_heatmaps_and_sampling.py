
# coding: utf-8

# # Rationality heatmaps and top-k placement sampling
#
# A trained model scores every grid cell at every scale bin in one sweep. The
# result is a scales x rows x cols array; cells where the box would leave the
# image are marked invalid. Sampling picks a few placements at random from
# the best cells, and the oracle tells us how many of them are actually
# rational.

# In[1]:

import numpy as np

from placement_ssl.config import load_config
from placement_ssl.data import build_splits
from placement_ssl.evaluation import export_heatmap, oracle_plausibility_accuracy, placement_diversity, top_k_sample
from placement_ssl.model import heatmap
from placement_ssl.scene import oracle_labels, sample_placements
from placement_ssl.training import run_ssl

cfg = load_config(use_unlabeled=False, rounds=0, pretrain_epochs=20, n_test=20)
split = build_splits(cfg.scene_spec(), cfg.n_s, cfg.n_t, cfg.n_test, cfg.novel_categories, cfg.seed,
                     cfg.k_s, cfg.k_t, cfg.k_test)
stack = run_ssl(cfg, split).stack


# In[2]:

scene = split.test_seen[0].scene
hm = heatmap(stack, scene)
print(hm.scores.shape, "valid cells:", int(hm.valid.sum()))
print("widths per scale bin:", np.round(hm.widths, 3))


# Where does the model put its mass? Compare the score the model gives each
# cell with the oracle's verdict for the same box.

# In[3]:

boxes = np.stack([hm.placement(*c) for c in np.argwhere(hm.valid)])
truth = oracle_labels(scene, boxes)
scores = hm.scores[hm.valid]
print("mean score on rational cells  ", scores[truth == 1].mean())
print("mean score on irrational cells", scores[truth == 0].mean())


# Top-k sampling: the 50 best cells form the pool and 5 are drawn from it.
# Random placements give the baseline the sampler has to beat.

# In[4]:

rng = np.random.default_rng(0)
scenes = [r.scene for r in split.test_seen[:10]]
picked = [top_k_sample(heatmap(stack, s), 50, 5, rng)[0] for s in scenes]
random = [sample_placements(s, 5, rng) for s in scenes]
print("plausibility, top-k :", oracle_plausibility_accuracy(scenes, picked))
print("plausibility, random:", oracle_plausibility_accuracy(scenes, random))
print("diversity, top-k    :", placement_diversity(picked))


# One grayscale PNG per scale bin plus a CSV of raw scores.

# In[5]:

paths = export_heatmap(hm, "demo_runs/heatmaps", "seen_0")
for p in paths:
    print(p)
