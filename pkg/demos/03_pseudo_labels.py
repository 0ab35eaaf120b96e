"""
Monte-Carlo pseudo-labels and class-wise thresholds
===================================================

A source-domain network reads a target image through K random target->source
translations; averaging the K softmax maps lowers the per-pixel variance
roughly as 1/K. Thresholds keep, per class, the most confident fraction r of
the pixels predicted as that class.
"""

# %%
import numpy as np
import torch

from stochuda import pseudo_labels, segmentation, translation
from stochuda.config import TranslationConfig

# untrained networks are enough to show the mechanics
torch.manual_seed(0)
translator = translation.build_model(TranslationConfig(width=4, n_downsample=1, n_res=1, mlp_dim=8), seed=0)
net = segmentation.SegNet(4)
x_t = torch.rand(2, 3, 16, 16) * 2 - 1

# %%
# Variance of the averaged estimate over independent repeats, for several K.
for k in (1, 4, 16):
    reps = [pseudo_labels.mc_pseudo_label(x_t, translator, net, k, torch.Generator().manual_seed(100 * k + i),
                                          sigma2=10.0) for i in range(20)]
    print(f"K={k:2d}: mean per-pixel variance {np.stack(reps).var(0).mean():.2e}")

# %%
# Harden an averaged map with r = 0.5: about half of each class survives.
p = pseudo_labels.mc_pseudo_label(x_t, translator, net, 8, torch.Generator().manual_seed(0))
th = pseudo_labels.class_thresholds(p, 0.5)
hard = pseudo_labels.harden(p, th)
kept = [(int((hard.labels == c).sum()), int(n)) for c, n in enumerate(th.counts)]
print("theta:", np.round(th.theta, 4))
print("kept / predicted per class:", kept)

# %%
# The pseudo-label ensemble is a uniform average over the triplet's maps.
q = pseudo_labels.ensemble([p, p, p])
print("ensemble of identical maps is the map itself:", np.allclose(q, p))
