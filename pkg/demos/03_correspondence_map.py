"""
Looking inside one correspondence map
======================================

For a single keypoint the matcher builds a score for every pixel of the
target image by correlating the keypoint's descriptor with each feature
level and summing the upsampled results. This walks through that map by
hand with random weights, where the peak is only weakly defined.
"""

import numpy as np

from s2dmatch.backbone import Weights, describe_sparse, forward, preset
from s2dmatch.matcher import correspondence_map, likelihood, retrieve
from s2dmatch.training import synthetic_image

# %%
img = synthetic_image(np.random.default_rng(5), (48, 48))
weights = Weights.init(preset("desk2"), seed=0)
pyramid = forward(img, weights)
print("levels:", [lv.shape for lv in pyramid.levels], "scales:", pyramid.scales)

# %%
# Descriptor of the centre pixel matched back into the same image.
desc = describe_sparse(pyramid, [(24.0, 24.0)])
cmap = correspondence_map(desc, 0, pyramid)
m = retrieve(cmap)
(x, y), conf = m.target, m.confidence
print(f"argmax at ({x}, {y}) with softmax confidence {conf:.4f}")

# %%
# The likelihood is a distribution over all 48*48 pixels.
p = likelihood(cmap)
print(f"sum {p.sum():.6f}, uniform level {1 / p.size:.2e}, top-5 mass {np.sort(p.ravel())[-5:].sum():.4f}")
