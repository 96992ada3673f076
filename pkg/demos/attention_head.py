# The residual-attention head on a toy feature map.
#
# Each head scores every spatial position per class with a softmax at its own
# temperature. The class feature is the score-weighted average of positions.
# That feature is added (times lambda) to a pooled global feature before the class dot product.
#
# Run with:  python3 demos/attention_head.py

import math

import numpy as np

from multibreath.autodiff import Tensor
from multibreath.csra import CsraHeadConfig, all_attention_scores, csra_logits, init_head, predict_labels

rng = np.random.default_rng(0)

# A CNN6 feature map for one cycle is 512 channels over 4 frequency x 16 time cells.
feats = rng.standard_normal((1, 512, 4, 16)).astype(np.float32)

# Plant a strong "wheeze" response in one cell so the attention has something to find.
cfg = CsraHeadConfig()
weights = init_head(cfg, seed=0)["head.classifier"]
wheeze_dir = weights.data[:, 1].mean(axis=0)
feats[0, :, 2, 9] += 8 * wheeze_dir / np.linalg.norm(wheeze_dir)

print("temperatures:", cfg.temperatures, " lambda:", cfg.lam)
scores = all_attention_scores(Tensor(feats), weights, cfg)  # [N, H, m, 64]
for h, t in enumerate(cfg.temperatures):
    s = scores[0, h, 1]
    label = "inf" if math.isinf(t) else f"{t:g}"
    print(f"head T={label:>3}: weight on the planted cell {s[2 * 16 + 9]:.3f}, "
          f"max {s.max():.3f}, sum {s.sum():.6f}")

# Higher temperatures concentrate the weight; T = inf is plain max pooling.
logits = csra_logits(Tensor(feats), weights, cfg).data
labels, probs = predict_labels(logits)
print("logits:", np.round(logits, 3), " probabilities:", np.round(probs, 3), " labels:", labels)

# With lambda = 0 only the pooled global feature is left.
flat = csra_logits(Tensor(feats), weights, CsraHeadConfig(lam=0.0)).data
print("lambda=0 logits:", np.round(flat, 3))
