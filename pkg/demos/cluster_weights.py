"""Where does CMSA put its weight?

Builds a feature map with one dense blob of near-identical tokens and a few
scattered outliers, then prints the KNN-density weights laid out on the token
grid. Tokens in sparse regions of feature space are the distinctive ones:
they get weights near 1, while the redundant blob gets weights near 0. With
lambda_c = 0.5 and every weight pinned at 0.5, CMSA matches plain multi-head
attention exactly; the last line checks that.
"""

import numpy as np
import torch

from clusvpr.cluster_attention import CMSA, token_weights, tokenize
from clusvpr.numerics import DTYPE

g = torch.Generator().manual_seed(0)
fmap = 0.05 * torch.randn(8, 8, 8, dtype=DTYPE, generator=g)
fmap[:, 4:, 4:] += 1.0  # a dense cluster in one corner
for r, c in [(0, 1), (1, 6), (6, 0)]:
    fmap[:, r, c] += torch.randn(8, dtype=DTYPE, generator=g) * 3  # outliers

seq = tokenize(fmap, rate=1)
w = token_weights(seq.tokens, k_n=5).w
np.set_printoptions(precision=2, suppress=True)
print("cluster weights on the 8x8 token grid:")
print(w.reshape(seq.grid).numpy())

att = CMSA(8, heads=2, lambda_c=0.5, generator=g)
x = seq.tokens
n, heads, d = x.shape[0], att.heads, att.head_dim
q, k, v = (lin(x).view(n, heads, d).transpose(0, 1) for lin in (att.w_q, att.w_k, att.w_v))
scores = torch.softmax(q @ k.transpose(1, 2) / d**0.5, dim=-1)
plain = att.proj((scores @ v).transpose(0, 1).reshape(n, heads * d))
half = att(x, torch.full((x.shape[0],), 0.5, dtype=DTYPE))
print("max |CMSA(w=0.5) - vanilla MHA| =", float((half - plain).abs().max().detach()))
