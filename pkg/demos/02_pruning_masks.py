"""
From saliency to masks and reconstruction error
===============================================

Generate a synthetic bundle, score the built-in metrics, and look at what
the masks do.  The score is the layer output error after pruning, relative
to plain magnitude pruning (1.0 means "as good as magnitude").
"""

import numpy as np

from symprune.bundleio import gen_gaussian, gen_mlp
from symprune.exprcore import evaluate
from symprune.fitness import ReconProxy
from symprune.pruner import BUILTIN_EXPRS, Structured, Unstructured, builtin_metric, make_mask, recon_error

# Gaussian layers where every fourth input column is 8x louder
bundle = gen_gaussian(seed=1, anisotropy=[8, 1, 1, 1])
layer = bundle.layers[0]

# half the weights of each row go, lowest saliency first
S, _ = evaluate(builtin_metric("wanda"), layer)
mask = make_mask(S, Unstructured(0.5))
print("kept per row:", mask.keep.sum(axis=1))
print("kept share of loud columns:", mask.keep[:, ::4].mean())
print("kept share of quiet columns:", mask.keep[:, 1::4].mean())

# the same metric under a 2:4 pattern: two survivors in every group of four
nm = make_mask(S, Structured(2, 4))
print("2:4 group counts:", np.unique(nm.keep.reshape(layer.shape[0], -1, 4).sum(axis=2)))

# keeping everything costs nothing
print("all-keep error:", recon_error(layer, np.ones(layer.shape, bool)))

# compare all built-ins on the Gaussian bundle and on a toy MLP with real gradients
for label, b in (("gaussian", bundle), ("mlp", gen_mlp(seed=1))):
    proxy = ReconProxy(b)
    scores = {name: proxy(builtin_metric(name)).value for name in BUILTIN_EXPRS}
    print(label, {k: round(v, 3) for k, v in scores.items()})
