"""
Metric expressions: parse, evaluate, simplify
=============================================

A pruning metric is a small expression tree over three leaves: the weight
matrix W, its gradient G, and X, the per-column l2 norm of the calibration
inputs.  This walk-through builds a few trees by hand and by string.
"""

import numpy as np

from symprune.exprcore import evaluate, format_expr, infer_shape, node, parse_expr, ShapeError
from symprune.pruner import BUILTIN_EXPRS, LayerStats
from symprune.simplify import canonical_key, oos_simplify

# a tiny layer: 3 output rows, 4 input columns, 10 calibration samples
rng = np.random.default_rng(0)
W = rng.standard_normal((3, 4))
G = rng.standard_normal((3, 4))
Xcal = rng.standard_normal((10, 4)) * [5, 1, 1, 1]  # first input column is loud
layer = LayerStats("demo", W, G, Xcal)
print("xnorm:", layer.xnorm)

# the built-in metrics are just strings in the canonical grammar
for name, text in BUILTIN_EXPRS.items():
    print(f"{name:>10}  {text}")

# wanda = |W| * X, the row vector broadcasts down the rows
wanda = parse_expr(BUILTIN_EXPRS["wanda"])
S, finite = evaluate(wanda, layer)
print("wanda saliency\n", S)
np.testing.assert_allclose(S, np.abs(W) * layer.xnorm, rtol=1e-6)

# trees can also be built directly; formatting gives the canonical string back
t = node("mul", node("abs", parse_expr("W")), node("mms", node("abs", parse_expr("G"))))
print(format_expr(t), "->", infer_shape(t))

# a metric has to produce a matrix, so a bare column norm is rejected
try:
    infer_shape(parse_expr("(W) norm2 (#)"))
except ShapeError as exc:
    print("shape error:", exc)

# opposing operations cancel; the canonical key identifies equivalent trees
noisy = parse_expr("((((W) abs (#)) log (#)) exp (#)) skp (#)")
print(format_expr(noisy), "=>", format_expr(oos_simplify(noisy)))
print(canonical_key(noisy) == canonical_key(parse_expr("(W) abs (#)")))
