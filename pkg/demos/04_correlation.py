"""
Which operations show up in good metrics?
=========================================

Run a search on the reconstruction objective, keep the candidates that
beat a threshold, count the operations in each, and correlate the counts
with each other and with fitness.
"""

import tempfile
from pathlib import Path

import numpy as np

from symprune.analysis import collect_candidates, correlation_matrix, top_correlated_ops, write_correlation_csv
from symprune.bundleio import gen_mlp
from symprune.evolve import EvolveConfig, run_evolution
from symprune.fitness import ReconProxy

out = Path(tempfile.mkdtemp())
fitness = ReconProxy(gen_mlp(seed=2))
run_evolution(EvolveConfig(seed=2, iterations=300), fitness, log_path=out / "search.jsonl")

# everything at least as good as magnitude pruning counts as a candidate
records = collect_candidates(out / "search.jsonl", threshold=1.0)
print(len(records), "distinct candidates below 1.0")

matrix = correlation_matrix(records)
write_correlation_csv(out / "corr.csv", matrix)
print("csv written to", out / "corr.csv")

# strongest op/fitness relationships (positive means more of the op, worse fitness)
for op, r in top_correlated_ops(matrix, n=5):
    print(f"  {op:>6} {r:+.3f}")

# operations that never vary across the candidates have no defined correlation
undefined = [op for op in matrix.labels if np.isnan(matrix[op, op])]
print("constant columns:", undefined)
