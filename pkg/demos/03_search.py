"""
Evolution against random search
===============================

A controlled search problem: hide a metric (the built-in |W|^2 times min-max
scaled |G|) and score candidates by how well their ranking of weights agrees
with it.  0 means the ranking is recovered exactly.  Evolution and random
search get the same budget.
"""

from symprune.bundleio import gen_mlp
from symprune.evolve import EvolveConfig, iterations_to_threshold, random_search, run_evolution
from symprune.fitness import TargetRecovery
from symprune.pruner import builtin_metric

THRESHOLD = 0.05

for seed in range(3):
    fitness = TargetRecovery(gen_mlp(seed), builtin_metric("prunerzero"))
    config = EvolveConfig(seed=seed)  # population 50, 300 iterations
    evo = run_evolution(config, fitness)
    rnd = random_search(config, fitness)
    print(f"seed {seed}")
    print(f"  evolution: best {evo.best_fitness:.4f} after "
          f"{iterations_to_threshold(evo, THRESHOLD)} iterations -> {evo.best_expr}")
    print(f"  random:    best {rnd.best_fitness:.4f} after "
          f"{iterations_to_threshold(rnd, THRESHOLD)} iterations -> {rnd.best_expr}")

# the per-iteration trace is what a convergence plot would be drawn from
trace = [r.best_fitness for r in evo.records]
print(f"seed {seed}, best fitness every 25 iterations:", [round(v, 3) for v in trace[::25]])
