"""Symbolic pruning metrics: expression trees over weights, gradients and
activations, a genetic-programming search for them, and the tooling to
apply the resulting masks."""

from .analysis import collect_candidates, correlation_matrix, write_correlation_csv
from .bundleio import (TensorBundle, fd_check, gen_gaussian, gen_mlp, read_bundle,
                       toy_mlp, write_bundle)
from .evolve import EvolveConfig, random_search, run_evolution
from .exprcore import (Expr, ExprSyntaxError, SafeMath, ShapeError, depth, evaluate,
                       format_expr, node_count, op_histogram, parse_expr, random_tree,
                       shape_check)
from .fitness import (FitnessCache, FitnessScore, ReconProxy, TargetRecovery,
                      ExternalEvaluator)
from .pruner import (BUILTIN_EXPRS, LayerStats, Structured, Unstructured, builtin_metric,
                     make_mask, nm_mask, read_masks, recon_error, unstructured_mask,
                     write_masks)
from .simplify import OOSCatalog, canonical_key, default_catalog, oos_simplify

__version__ = "0.1.0"
