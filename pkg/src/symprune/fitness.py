"""Fitness functions for candidate metrics (lower is better).

Three interchangeable modes, each a callable ``tree -> FitnessScore``:

* :class:`ReconProxy` -- masked-layer reconstruction error relative to
  magnitude pruning, averaged over the bundle's layers.
* :class:`TargetRecovery` -- ``1 - Spearman`` rank agreement with a known
  target metric; for controlled search-dynamics experiments.
* :class:`ExternalEvaluator` -- shells out to a user command that prints
  one score, e.g. a real perplexity harness.

Anything that fails or is non-finite scores ``+inf`` and never raises.
"""

from __future__ import annotations

import logging
import math
import os
import shlex
import subprocess
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .exprcore import DEFAULT_SAFE, Expr, SafeMath, evaluate, format_expr, shape_check
from .pruner import SparsityPattern, Unstructured, builtin_metric, make_mask, recon_error
from .simplify import OOSCatalog, canonical_key, oos_simplify

log = logging.getLogger(__name__)

__all__ = ["FitnessScore", "SENTINEL", "rank_key", "ReconProxy", "TargetRecovery",
           "ExternalEvaluator", "FitnessCache", "fitness_recon", "fitness_target",
           "fitness_external", "spearman"]


@dataclass(frozen=True)
class FitnessScore:
    value: float
    finite: bool = True

    @classmethod
    def of(cls, value) -> "FitnessScore":
        value = float(value)
        if not math.isfinite(value):
            return SENTINEL
        return cls(value, True)


SENTINEL = FitnessScore(math.inf, False)


def rank_key(score: FitnessScore, n_nodes: int, insertion_index: int):
    """Total order: lower value, then fewer nodes, then older.  ``+inf`` sorts last."""
    return (score.value, n_nodes, insertion_index)


def _map_layers(fn, layers, threads):
    if threads and threads > 1 and len(layers) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, layers))
    return [fn(layer) for layer in layers]


class ReconProxy:
    """Mean over layers of ``recon_error(tree) / recon_error(magnitude)``.

    Layers whose magnitude baseline error is below ``eps`` are skipped; if
    every layer is skipped the plain mean error is returned.  With
    ``normalize=False`` the score is the plain sum of layer errors.
    """

    def __init__(self, bundle, pattern: SparsityPattern = Unstructured(0.5), *,
                 normalize: bool = True, scope: str = "row", safety: SafeMath = DEFAULT_SAFE,
                 eps: float = 1e-12, threads: int = 1):
        if not len(bundle.layers):
            raise ValueError("bundle has no layers")
        self.layers = list(bundle.layers)
        self.pattern = pattern
        self.normalize = normalize
        self.scope = scope
        self.safety = safety
        self.eps = eps
        self.threads = threads
        magnitude = builtin_metric("magnitude")
        self.baseline = [self._layer_error(magnitude, layer) for layer in self.layers]

    def _layer_error(self, tree, layer):
        S, finite = evaluate(tree, layer, self.safety)
        if not finite:
            return math.inf
        return recon_error(layer, make_mask(S, self.pattern, self.scope))

    def layer_errors(self, tree: Expr) -> list[float]:
        shape_check(tree)
        return _map_layers(lambda layer: self._layer_error(tree, layer), self.layers, self.threads)

    def __call__(self, tree: Expr) -> FitnessScore:
        errors = self.layer_errors(tree)
        if not all(math.isfinite(e) for e in errors):
            return SENTINEL
        if not self.normalize:
            return FitnessScore.of(math.fsum(errors))
        ratios = [e / b for e, b in zip(errors, self.baseline) if b >= self.eps]
        if not ratios:
            return FitnessScore.of(math.fsum(errors) / len(errors))
        return FitnessScore.of(math.fsum(ratios) / len(ratios))


def spearman(a: np.ndarray, b: np.ndarray) -> float:
    """Spearman correlation with average ranks; NaN if either side is constant."""
    ra = rankdata(np.ravel(a)).astype(np.float64)
    rb = rankdata(np.ravel(b)).astype(np.float64)
    ra -= ra.mean()
    rb -= rb.mean()
    saa = float(np.dot(ra, ra))
    sbb = float(np.dot(rb, rb))
    if saa == 0.0 or sbb == 0.0:
        return math.nan
    rho = float(np.dot(ra, rb)) / math.sqrt(saa * sbb)
    return max(-1.0, min(1.0, rho))


class TargetRecovery:
    """Mean over layers of ``1 - spearman(tree saliency, target saliency)``; 0 is rank-identical."""

    def __init__(self, bundle, target: Expr, *, safety: SafeMath = DEFAULT_SAFE, threads: int = 1):
        if not len(bundle.layers):
            raise ValueError("bundle has no layers")
        shape_check(target)
        self.layers = list(bundle.layers)
        self.target = target
        self.safety = safety
        self.threads = threads
        self.target_saliency = []
        for layer in self.layers:
            S, finite = evaluate(target, layer, safety)
            if not finite:
                raise ValueError("target metric is non-finite on this bundle")
            self.target_saliency.append(S)

    def __call__(self, tree: Expr) -> FitnessScore:
        shape_check(tree)

        def one(i):
            S, finite = evaluate(tree, self.layers[i], self.safety)
            if not finite:
                return math.nan
            return 1.0 - spearman(S, self.target_saliency[i])

        terms = _map_layers(one, range(len(self.layers)), self.threads)
        if any(math.isnan(t) for t in terms):
            return SENTINEL
        return FitnessScore.of(min(2.0, max(0.0, math.fsum(terms) / len(terms))))


class ExternalEvaluator:
    """Runs a shell command and reads one float from its stdout.

    Every ``{expr}`` in the template is replaced by the shell-quoted
    canonical expression, which is also written to the child's stdin
    followed by a newline, so a template may ignore the placeholder.
    Timeouts, nonzero exits, unparsable or non-finite output all score
    ``+inf`` with a logged warning.
    """

    def __init__(self, template: str, timeout: float = 600.0, max_concurrent: int = 1):
        if not template.strip():
            raise ValueError("empty command template")
        if "{expr}" not in template:
            log.info("command template has no {expr}; the expression arrives on stdin only")
        self.template = template
        self.timeout = timeout
        self._slots = threading.BoundedSemaphore(max_concurrent)

    def command(self, tree: Expr) -> str:
        return self.template.replace("{expr}", shlex.quote(format_expr(tree)))

    def __call__(self, tree: Expr) -> FitnessScore:
        expr = format_expr(tree)
        cmd = self.command(tree)
        with self._slots:
            try:
                proc = subprocess.run(cmd, shell=True, input=expr + "\n", capture_output=True,
                                      text=True, timeout=self.timeout, env=os.environ.copy())
            except subprocess.TimeoutExpired:
                log.warning("evaluator timed out after %ss on %s", self.timeout, expr)
                return SENTINEL
            except OSError as exc:
                log.warning("evaluator failed to start: %s", exc)
                return SENTINEL
        if proc.returncode != 0:
            log.warning("evaluator exited %d on %s", proc.returncode, expr)
            return SENTINEL
        words = proc.stdout.split()
        if len(words) != 1:
            log.warning("evaluator printed %d tokens, expected one score", len(words))
            return SENTINEL
        try:
            value = float(words[0])
        except ValueError:
            log.warning("evaluator printed %r, not a number", words[0])
            return SENTINEL
        if not math.isfinite(value):
            log.warning("evaluator printed non-finite score %r", words[0])
        return FitnessScore.of(value)


class FitnessCache:
    """Scores keyed by the canonical key of the simplified tree.

    Equivalent trees share one entry, and the entry is computed on the
    simplified representative, so equivalent trees always score the same.
    """

    def __init__(self, fitness, catalog: OOSCatalog | None = None):
        self.fitness = fitness
        self.catalog = catalog
        self.scores: dict[str, FitnessScore] = {}
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def __call__(self, tree: Expr) -> FitnessScore:
        key = canonical_key(tree, self.catalog)
        with self._lock:
            hit = self.scores.get(key)
            if hit is not None:
                self.hits += 1
                return hit
            self.misses += 1
        score = self.fitness(oos_simplify(tree, self.catalog))
        with self._lock:
            self.scores.setdefault(key, score)
        return score

    @property
    def queries(self) -> int:
        return self.hits + self.misses


def fitness_recon(tree: Expr, bundle, pattern: SparsityPattern = Unstructured(0.5), **kw) -> FitnessScore:
    return ReconProxy(bundle, pattern, **kw)(tree)


def fitness_target(tree: Expr, bundle, target: Expr, **kw) -> FitnessScore:
    return TargetRecovery(bundle, target, **kw)(tree)


def fitness_external(tree: Expr, command_template: str, timeout: float = 600.0) -> FitnessScore:
    return ExternalEvaluator(command_template, timeout)(tree)
