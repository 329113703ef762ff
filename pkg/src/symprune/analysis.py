"""Operation-frequency correlation study over good search candidates.

Collect offspring below a fitness threshold from a search log, count how
often each operation appears in them, and correlate the count columns
with each other and with fitness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .evolve import read_log
from .exprcore import OPS, parse_expr, op_histogram
from .simplify import OOSCatalog, canonical_key

__all__ = ["CandidateRecord", "CorrelationMatrix", "LABELS", "collect_candidates",
           "correlation_matrix", "write_correlation_csv", "top_correlated_ops"]

LABELS = tuple(OPS) + ("fitness",)


@dataclass(frozen=True)
class CandidateRecord:
    expr: str
    fitness: float
    op_counts: tuple

    @classmethod
    def from_expr(cls, expr: str, fitness: float) -> "CandidateRecord":
        hist = op_histogram(parse_expr(expr))
        return cls(expr, float(fitness), tuple(hist.get(op, 0) for op in OPS))


@dataclass
class CorrelationMatrix:
    labels: tuple
    values: np.ndarray

    def __getitem__(self, pair):
        a, b = pair
        return float(self.values[self.labels.index(a), self.labels.index(b)])


def collect_candidates(log_path, threshold: float,
                       catalog: OOSCatalog | None = None) -> list[CandidateRecord]:
    """Offspring with finite fitness below ``threshold``, one per equivalence class.

    Each class keeps its best-scoring expression; output follows first
    appearance in the log.
    """
    path = Path(log_path)
    if not path.is_file():
        raise FileNotFoundError(f"no search log at {path}")
    records, _ = read_log(path)
    best: dict[str, CandidateRecord] = {}
    for rec in records:
        fit = rec["offspring_fitness"]
        if not (math.isfinite(fit) and fit < threshold):
            continue
        cand = CandidateRecord.from_expr(rec["offspring_expr"], fit)
        key = canonical_key(parse_expr(cand.expr), catalog)
        if key not in best or cand.fitness < best[key].fitness:
            best[key] = cand
    return list(best.values())


def correlation_matrix(records, method: str = "pearson") -> CorrelationMatrix:
    """18 x 18 correlations over op counts and fitness; NaN where a column is constant."""
    records = list(records)
    if len(records) < 3:
        raise ValueError(f"need at least 3 candidate records, got {len(records)}")
    if method not in ("pearson", "spearman"):
        raise ValueError("method must be 'pearson' or 'spearman'")
    data = np.array([list(r.op_counts) + [r.fitness] for r in records], dtype=np.float64)
    if method == "spearman":
        data = np.apply_along_axis(rankdata, 0, data)
    centered = data - data.mean(axis=0)
    ss = np.einsum("ij,ij->j", centered, centered)
    defined = ss > 0
    n = data.shape[1]
    values = np.full((n, n), np.nan)
    idx = np.flatnonzero(defined)
    if idx.size:
        c = centered[:, idx]
        cov = c.T @ c
        norm = np.sqrt(ss[idx])
        values[np.ix_(idx, idx)] = np.clip(cov / np.outer(norm, norm), -1.0, 1.0)
        values[idx, idx] = 1.0
    return CorrelationMatrix(LABELS, values)


def _cell(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def write_correlation_csv(path, matrix: CorrelationMatrix) -> None:
    lines = ["op," + ",".join(matrix.labels)]
    for label, row in zip(matrix.labels, matrix.values):
        lines.append(label + "," + ",".join(_cell(v) for v in row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def top_correlated_ops(matrix: CorrelationMatrix, n: int = 3) -> list[tuple[str, float]]:
    """Ops with the largest |correlation| to fitness, ties by vocabulary order."""
    col = matrix.values[:-1, -1]
    pairs = [(op, float(v)) for op, v in zip(matrix.labels[:-1], col) if not math.isnan(v)]
    pairs.sort(key=lambda p: -abs(p[1]))
    return pairs[:n]
