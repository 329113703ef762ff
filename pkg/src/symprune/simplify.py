"""Opposing-operation simplification and structural equivalence.

The rewrite pass removes unary pairs that cancel (``exp(log(a))``),
collapses repeated idempotent ops (``abs(abs(a))``) and splices out
no-op nodes (``skp``).  Two trees are equivalent when their simplified
canonical strings hash to the same key.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exprcore import ARITY, OPS, Expr, format_expr, node_count, random_tree

__all__ = ["OOSCatalog", "default_catalog", "parse_catalog", "load_catalog",
           "oos_simplify", "canonical_key", "is_equivalent", "oos_effective_probability"]


@dataclass(frozen=True)
class OOSCatalog:
    opposing_pairs: frozenset = field(default_factory=frozenset)
    idempotent_ops: frozenset = field(default_factory=frozenset)
    removable_ops: frozenset = field(default_factory=frozenset)
    # sub(a, neg(b)) -> add(a, b); changes an op rather than removing a pair
    sub_neg: bool = False

    def __post_init__(self):
        for outer, inner in self.opposing_pairs:
            _check_unary(outer)
            _check_unary(inner)
        for op in self.idempotent_ops | self.removable_ops:
            _check_unary(op)


def _check_unary(op):
    if op not in OPS or ARITY[op] != 1:
        raise ValueError(f"catalog entries must be unary operations, got {op!r}")


def default_catalog() -> OOSCatalog:
    return OOSCatalog(
        opposing_pairs=frozenset({
            ("exp", "log"), ("log", "exp"),
            ("sqrt", "sqr"), ("sqr", "sqrt"),
            ("sqrt", "pow"), ("pow", "sqrt"),  # pow is the exponent-2 square
            ("neg", "neg"),
        }),
        idempotent_ops=frozenset({"abs", "mms"}),
        removable_ops=frozenset({"skp"}),
    )


def parse_catalog(text: str) -> OOSCatalog:
    """Read the line format ``pair <outer> <inner>`` / ``idempotent <op>`` /
    ``remove <op>`` / ``rewrite subneg``; ``#`` starts a comment."""
    pairs, idem, remove, sub_neg = set(), set(), set(), False
    for lineno, raw in enumerate(text.splitlines(), 1):
        words = raw.split("#", 1)[0].split()
        if not words:
            continue
        kind, args = words[0], words[1:]
        if kind == "pair" and len(args) == 2:
            pairs.add((args[0], args[1]))
        elif kind == "idempotent" and len(args) == 1:
            idem.add(args[0])
        elif kind == "remove" and len(args) == 1:
            remove.add(args[0])
        elif kind == "rewrite" and args == ["subneg"]:
            sub_neg = True
        else:
            raise ValueError(f"catalog line {lineno}: cannot parse {raw.strip()!r}")
    return OOSCatalog(frozenset(pairs), frozenset(idem), frozenset(remove), sub_neg)


def load_catalog(path) -> OOSCatalog:
    return parse_catalog(Path(path).read_text())


def _pass(t: Expr, cat: OOSCatalog) -> Expr:
    if t.is_leaf:
        return t
    kids = tuple(_pass(c, cat) for c in t.children)
    if len(kids) == 2:
        a, b = kids
        if cat.sub_neg and t.op == "sub" and b.op == "neg":
            return Expr("add", (a, b.children[0]))
        return Expr(t.op, kids)
    (c,) = kids
    if t.op in cat.removable_ops:
        return c
    if len(c.children) == 1:
        if (t.op, c.op) in cat.opposing_pairs:
            return c.children[0]
        if t.op == c.op and t.op in cat.idempotent_ops:
            return c
    return Expr(t.op, kids)


def oos_simplify(tree: Expr, catalog: OOSCatalog | None = None) -> Expr:
    """Apply the catalog bottom-up, repeating until nothing changes."""
    cat = catalog if catalog is not None else _DEFAULT
    while True:
        out = _pass(tree, cat)
        if out == tree:
            return out
        tree = out


def canonical_key(tree: Expr, catalog: OOSCatalog | None = None) -> str:
    """Fixed-width digest of the simplified tree's canonical string."""
    s = format_expr(oos_simplify(tree, catalog))
    return hashlib.blake2b(s.encode(), digest_size=16).hexdigest()


def is_equivalent(a: Expr, b: Expr, catalog: OOSCatalog | None = None) -> bool:
    return canonical_key(a, catalog) == canonical_key(b, catalog)


def oos_effective_probability(depth: int, n_trees: int, rng: np.random.Generator,
                              catalog: OOSCatalog | None = None) -> float:
    """Fraction of ``n_trees`` random depth-``depth`` trees that simplification shrinks."""
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    hits = 0
    for _ in range(n_trees):
        t = random_tree(rng, depth, depth)
        if node_count(oos_simplify(t, catalog)) < node_count(t):
            hits += 1
    return hits / n_trees


_DEFAULT = default_catalog()
