"""Expression trees for symbolic pruning metrics.

A metric is a tree whose leaves are layer statistics (``W`` weights,
``G`` gradients, ``X`` per-column activation norms) and whose internal
nodes are drawn from a fixed 17-operation vocabulary.  This module holds
the tree type, the string grammar, shape inference, vectorized
evaluation and random generation.

Grammar (``#`` marks the missing operand of a unary op)::

    Expr    := "(" Expr ")" [OpToken "(" Arg ")"] | LeafTok
    Arg     := Expr | "#"
    LeafTok := "W" | "G" | "X"
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterator

import numpy as np

__all__ = [
    "UNARY_OPS", "BINARY_OPS", "OPS", "LEAVES", "ARITY",
    "MATRIX", "ROW",
    "Expr", "node", "W", "G", "X",
    "ExprSyntaxError", "ShapeError", "GenerationError",
    "SafeMath", "parse_expr", "format_expr", "shape_check", "infer_shape",
    "has_unary_over_x", "is_valid", "evaluate", "random_tree",
    "depth", "node_count", "op_histogram", "preorder", "subtree_at", "replace_at",
]

# Vocabulary order is fixed: it is the column order of every op-count vector.
UNARY_OPS = ("sqr", "neg", "abs", "log", "exp", "sqrt", "tanh", "pow",
             "skp", "mms", "zsn", "norm2", "norm1")
BINARY_OPS = ("add", "sub", "mul", "div")
OPS = UNARY_OPS + BINARY_OPS
LEAVES = ("W", "G", "X")
ARITY = {**{op: 1 for op in UNARY_OPS}, **{op: 2 for op in BINARY_OPS},
         **{leaf: 0 for leaf in LEAVES}}

MATRIX = "matrix"
ROW = "row"


@dataclass(frozen=True)
class Expr:
    """One node of an expression tree; leaves have no children."""

    op: str
    children: tuple["Expr", ...] = ()

    def __post_init__(self):
        if self.op not in ARITY:
            raise ValueError(f"unknown operation {self.op!r}")
        if len(self.children) != ARITY[self.op]:
            raise ValueError(
                f"{self.op!r} takes {ARITY[self.op]} operand(s), "
                f"got {len(self.children)}")

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def __str__(self):
        return format_expr(self)

    def __repr__(self):
        return f"Expr({format_expr(self)!r})"


def node(op: str, *children: Expr) -> Expr:
    return Expr(op, tuple(children))


W = Expr("W")
G = Expr("G")
X = Expr("X")


class ExprSyntaxError(ValueError):
    """Malformed expression string; ``offset`` is the byte offset of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class ShapeError(ValueError):
    """Tree does not produce a weight-shaped output; ``path`` locates the node."""

    def __init__(self, message: str, path: str):
        super().__init__(f"{message} (node {path})")
        self.path = path


class GenerationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# grammar
# ---------------------------------------------------------------------------

_TOKEN = re.compile(r"[ \t]*(?:(?P<punct>[()#])|(?P<word>[A-Za-z_][A-Za-z0-9_]*)|(?P<bad>\S))")


def _tokenize(text: str) -> list[tuple[str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:  # trailing whitespace only
            break
        if m.group("bad") is not None:
            raise ExprSyntaxError(f"unexpected character {m.group('bad')!r}", m.start("bad"))
        kind = "punct" if m.group("punct") is not None else "word"
        tokens.append((m.group(kind), m.start(kind)))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        if self.i < len(self.tokens):
            return self.tokens[self.i]
        return None, len(self.text.encode())

    def expect(self, tok: str) -> int:
        got, off = self.peek()
        if got != tok:
            raise ExprSyntaxError(f"expected {tok!r}, found {got or 'end of input'!r}", off)
        self.i += 1
        return off

    def expr(self) -> Expr:
        tok, off = self.peek()
        if tok in LEAVES:
            self.i += 1
            return Expr(tok)
        if tok != "(":
            if tok is not None and tok not in ("(", ")", "#"):
                if tok in OPS:
                    raise ExprSyntaxError(f"operation {tok!r} needs a parenthesized left operand", off)
                raise ExprSyntaxError(f"unknown token {tok!r}", off)
            raise ExprSyntaxError(f"expected expression, found {tok or 'end of input'!r}", off)
        self.i += 1
        left = self.expr()
        self.expect(")")
        op, op_off = self.peek()
        if op is None or op in (")",):
            return left  # redundant parentheses
        if op not in OPS:
            if op in ("(", "#") or op in LEAVES:
                raise ExprSyntaxError(f"expected operation token, found {op!r}", op_off)
            raise ExprSyntaxError(f"unknown token {op!r}", op_off)
        self.i += 1
        self.expect("(")
        arg, arg_off = self.peek()
        if arg == "#":
            self.i += 1
            self.expect(")")
            if ARITY[op] != 1:
                raise ExprSyntaxError(f"binary operation {op!r} given placeholder operand", arg_off)
            return Expr(op, (left,))
        right = self.expr()
        self.expect(")")
        if ARITY[op] != 2:
            raise ExprSyntaxError(f"unary operation {op!r} given a second operand", arg_off)
        return Expr(op, (left, right))


def parse_expr(text: str) -> Expr:
    """Parse an expression string such as ``"((G) mul (W))"``."""
    if not text.isascii():
        bad = next(i for i, ch in enumerate(text) if not ch.isascii())
        raise ExprSyntaxError("non-ASCII character", len(text[:bad].encode()))
    p = _Parser(text)
    tree = p.expr()
    tok, off = p.peek()
    if tok is not None:
        raise ExprSyntaxError(f"trailing input {tok!r}", off)
    return tree


def _body(t: Expr) -> str:
    if t.is_leaf:
        return t.op
    if len(t.children) == 1:
        return f"({_body(t.children[0])}) {t.op} (#)"
    a, b = t.children
    return f"({_body(a)}) {t.op} ({_body(b)})"


def format_expr(tree: Expr) -> str:
    """Canonical string form; a binary root gets one extra pair of parentheses."""
    s = _body(tree)
    return f"({s})" if len(tree.children) == 2 else s


# ---------------------------------------------------------------------------
# structure
# ---------------------------------------------------------------------------

def depth(tree: Expr) -> int:
    if tree.is_leaf:
        return 1
    return 1 + max(depth(c) for c in tree.children)


def node_count(tree: Expr) -> int:
    return 1 + sum(node_count(c) for c in tree.children)


def op_histogram(tree: Expr) -> Counter:
    """Counts of each operation in the tree; leaves are not counted."""
    hist = Counter()
    for _, t in preorder(tree):
        if not t.is_leaf:
            hist[t.op] += 1
    return hist


def preorder(tree: Expr, path: tuple[int, ...] = ()) -> Iterator[tuple[tuple[int, ...], Expr]]:
    """Yield ``(path, subtree)`` in depth-first preorder; the root has path ``()``."""
    yield path, tree
    for i, c in enumerate(tree.children):
        yield from preorder(c, path + (i,))


def subtree_at(tree: Expr, path: tuple[int, ...]) -> Expr:
    for i in path:
        tree = tree.children[i]
    return tree


def replace_at(tree: Expr, path: tuple[int, ...], new: Expr) -> Expr:
    if not path:
        return new
    i = path[0]
    kids = list(tree.children)
    kids[i] = replace_at(kids[i], path[1:], new)
    return Expr(tree.op, tuple(kids))


def _path_str(path) -> str:
    return "root" + "".join(f".{i}" for i in path)


# ---------------------------------------------------------------------------
# shapes
# ---------------------------------------------------------------------------

def infer_shape(tree: Expr, _path=()) -> str:
    """Result shape of any subtree, without the root-must-be-matrix rule."""
    if tree.is_leaf:
        return ROW if tree.op == "X" else MATRIX
    shapes = [infer_shape(c, _path + (i,)) for i, c in enumerate(tree.children)]
    if tree.op in ("norm1", "norm2"):
        return ROW
    if len(shapes) == 1:
        return shapes[0]
    # matrix op row broadcasts the row across rows; row op row stays a row
    return MATRIX if MATRIX in shapes else ROW


def shape_check(tree: Expr) -> str:
    """Return ``MATRIX`` or raise :class:`ShapeError` if the root is not weight-shaped."""
    shape = infer_shape(tree)
    if shape != MATRIX:
        # Walk down to the outermost node that loses the matrix shape.
        path, t = (), tree
        while not t.is_leaf and t.op not in ("norm1", "norm2") and len(t.children) == 1:
            path, t = path + (0,), t.children[0]
        what = ("reduces a matrix to a row vector" if t.op in ("norm1", "norm2")
                else "depends on X only")
        raise ShapeError(f"root evaluates to a row vector: {t.op!r} {what}", _path_str(path))
    return shape


def has_unary_over_x(tree: Expr) -> bool:
    return any(len(t.children) == 1 and t.children[0].op == "X" for _, t in preorder(tree))


def is_valid(tree: Expr) -> bool:
    """Member of the search space: matrix-shaped root and no unary op applied to ``X``."""
    return infer_shape(tree) == MATRIX and not has_unary_over_x(tree)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SafeMath:
    """Domain guards used by :func:`evaluate`.

    ``scale_axis`` selects whether ``mms``/``zsn`` use one global
    min/max (mean/std) over the tensor or one per row.
    """

    eps: float = 1e-8
    scale_axis: str = "global"

    def __post_init__(self):
        if self.scale_axis not in ("global", "row"):
            raise ValueError("scale_axis must be 'global' or 'row'")


DEFAULT_SAFE = SafeMath()


def _reduce_axes(a: np.ndarray, safety: SafeMath):
    if a.ndim == 2 and safety.scale_axis == "row":
        return 1, True
    return None, False


def _mms(a, safety):
    axis, keep = _reduce_axes(a, safety)
    a64 = a.astype(np.float64)
    lo = a64.min(axis=axis, keepdims=keep)
    span = a64.max(axis=axis, keepdims=keep) - lo
    out = np.where(span < safety.eps, 0.0, (a64 - lo) / np.where(span < safety.eps, 1.0, span))
    return out.astype(np.float32)


def _zsn(a, safety):
    axis, keep = _reduce_axes(a, safety)
    a64 = a.astype(np.float64)
    mu = a64.mean(axis=axis, keepdims=keep)
    sd = a64.std(axis=axis, keepdims=keep)
    out = np.where(sd < safety.eps, 0.0, (a64 - mu) / np.where(sd < safety.eps, 1.0, sd))
    return out.astype(np.float32)


def _norm(a, order):
    a64 = np.abs(a.astype(np.float64))
    if a.ndim == 2:
        r = a64.sum(axis=0) if order == 1 else np.sqrt((a64 * a64).sum(axis=0))
    else:
        s = a64.sum() if order == 1 else np.sqrt((a64 * a64).sum())
        r = np.full(a.shape, s)
    return r.astype(np.float32)


def _div(a, b, eps):
    sign = np.where(b < 0, np.float32(-1), np.float32(1))
    return a / (sign * np.maximum(np.abs(b), np.float32(eps)))


def _apply(op, args, safety):
    eps = np.float32(safety.eps)
    if op in BINARY_OPS:
        a, b = args
        if op == "add":
            return a + b
        if op == "sub":
            return a - b
        if op == "mul":
            return a * b
        return _div(a, b, eps)
    (a,) = args
    if op in ("sqr", "pow"):
        return a * a
    if op == "neg":
        return -a
    if op == "abs":
        return np.abs(a)
    if op == "log":
        return np.log(np.abs(a) + eps)
    if op == "exp":
        return np.exp(a)
    if op == "sqrt":
        return np.sqrt(np.abs(a))
    if op == "tanh":
        return np.tanh(a)
    if op == "skp":
        return a
    if op == "mms":
        return _mms(a, safety)
    if op == "zsn":
        return _zsn(a, safety)
    if op == "norm2":
        return _norm(a, 2)
    if op == "norm1":
        return _norm(a, 1)
    raise ValueError(f"unknown operation {op!r}")


def _eval(tree: Expr, leaves: dict, safety: SafeMath) -> np.ndarray:
    if tree.is_leaf:
        return leaves[tree.op]
    args = [_eval(c, leaves, safety) for c in tree.children]
    return np.asarray(_apply(tree.op, args, safety), dtype=np.float32)


def evaluate(tree: Expr, layer, safety: SafeMath = DEFAULT_SAFE) -> tuple[np.ndarray, bool]:
    """Evaluate ``tree`` on one layer's statistics.

    ``layer`` needs ``W``, ``G`` and ``xnorm`` attributes.  Returns the
    float32 saliency matrix (shape of ``W``) and a flag that is False when
    any entry is NaN or infinite.  Non-finite output is not an error.
    """
    shape_check(tree)
    leaves = {
        "W": np.asarray(layer.W, dtype=np.float32),
        "G": np.asarray(layer.G, dtype=np.float32),
        "X": np.asarray(layer.xnorm, dtype=np.float32),
    }
    with np.errstate(all="ignore"):
        out = _eval(tree, leaves, safety)
        out = np.broadcast_to(out, leaves["W"].shape).astype(np.float32, copy=True)
    return out, bool(np.isfinite(out).all())


# ---------------------------------------------------------------------------
# random generation
# ---------------------------------------------------------------------------

_GROW_LEAF_PROB = 0.3
_BINARY_PROB = 0.5


def _draw_leaf(rng, under_unary: bool) -> Expr:
    leaf = LEAVES[rng.integers(len(LEAVES))]
    while under_unary and leaf == "X":
        leaf = LEAVES[rng.integers(len(LEAVES))]
    return Expr(leaf)


def _grow(rng, remaining: int, under_unary: bool, full: bool) -> Expr:
    if remaining == 1 or (not full and rng.random() < _GROW_LEAF_PROB):
        return _draw_leaf(rng, under_unary)
    if rng.random() < _BINARY_PROB:
        op = BINARY_OPS[rng.integers(len(BINARY_OPS))]
        a = _grow(rng, remaining - 1, False, full)
        b = _grow(rng, remaining - 1, False, full)
        return Expr(op, (a, b))
    op = UNARY_OPS[rng.integers(len(UNARY_OPS))]
    return Expr(op, (_grow(rng, remaining - 1, True, full),))


def random_tree(rng: np.random.Generator, depth_min: int, depth_max: int,
                method: str = "grow", max_retries: int = 1000) -> Expr:
    """Draw a valid tree with depth in ``[depth_min, depth_max]``.

    Draw order per attempt: target depth ``d`` uniform in the range, then
    nodes in preorder.  Each internal node draws a binary-vs-unary coin and
    then the op index; in ``"grow"`` mode a leaf coin comes first.  Leaves
    directly under a unary op are redrawn while they come up ``X``.
    Attempts whose depth or root shape is out of bounds are discarded.
    """
    if not 1 <= depth_min <= depth_max:
        raise ValueError(f"invalid depth range [{depth_min}, {depth_max}]")
    if method not in ("grow", "full"):
        raise ValueError("method must be 'grow' or 'full'")
    for _ in range(max_retries):
        d = int(rng.integers(depth_min, depth_max + 1))
        tree = _grow(rng, d, False, method == "full")
        if depth_min <= depth(tree) <= depth_max and infer_shape(tree) == MATRIX:
            return tree
    raise GenerationError(
        f"no valid tree with depth in [{depth_min}, {depth_max}] after {max_retries} attempts")
