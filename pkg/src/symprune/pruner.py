"""Saliency-to-mask conversion, layer reconstruction error and built-in metrics."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .exprcore import Expr, parse_expr

__all__ = [
    "LayerStats", "Unstructured", "Structured", "SparsityPattern", "parse_pattern",
    "SparsityMask", "unstructured_mask", "nm_mask", "make_mask", "apply_mask",
    "recon_error", "BUILTIN_EXPRS", "builtin_metric",
    "MaskFormatError", "write_masks", "read_masks",
]


def column_norms(Xcal: np.ndarray) -> np.ndarray:
    """Per-column l2 norm, accumulated in float64 and stored as float32."""
    x = np.asarray(Xcal, dtype=np.float64)
    return np.sqrt((x * x).sum(axis=0)).astype(np.float32)


@dataclass
class LayerStats:
    """One linear layer: weights, gradients and calibration inputs (one sample per row)."""

    name: str
    W: np.ndarray
    G: np.ndarray
    Xcal: np.ndarray
    xnorm: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.W = np.ascontiguousarray(self.W, dtype=np.float32)
        self.G = np.ascontiguousarray(self.G, dtype=np.float32)
        self.Xcal = np.ascontiguousarray(self.Xcal, dtype=np.float32)
        if self.W.ndim != 2 or self.W.shape != self.G.shape:
            raise ValueError(f"layer {self.name!r}: W and G must be equal-shape matrices")
        if self.Xcal.ndim != 2 or self.Xcal.shape[1] != self.W.shape[1]:
            raise ValueError(f"layer {self.name!r}: Xcal must have {self.W.shape[1]} columns")
        if min(self.W.shape) < 1 or self.Xcal.shape[0] < 1:
            raise ValueError(f"layer {self.name!r}: empty dimension")
        self.xnorm = column_norms(self.Xcal)

    @property
    def shape(self):
        return self.W.shape


# ---------------------------------------------------------------------------
# patterns and masks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Unstructured:
    ratio: float

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"sparsity ratio must lie in [0, 1], got {self.ratio}")

    def __str__(self):
        return f"{self.ratio:g}"


@dataclass(frozen=True)
class Structured:
    n: int
    m: int

    def __post_init__(self):
        if not 0 < self.n < self.m:
            raise ValueError(f"N:M pattern needs 0 < N < M, got {self.n}:{self.m}")

    def __str__(self):
        return f"{self.n}:{self.m}"


SparsityPattern = Union[Unstructured, Structured]


def parse_pattern(text: str) -> SparsityPattern:
    """``"0.5"`` -> unstructured, ``"2:4"`` -> N:M."""
    if ":" in text:
        n, m = text.split(":", 1)
        return Structured(int(n), int(m))
    return Unstructured(float(text))


@dataclass
class SparsityMask:
    keep: np.ndarray
    pattern: SparsityPattern

    @property
    def sparsity(self) -> float:
        return 1.0 - float(self.keep.mean()) if self.keep.size else 0.0


def _check_finite(S):
    S = np.asarray(S)
    if S.ndim != 2:
        raise ValueError("saliency must be a matrix")
    if not np.isfinite(S).all():
        raise ValueError("saliency contains non-finite entries")
    return S


def n_pruned(ratio: float, count: int) -> int:
    # guard against 0.7 * 10 -> 6.999... style float error
    return min(count, int(math.floor(ratio * count + 1e-9)))


def unstructured_mask(S, ratio: float, scope: str = "row") -> SparsityMask:
    """Prune the ``floor(ratio * cols)`` lowest-saliency entries of each row.

    Ties prune the lower column index first.  ``scope="layer"`` ranks the
    whole matrix at once instead (ties by flat row-major index).
    """
    S = _check_finite(S)
    pattern = Unstructured(ratio)
    rows, cols = S.shape
    keep = np.ones(S.shape, dtype=bool)
    if scope == "row":
        k = n_pruned(ratio, cols)
        if k:
            order = np.argsort(S, axis=1, kind="stable")[:, :k]
            np.put_along_axis(keep, order, False, axis=1)
    elif scope == "layer":
        k = n_pruned(ratio, S.size)
        if k:
            order = np.argsort(S, axis=None, kind="stable")[:k]
            keep.reshape(-1)[order] = False
    else:
        raise ValueError("scope must be 'row' or 'layer'")
    return SparsityMask(keep, pattern)


def nm_mask(S, n: int, m: int) -> SparsityMask:
    """Keep the ``n`` largest of every aligned group of ``m`` columns in each row."""
    pattern = Structured(n, m)
    S = _check_finite(S)
    rows, cols = S.shape
    if cols % m:
        raise ValueError(f"{cols} columns are not divisible into groups of {m}")
    groups = S.reshape(rows, cols // m, m)
    keep = np.ones(groups.shape, dtype=bool)
    order = np.argsort(groups, axis=2, kind="stable")[:, :, : m - n]
    np.put_along_axis(keep, order, False, axis=2)
    return SparsityMask(keep.reshape(rows, cols), pattern)


def make_mask(S, pattern: SparsityPattern, scope: str = "row") -> SparsityMask:
    if isinstance(pattern, Structured):
        return nm_mask(S, pattern.n, pattern.m)
    return unstructured_mask(S, pattern.ratio, scope=scope)


def _keep(mask) -> np.ndarray:
    return mask.keep if isinstance(mask, SparsityMask) else np.asarray(mask, dtype=bool)


def apply_mask(W, mask) -> np.ndarray:
    W = np.asarray(W)
    keep = _keep(mask)
    if keep.shape != W.shape:
        raise ValueError(f"mask shape {keep.shape} does not match weights {W.shape}")
    return np.where(keep, W, np.zeros((), dtype=W.dtype))


def recon_error(layer: LayerStats, mask) -> float:
    """Squared Frobenius gap between ``Xcal @ W.T`` and ``Xcal @ (mask * W).T``.

    Computed from the removed weights directly, so an all-keep mask gives
    exactly zero.
    """
    keep = _keep(mask)
    if keep.shape != layer.W.shape:
        raise ValueError(f"mask shape {keep.shape} does not match weights {layer.W.shape}")
    removed = np.where(keep, 0.0, layer.W.astype(np.float64))
    diff = layer.Xcal.astype(np.float64) @ removed.T
    return float(np.einsum("ij,ij->", diff, diff))


# ---------------------------------------------------------------------------
# built-in metrics
# ---------------------------------------------------------------------------

BUILTIN_EXPRS = {
    "magnitude": "(W) abs (#)",
    "wanda": "(((W) abs (#)) mul (X))",
    "gblm1": "(((W) abs (#)) mul ((G) norm1 (#)))",
    "gblm2": "(((W) abs (#)) mul ((G) norm2 (#)))",
    "prunerzero": "(((((W) abs (#)) mul ((W) abs (#))) abs (#)) mul (((G) abs (#)) mms (#)))",
}


def builtin_metric(name: str) -> Expr:
    try:
        return parse_expr(BUILTIN_EXPRS[name])
    except KeyError:
        raise KeyError(f"unknown metric {name!r}; choose from {', '.join(BUILTIN_EXPRS)}") from None


# ---------------------------------------------------------------------------
# mask files ("PZM1")
# ---------------------------------------------------------------------------

MASK_MAGIC = b"PZM1"
MASK_VERSION = 1


class MaskFormatError(ValueError):
    pass


def write_masks(path, masks) -> None:
    """Write ``{name: keep}`` (bool matrices or SparsityMask) in order."""
    out = [MASK_MAGIC, struct.pack("<II", MASK_VERSION, len(masks))]
    for name, mask in masks.items():
        keep = _keep(mask)
        if keep.ndim != 2:
            raise ValueError(f"mask {name!r} is not a matrix")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<II", *keep.shape))
        out.append(keep.astype(np.uint8).tobytes(order="C"))
    Path(path).write_bytes(b"".join(out))


def read_masks(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MASK_MAGIC:
        raise MaskFormatError(f"not a mask file: expected magic {MASK_MAGIC!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise MaskFormatError("truncated mask file")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    version, n_layers = struct.unpack("<II", take(8))
    if version != MASK_VERSION:
        raise MaskFormatError(f"unsupported mask file version {version}")
    masks = {}
    for _ in range(n_layers):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        rows, cols = struct.unpack("<II", take(8))
        raw = np.frombuffer(take(rows * cols), dtype=np.uint8)
        if raw.size and raw.max() > 1:
            raise MaskFormatError(f"mask {name!r} holds bytes other than 0/1")
        masks[name] = raw.reshape(rows, cols).astype(bool)
    if pos != len(data):
        raise MaskFormatError("trailing bytes after last mask")
    return masks
