"""Tensor bundles: on-disk layer statistics and synthetic generators.

File layout ("PZB1", little-endian)::

    magic "PZB1" | u32 version=1 | u64 generator_seed | u8 kind |
    u64 created_unix_s | u32 n_layers |
    per layer: u16 name_len, name (UTF-8), u32 rows, u32 cols, u32 n_samples,
               f32 W[rows*cols], f32 G[rows*cols], f32 Xcal[n_samples*cols]

All matrices are row-major.  ``xnorm`` is never stored; it is rederived
from ``Xcal`` on load.  Generators draw from numpy's PCG64 bit generator
(``np.random.default_rng(seed)``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pruner import LayerStats

__all__ = [
    "GAUSSIAN", "MLP", "BundleMeta", "TensorBundle", "BundleFormatError",
    "write_bundle", "read_bundle", "bundle_bytes",
    "gen_gaussian", "ToyMLP", "toy_mlp", "gen_mlp", "mlp_bundle", "fd_check",
]

MAGIC = b"PZB1"
VERSION = 1
GAUSSIAN = 0
MLP = 1
_KIND_NAMES = {GAUSSIAN: "gaussian", MLP: "mlp"}
_MAX_ELEMS = 1 << 31  # per matrix


class BundleFormatError(ValueError):
    pass


@dataclass
class BundleMeta:
    generator_seed: int = 0
    kind: int = GAUSSIAN
    created_unix_s: int = 0


@dataclass
class TensorBundle:
    layers: list[LayerStats] = field(default_factory=list)
    meta: BundleMeta = field(default_factory=BundleMeta)

    def __post_init__(self):
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)


def bundle_bytes(bundle: TensorBundle) -> bytes:
    m = bundle.meta
    if m.kind not in _KIND_NAMES:
        raise ValueError(f"unknown bundle kind {m.kind}")
    parts = [MAGIC, struct.pack("<IQBQI", VERSION, m.generator_seed, m.kind,
                                m.created_unix_s, len(bundle.layers))]
    for layer in bundle.layers:
        for arr in (layer.W, layer.G, layer.Xcal):
            if not np.isfinite(arr).all():
                raise ValueError(f"layer {layer.name!r} holds non-finite values")
        name = layer.name.encode("utf-8")
        rows, cols = layer.W.shape
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(struct.pack("<III", rows, cols, layer.Xcal.shape[0]))
        for arr in (layer.W, layer.G, layer.Xcal):
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def write_bundle(bundle: TensorBundle, path) -> None:
    Path(path).write_bytes(bundle_bytes(bundle))


def read_bundle(path) -> TensorBundle:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise BundleFormatError(f"bad magic {data[:4]!r}: expected {MAGIC!r} (PZB1 bundle)")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise BundleFormatError(f"truncated bundle: need {n} bytes at offset {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    version, seed, kind, created, n_layers = struct.unpack("<IQBQI", take(4 + 8 + 1 + 8 + 4))
    if version != VERSION:
        raise BundleFormatError(f"unsupported PZB1 version {version}; expected {VERSION}")
    if kind not in _KIND_NAMES:
        raise BundleFormatError(f"unknown bundle kind {kind}")
    layers = []
    for _ in range(n_layers):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        rows, cols, n_samples = struct.unpack("<III", take(12))
        if min(rows, cols, n_samples) < 1:
            raise BundleFormatError(f"layer {name!r} has an empty dimension")
        if rows * cols >= _MAX_ELEMS or n_samples * cols >= _MAX_ELEMS:
            raise BundleFormatError(f"layer {name!r} dimensions overflow ({rows}x{cols}, {n_samples} samples)")

        def matrix(r):
            return np.frombuffer(take(4 * r * cols), dtype="<f4").reshape(r, cols).astype(np.float32)

        W = matrix(rows)
        G = matrix(rows)
        Xcal = matrix(n_samples)
        layers.append(LayerStats(name, W, G, Xcal))
    if pos != len(data):
        raise BundleFormatError(f"{len(data) - pos} trailing bytes after last layer")
    return TensorBundle(layers, BundleMeta(seed, kind, created))


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def _column_scales(anisotropy, cols: int) -> np.ndarray:
    if anisotropy is None:
        return np.ones(cols)
    a = np.asarray(anisotropy, dtype=np.float64).ravel()
    if a.size == 0 or cols % a.size:
        raise ValueError(f"anisotropy of length {a.size} does not tile {cols} columns")
    return np.tile(a, cols // a.size)


def gen_gaussian(seed: int, n_layers: int = 2, rows: int = 16, cols: int = 32,
                 n_samples: int = 128, anisotropy=None, created_unix_s: int = 0) -> TensorBundle:
    """I.i.d. standard-normal W, G and Xcal; Xcal columns optionally scaled.

    ``anisotropy`` is a per-column scale vector, tiled if shorter than
    ``cols``.  Layers are drawn in order W, G, Xcal from one generator.
    """
    if min(n_layers, rows, cols, n_samples) < 1:
        raise ValueError("all dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    scale = _column_scales(anisotropy, cols)
    layers = []
    for i in range(n_layers):
        W = rng.standard_normal((rows, cols))
        G = rng.standard_normal((rows, cols))
        Xcal = rng.standard_normal((n_samples, cols)) * scale
        layers.append(LayerStats(f"layer{i}", W, G, Xcal))
    return TensorBundle(layers, BundleMeta(seed, GAUSSIAN, created_unix_s))


@dataclass
class ToyMLP:
    """Two-layer net ``act(X @ W1.T) @ W2.T`` with mean squared loss.

    Loss is ``sum((pred - Y)**2) / n``: squared error summed over outputs,
    averaged over the ``n`` samples.  All math is float64.
    """

    W1: np.ndarray  # (h, d)
    W2: np.ndarray  # (o, h)
    X: np.ndarray   # (n, d)
    Y: np.ndarray   # (n, o)
    activation: str = "tanh"

    def _act(self, z):
        return np.tanh(z) if self.activation == "tanh" else z

    def _act_grad(self, hidden):
        return 1.0 - hidden * hidden if self.activation == "tanh" else np.ones_like(hidden)

    def hidden(self, W1=None):
        W1 = self.W1 if W1 is None else W1
        return self._act(self.X @ W1.T)

    def loss(self, W1=None, W2=None) -> float:
        W2 = self.W2 if W2 is None else W2
        r = self.hidden(W1) @ W2.T - self.Y
        return float((r * r).sum() / self.X.shape[0])

    def grads(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.X.shape[0]
        H = self.hidden()
        r = H @ self.W2.T - self.Y
        g2 = (2.0 / n) * r.T @ H
        delta = (r @ self.W2) * self._act_grad(H)
        g1 = (2.0 / n) * delta.T @ self.X
        return g1, g2


def toy_mlp(seed: int, d: int = 64, h: int = 16, o: int = 8, n_samples: int = 128,
            anisotropy=None, scale_spread: float = 2.0, target_shrink: float = 0.5,
            noise: float = 0.1, activation: str = "tanh") -> ToyMLP:
    """Seeded ToyMLP with heterogeneous feature scales.

    Draw order: input column scales, hidden unit gains, W1, W2, X, target
    noise.  Column scales and unit gains are ``exp(U(-spread, spread))``;
    the inputs are rescaled to unit mean energy.  ``anisotropy`` replaces
    the drawn column scales.  Targets are ``target_shrink * pred + noise``,
    so the loss pulls each weight toward zero in proportion to its
    contribution.  Weights and inputs are rounded to float32 so the stored
    bundle and the analytic model agree.
    """
    if min(d, h, o, n_samples) < 1:
        raise ValueError("all dimensions must be >= 1")
    if activation not in ("tanh", "identity"):
        raise ValueError("activation must be 'tanh' or 'identity'")
    rng = np.random.default_rng(seed)
    f32 = lambda a: a.astype(np.float32).astype(np.float64)  # noqa: E731
    col_scale = np.exp(rng.uniform(-scale_spread, scale_spread, d))
    gain = np.exp(rng.uniform(-scale_spread, scale_spread, h))
    if anisotropy is not None:
        col_scale = _column_scales(anisotropy, d)
    col_scale = col_scale / np.sqrt(np.mean(col_scale ** 2))
    W1 = f32(rng.standard_normal((h, d)) * gain[:, None] / np.sqrt(d))
    W2 = f32(rng.standard_normal((o, h)) / np.sqrt(h))
    X = f32(rng.standard_normal((n_samples, d)) * col_scale)
    mlp = ToyMLP(W1, W2, X, np.zeros((n_samples, o)), activation)
    pred = mlp.hidden() @ W2.T
    mlp.Y = target_shrink * pred + noise * rng.standard_normal((n_samples, o))
    return mlp


def mlp_bundle(mlp: ToyMLP, seed: int = 0, created_unix_s: int = 0) -> TensorBundle:
    g1, g2 = mlp.grads()
    layers = [
        LayerStats("fc1", mlp.W1, g1, mlp.X),
        LayerStats("fc2", mlp.W2, g2, mlp.hidden()),
    ]
    return TensorBundle(layers, BundleMeta(seed, MLP, created_unix_s))


def gen_mlp(seed: int, d: int = 64, h: int = 16, o: int = 8, n_samples: int = 128,
            anisotropy=None, created_unix_s: int = 0, **kwargs) -> TensorBundle:
    """Bundle with the two layers of a seeded :class:`ToyMLP` and its exact gradients.

    Extra keyword arguments go to :func:`toy_mlp`.
    """
    mlp = toy_mlp(seed, d, h, o, n_samples, anisotropy, **kwargs)
    return mlp_bundle(mlp, seed, created_unix_s)


def fd_check(mlp: ToyMLP, step: float, max_weights: int | None = None, seed: int = 0,
             order: int = 4) -> float:
    """Max relative error of the analytic gradients against central differences.

    ``order=4`` uses the five-point stencil
    ``(-f(w+2h) + 8 f(w+h) - 8 f(w-h) + f(w-2h)) / 12h``; ``order=2`` the
    plain ``(f(w+h) - f(w-h)) / 2h``.  Relative error uses
    ``max(|analytic|, 1e-8)`` as denominator.  A layer with more than
    ``max_weights`` weights is checked on a seeded subsample of that size.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    offsets, weights = ((1, -1), (0.5, -0.5)) if order == 2 else \
        ((2, 1, -1, -2), (-1 / 12, 8 / 12, -8 / 12, 1 / 12))
    g1, g2 = mlp.grads()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for which, (Wt, g) in enumerate(((mlp.W1, g1), (mlp.W2, g2))):
        idx = np.arange(Wt.size)
        if max_weights is not None and Wt.size > max_weights:
            idx = np.sort(rng.choice(Wt.size, size=max_weights, replace=False))
        for flat in idx:
            i = np.unravel_index(flat, Wt.shape)
            num = 0.0
            for k, c in zip(offsets, weights):
                shifted = Wt.copy()
                shifted[i] += k * step
                num += c * (mlp.loss(W1=shifted) if which == 0 else mlp.loss(W2=shifted))
            num /= step
            worst = max(worst, abs(num - g[i]) / max(abs(g[i]), 1e-8))
    return worst
