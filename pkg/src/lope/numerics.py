"""Deterministic dense linear algebra, seeded random streams, and a
finite-difference gradient oracle.

All arrays are 2-D float64 unless stated otherwise.  ``matmul`` fixes the
accumulation order so results are bit-identical to a naive triple loop;
everything downstream inherits run-to-run reproducibility from that and
from :class:`RngStream`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

#: Vectors with a Euclidean norm below this are treated as zero by
#: :func:`cosine_sim`.
NORM_FLOOR = 1e-12


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed accumulation order.

    Every output element accumulates its partial sums over the inner
    dimension left to right, one rounding per multiply and one per add, so
    the result is bit-identical to a naive triple loop (no FMA, no
    reassociation) and therefore reproducible across runs.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[k, :]
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("matmul produced non-finite entries")
    return out


def softmax(v: np.ndarray) -> np.ndarray:
    """Numerically stable softmax (max subtraction).

    Accepts a 1-D vector or a 2-D array (applied row-wise).  Output entries
    are positive and sum to 1 along the last axis.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax requires finite entries")
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cosine_sim(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity of two equal-length 1-D vectors, clamped to [-1, 1].

    Returns 0.0 when either vector has norm below ``NORM_FLOOR``: a
    (near-)zero vector carries no directional information.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.ndim != 1 or v.ndim != 1:
        raise ValueError(f"cosine_sim expects 1-D vectors, got shapes {u.shape} and {v.shape}")
    if u.shape != v.shape:
        raise ValueError(f"cosine_sim length mismatch: {u.shape[0]} vs {v.shape[0]}")
    # Scale out magnitudes first: cosine is scale-invariant and the raw
    # norms can overflow for extreme inputs.
    su = float(np.abs(u).max(initial=0.0))
    sv = float(np.abs(v).max(initial=0.0))
    if su == 0.0 or sv == 0.0:
        return 0.0
    un = u / su
    vn = v / sv
    nu = float(np.linalg.norm(un))
    nv = float(np.linalg.norm(vn))
    if nu * su < NORM_FLOOR or nv * sv < NORM_FLOOR:
        return 0.0
    return min(1.0, max(-1.0, float(np.dot(un, vn)) / (nu * nv)))


def row_cosine_sim(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity of two (m, d) arrays, zero-norm rows -> 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"row_cosine_sim shape mismatch: {a.shape} vs {b.shape}")
    sa = np.abs(a).max(axis=1)
    sb = np.abs(b).max(axis=1)
    ok = (sa > 0) & (sb > 0)
    out = np.zeros(a.shape[0])
    if np.any(ok):
        an = a[ok] / sa[ok, None]
        bn = b[ok] / sb[ok, None]
        na = np.sqrt(np.sum(an * an, axis=1))
        nb = np.sqrt(np.sum(bn * bn, axis=1))
        good = (na * sa[ok] >= NORM_FLOOR) & (nb * sb[ok] >= NORM_FLOOR)
        dots = np.sum(an * bn, axis=1)
        vals = np.where(good, np.clip(dots / (na * nb), -1.0, 1.0), 0.0)
        out[ok] = vals
    return out


def finite_diff_grad(f: Callable[[np.ndarray], float], p: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar field ``f`` at 1-D point ``p``.

    grad[k] = (f(p + h e_k) - f(p - h e_k)) / 2h.  Raises if any evaluation
    is non-finite, naming the offending coordinate.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError(f"finite_diff_grad expects a 1-D point, got shape {p.shape}")
    grad = np.zeros_like(p)
    for k in range(p.size):
        step = np.zeros_like(p)
        step[k] = h
        fp = float(f(p + step))
        fm = float(f(p - step))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite evaluation of f at coordinate {k}")
        grad[k] = (fp - fm) / (2.0 * h)
    return grad


@dataclass(frozen=True)
class RngStream:
    """A deterministic random stream addressed by (seed, path).

    Streams are pure values: ``generator()`` always rebuilds the same
    generator for the same address, and ``child(*ids)`` derives a
    statistically independent stream.  Because the address fully determines
    the bit stream, serialising a stream amounts to storing the two fields.
    """

    seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if any(not 0 <= int(k) < 2**32 for k in self.path):
            raise ValueError(f"stream ids must fit in 32 bits, got path {self.path}")

    def child(self, *ids: int) -> "RngStream":
        """Derive an independent sub-stream by extending the path."""
        return RngStream(self.seed, self.path + tuple(int(k) for k in ids))

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.path)
        return np.random.Generator(np.random.PCG64(ss))

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self.generator().normal(0.0, scale, size=shape)
