"""Centrally symmetric convolution kernels with one trainable value per ring.

A kernel of odd side ``k`` is split into concentric rings by rounded
Euclidean distance from its center.  Every pixel of a ring shares the same
coefficient, so the dense kernel is unchanged by any 90 degree rotation or
reflection of the grid.  Offsets whose ring index reaches ``ceil(k / 2)``
(the corners for ``k >= 5``) are masked to zero, which keeps the support
roughly circular.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MASKED = -1
MAX_KERNEL_SIZE = 31


def _check_k(k) -> int:
    if isinstance(k, (bool, np.bool_)) or not isinstance(k, (int, np.integer)):
        raise ValueError(f"kernel size must be an integer, got {k!r}")
    k = int(k)
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {k}")
    if k > MAX_KERNEL_SIZE:
        raise ValueError(f"kernel size must be <= {MAX_KERNEL_SIZE}, got {k}")
    return k


@dataclass(frozen=True)
class RingMap:
    """Ring index of every kernel offset.

    Attributes
    ----------
    k : int
        Odd kernel side length.
    ring_of : ndarray of shape (k, k)
        Ring index per offset, or ``MASKED``.
    bands : int
        Number of trainable rings, ``ceil(k / 2)``.
    cardinality : ndarray of shape (bands,)
        Number of pixels in each ring.
    """

    k: int
    ring_of: np.ndarray
    bands: int
    cardinality: np.ndarray
    # (u, v, ring) for every non-masked offset, row-major order; u, v in [0, k)
    offsets: tuple = field(repr=False)

    @property
    def masked_count(self) -> int:
        return int(np.count_nonzero(self.ring_of == MASKED))

    @property
    def expansion_matrix(self) -> np.ndarray:
        """(k*k, bands) matrix E with dense.ravel() = E @ w."""
        E = np.zeros((self.k * self.k, self.bands))
        flat = self.ring_of.ravel()
        keep = flat != MASKED
        E[np.flatnonzero(keep), flat[keep]] = 1.0 / self.cardinality[flat[keep]]
        return E


_CACHE: dict[int, RingMap] = {}


def ring_index_map(k: int) -> RingMap:
    """Build the ring map for an odd kernel size ``k`` (1 <= k <= 31)."""
    k = _check_k(k)
    if k in _CACHE:
        return _CACHE[k]
    half = (k - 1) // 2
    bands = (k + 1) // 2
    u, v = np.meshgrid(np.arange(-half, half + 1), np.arange(-half, half + 1), indexing="ij")
    # round half up; sqrt of an integer is never exactly n + 0.5
    ring = np.floor(np.sqrt(u * u + v * v) + 0.5).astype(np.int64)
    ring[ring >= bands] = MASKED
    ring.setflags(write=False)
    card = np.bincount(ring[ring != MASKED], minlength=bands).astype(np.int64)
    card.setflags(write=False)
    offsets = tuple(
        (int(i), int(j), int(ring[i, j]))
        for i in range(k)
        for j in range(k)
        if ring[i, j] != MASKED
    )
    rmap = RingMap(k=k, ring_of=ring, bands=bands, cardinality=card, offsets=offsets)
    _CACHE[k] = rmap
    return rmap


def param_count(k: int) -> int:
    """Trainable values per filter for kernel size ``k``."""
    return ring_index_map(k).bands


def expand_kernel(w, ring_map: RingMap) -> np.ndarray:
    """Expand ring weights of shape (..., bands) into dense (..., k, k) kernels.

    Each pixel of ring ``r`` receives ``w[r] / cardinality[r]``; masked
    pixels are zero.
    """
    w = np.asarray(w)
    if w.ndim == 0 or w.shape[-1] != ring_map.bands:
        raise ValueError(
            f"ring weights must have trailing length {ring_map.bands}, got shape {w.shape}"
        )
    if not np.issubdtype(w.dtype, np.floating):
        w = w.astype(np.float64)
    per_ring = w / ring_map.cardinality.astype(w.dtype)
    idx = np.where(ring_map.ring_of == MASKED, 0, ring_map.ring_of)
    dense = per_ring[..., idx]
    dense[..., ring_map.ring_of == MASKED] = 0
    return dense


def fold_gradient(dense_grad, ring_map: RingMap) -> np.ndarray:
    """Adjoint of :func:`expand_kernel`: map (..., k, k) gradients to (..., bands)."""
    g = np.asarray(dense_grad)
    k = ring_map.k
    if g.ndim < 2 or g.shape[-2:] != (k, k):
        raise ValueError(f"dense gradient must end in ({k}, {k}), got shape {g.shape}")
    flat = g.reshape(g.shape[:-2] + (k * k,))
    return flat @ ring_map.expansion_matrix.astype(np.result_type(g.dtype, np.float32))
