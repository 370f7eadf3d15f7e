"""Shape gymnastics shared by attention-style modules (pure index ops)."""

from __future__ import annotations

from .engine import Tensor, concat, reshape, transpose


def swap_last(t: Tensor) -> Tensor:
    """Transpose the trailing two axes."""
    perm = tuple(range(t.ndim - 2)) + (t.ndim - 1, t.ndim - 2)
    return transpose(t, perm)


def split_heads(t: Tensor, heads: int) -> Tensor:
    """(..., N, D) -> (..., heads, N, D/heads)."""
    *lead, n, d = t.shape
    dh = d // heads
    t = reshape(t, tuple(lead) + (n, heads, dh))
    k = len(lead)
    return transpose(t, tuple(range(k)) + (k + 1, k, k + 2))


def merge_heads(t: Tensor) -> Tensor:
    """(..., heads, N, dh) -> (..., N, heads*dh)."""
    *lead, h, n, dh = t.shape
    k = len(lead)
    t = transpose(t, tuple(range(k)) + (k + 1, k, k + 2))
    return reshape(t, tuple(lead) + (n, h * dh))


def tile_leading(t: Tensor, n: int) -> Tensor:
    """Stack n copies of t along a new leading axis."""
    row = reshape(t, (1,) + t.shape)
    if n == 1:
        return row
    return concat([row] * n, axis=0)
