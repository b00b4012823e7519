"""Four-way spatial scanning of feature maps, channel split and channel shuffle.

Feature maps are channels-last ``[B, H, W, C]``. Scan expansion flattens a map
into four sequences of length ``H*W`` in the fixed order

    0: row-major forward     1: row-major reverse
    2: column-major forward  3: column-major reverse

and scan merging inverts each reindexing and sums the four maps.
"""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, as_tensor, concat, permute
from .errors import ContractError, DimensionError

NUM_DIRECTIONS = 4


def direction_permutations(height: int, width: int) -> np.ndarray:
    """``[4, H*W]`` array; row ``k`` lists flat (row-major) positions in scan order ``k``."""
    rows = np.arange(height * width)
    cols = rows.reshape(height, width).T.reshape(-1)
    return np.stack([rows, rows[::-1], cols, cols[::-1]])


def scan_expand(x) -> Tensor:
    """``[B, H, W, C] -> [B, 4, H*W, C]``."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"scan_expand expects [B, H, W, C], got {x.shape}")
    b, h, w, c = x.shape
    perms = direction_permutations(h, w)
    inverse = np.argsort(perms, axis=1)
    flat = x.data.reshape(b, h * w, c)
    out = np.stack([flat[:, p] for p in perms], axis=1)

    def backward(g):
        parts = [g[:, k][:, inverse[k]] for k in range(NUM_DIRECTIONS)]
        return (((parts[0] + parts[1]) + (parts[2] + parts[3])).reshape(b, h, w, c),)
    return Tensor.from_op(out, (x,), backward, "scan_expand")


def scan_merge(seqs, height: int, width: int) -> Tensor:
    """``[B, 4, H*W, C] -> [B, H, W, C]``: undo each scan order, then sum."""
    seqs = as_tensor(seqs)
    if seqs.ndim != 4 or seqs.shape[1] != NUM_DIRECTIONS:
        raise DimensionError(f"scan_merge expects [B, 4, L, C], got {seqs.shape}")
    b, _, L, c = seqs.shape
    if L != height * width:
        raise DimensionError(f"sequence length {L} != {height}*{width}")
    perms = direction_permutations(height, width)
    inverse = np.argsort(perms, axis=1)
    parts = [seqs.data[:, k][:, inverse[k]] for k in range(NUM_DIRECTIONS)]
    # pairwise sum keeps merge(expand(x)) == 4*x exact
    out = ((parts[0] + parts[1]) + (parts[2] + parts[3])).reshape(b, height, width, c)

    def backward(g):
        flat = g.reshape(b, L, c)
        return (np.stack([flat[:, p] for p in perms], axis=1),)
    return Tensor.from_op(out, (seqs,), backward, "scan_merge")


def channel_split(x) -> tuple[Tensor, Tensor]:
    x = as_tensor(x)
    c = x.shape[-1]
    if c % 2:
        raise ContractError(f"channel split needs an even channel count, got {c}")
    return x[..., : c // 2], x[..., c // 2:]


def shuffle_permutation(channels: int, groups: int) -> np.ndarray:
    """Output channel ``i`` takes input channel ``perm[i]``."""
    if groups < 1 or channels % groups:
        raise ContractError(f"{channels} channels are not divisible into {groups} groups")
    return np.arange(channels).reshape(groups, channels // groups).T.reshape(-1)


def channel_shuffle(x, groups: int = 2) -> Tensor:
    x = as_tensor(x)
    return permute(x, shuffle_permutation(x.shape[-1], groups), axis=-1)


def channel_concat(a: Tensor, b: Tensor) -> Tensor:
    return concat([a, b], axis=-1)
