"""Overlapping band grouping: split a cube's spectral axis, merge it back."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class GroupSpec:
    intervals: tuple  # ((start, end), ...) half-open, in band order
    group_size: int
    overlap: int

    @property
    def n_bands(self) -> int:
        return self.intervals[-1][1]

    def __len__(self) -> int:
        return len(self.intervals)

    def coverage(self) -> np.ndarray:
        """How many intervals contain each band."""
        counts = np.zeros(self.n_bands, dtype=np.int64)
        for a, b in self.intervals:
            counts[a:b] += 1
        return counts

    def to_dict(self) -> dict:
        return {"intervals": [list(iv) for iv in self.intervals],
                "group_size": self.group_size, "overlap": self.overlap}

    @classmethod
    def from_dict(cls, d: dict) -> "GroupSpec":
        return cls(tuple(tuple(iv) for iv in d["intervals"]), d["group_size"], d["overlap"])


def make_groups(n_bands: int, group_size: int, overlap: int) -> GroupSpec:
    """Partition ``[0, n_bands)`` into fixed-width groups sharing ``overlap`` bands.

    Starts advance by ``group_size - overlap``; the last group is shifted
    back to end exactly at ``n_bands`` rather than being shortened, so it may
    overlap its neighbour by more than ``overlap``.

    >>> make_groups(103, 32, 8).intervals
    ((0, 32), (24, 56), (48, 80), (71, 103))
    """
    if n_bands < 1:
        raise ConfigError(f"band count must be positive, got {n_bands}")
    if group_size < 1:
        raise ConfigError(f"group size must be positive, got {group_size}")
    if overlap < 0 or overlap >= group_size:
        raise ConfigError(f"overlap must satisfy 0 <= overlap < group_size, got {overlap} with size {group_size}")
    if group_size > n_bands:
        warnings.warn(f"group size {group_size} exceeds band count {n_bands}; using one group", stacklevel=2)
        return GroupSpec(((0, n_bands),), n_bands, overlap)
    stride = group_size - overlap
    starts = []
    s = 0
    while True:
        if s + group_size >= n_bands:
            starts.append(n_bands - group_size)
            break
        starts.append(s)
        s += stride
    return GroupSpec(tuple((a, a + group_size) for a in starts), group_size, overlap)


def single_group(n_bands: int) -> GroupSpec:
    return GroupSpec(((0, n_bands),), n_bands, 0)


def split(cube: np.ndarray, spec: GroupSpec) -> list:
    if cube.shape[-1] != spec.n_bands:
        raise ShapeError(f"cube has {cube.shape[-1]} bands, group spec covers {spec.n_bands}", axis="bands")
    return [cube[..., a:b] for a, b in spec.intervals]


def split_backward(dgroups, spec: GroupSpec) -> np.ndarray:
    out = np.zeros(dgroups[0].shape[:-1] + (spec.n_bands,), dtype=dgroups[0].dtype)
    for (a, b), g in zip(spec.intervals, dgroups):
        out[..., a:b] += g
    return out


def merge(groups, spec: GroupSpec, n_bands: int | None = None) -> np.ndarray:
    """Average overlapping group predictions back into a full cube.

    A running mean is accumulated in interval order, which leaves values
    untouched wherever the groups agree (so ``merge(split(x)) == x``
    exactly).
    """
    n_bands = spec.n_bands if n_bands is None else n_bands
    if n_bands != spec.n_bands:
        raise ShapeError(f"requested {n_bands} bands, group spec covers {spec.n_bands}", axis="bands")
    if len(groups) != len(spec.intervals):
        raise ShapeError(f"expected {len(spec.intervals)} groups, got {len(groups)}", axis="groups")
    lead = groups[0].shape[:-1]
    for k, ((a, b), g) in enumerate(zip(spec.intervals, groups)):
        if g.shape != lead + (b - a,):
            raise ShapeError(f"group {k} has shape {g.shape}, expected {lead + (b - a,)}", axis="spatial")
    out = np.zeros(lead + (n_bands,), dtype=np.result_type(*groups))
    count = np.zeros(n_bands, dtype=out.dtype)
    for (a, b), g in zip(spec.intervals, groups):
        count[a:b] += 1
        out[..., a:b] += (g - out[..., a:b]) / count[a:b]
    return out


def merge_backward(dout: np.ndarray, spec: GroupSpec) -> list:
    inv = (1.0 / spec.coverage()).astype(dout.dtype)
    scaled = dout * inv
    return [scaled[..., a:b] for a, b in spec.intervals]
