"""Fixed-size grouping of first-quantizer code sequences."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

GROUP_SIZES = (1, 2, 4, 8)


@dataclass(frozen=True)
class GroupedCodes:
    group_size: int
    groups: tuple[tuple[int, ...], ...]
    clipped: int = 0

    def __len__(self) -> int:
        return len(self.groups)


def check_group_size(G: int) -> int:
    if G not in GROUP_SIZES:
        raise ValueError(f"group size must be one of {GROUP_SIZES}, got {G}")
    return G


def partition_into_groups(codes: Sequence[int], G: int) -> GroupedCodes:
    """Drop ``len(codes) % G`` codes from the start, then cut into G-tuples."""
    check_group_size(G)
    codes = [int(c) for c in codes]
    if len(codes) < G:
        raise ValueError(f"sequence shorter than one group ({len(codes)} < {G})")
    clipped = len(codes) % G
    rest = codes[clipped:]
    groups = tuple(tuple(rest[i:i + G]) for i in range(0, len(rest), G))
    return GroupedCodes(G, groups, clipped)


def flatten_groups(g: GroupedCodes) -> list[int]:
    return [c for group in g.groups for c in group]
