"""Category-bucket compression of a long user history.

A history is grouped into one bucket per category (items with several
categories land in each of them), buckets are ranked by the recency of
their newest member, the ``V`` most recent are kept, and each kept bucket
retains at most its ``G`` newest items.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .datalog import Interaction, ItemCatalog

DEFAULT_V = 8
DEFAULT_G = 32


@dataclass(frozen=True)
class Bucket:
    category_id: int
    # (item_id, timestamp, seq_pos), oldest first
    items: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        if not self.items:
            raise ValueError(f"bucket for category {self.category_id} is empty")

    @property
    def last_ts(self) -> tuple[int, int]:
        _, ts, pos = self.items[-1]
        return (ts, pos)

    @property
    def item_ids(self) -> list[int]:
        return [i for i, _, _ in self.items]


@dataclass(frozen=True)
class BucketPlan:
    buckets: tuple[Bucket, ...]
    V_max: int
    G_max: int

    def __len__(self):
        return len(self.buckets)

    @property
    def retained(self) -> int:
        return sum(len(b.items) for b in self.buckets)

    def to_json(self, user_id: int) -> dict:
        return {"user": user_id,
                "buckets": [{"cat": b.category_id, "items": b.item_ids, "ts": [t for _, t, _ in b.items]}
                            for b in self.buckets]}


def group_by_category(history: Iterable[Interaction], catalog: ItemCatalog) -> list[Bucket]:
    groups: dict[int, list[tuple[int, int, int]]] = {}
    for e in history:
        try:
            cats = catalog.categories_of[e.item_id]
        except KeyError:
            raise KeyError(f"item {e.item_id} missing from catalog") from None
        for c in cats:
            groups.setdefault(c, []).append((e.item_id, e.timestamp, e.seq_pos))
    buckets = []
    for c in sorted(groups):
        members = sorted(groups[c], key=lambda m: (m[1], m[2]))
        buckets.append(Bucket(c, tuple(members)))
    return buckets


def select_buckets(buckets: Sequence[Bucket], V: int = DEFAULT_V, G: int = DEFAULT_G) -> BucketPlan:
    if V < 1 or G < 1:
        raise ValueError(f"V and G must be >= 1, got V={V}, G={G}")
    # newest first; equal recency goes to the smaller category id
    ranked = sorted(buckets, key=lambda b: (-b.last_ts[0], -b.last_ts[1], b.category_id))
    kept = [Bucket(b.category_id, b.items[-G:]) for b in ranked[:V]]
    kept.sort(key=lambda b: (b.last_ts, -b.category_id))
    return BucketPlan(tuple(kept), V, G)


def compress(history: Iterable[Interaction], catalog: ItemCatalog,
             V: int = DEFAULT_V, G: int = DEFAULT_G) -> BucketPlan:
    return select_buckets(group_by_category(history, catalog), V, G)


def retained_events(plan: BucketPlan, history: Iterable[Interaction]) -> list[Interaction]:
    """History events that survive in at least one bucket of ``plan``."""
    keep = {(pos, ts) for b in plan.buckets for _, ts, pos in b.items}
    return [e for e in history if (e.seq_pos, e.timestamp) in keep]
