"""Interaction logs: loading, writing, history/recent partition, splits, synthesis."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Malformed or inconsistent interaction data."""


class EmptyInputError(DataError):
    pass


@dataclass(frozen=True, slots=True)
class Interaction:
    user_id: int
    item_id: int
    action_id: int
    timestamp: int
    seq_pos: int

    @property
    def key(self) -> tuple[int, int]:
        return (self.timestamp, self.seq_pos)


@dataclass(frozen=True)
class ItemCatalog:
    num_items: int
    num_categories: int
    categories_of: dict[int, tuple[int, ...]]

    def __post_init__(self):
        for item, cats in self.categories_of.items():
            if not 0 <= item < self.num_items:
                raise DataError(f"catalog item {item} outside [0, {self.num_items})")
            if not cats:
                raise DataError(f"item {item} has no categories")
            if list(cats) != sorted(set(cats)):
                raise DataError(f"item {item} categories not sorted/unique: {cats}")
            if cats[0] < 0 or cats[-1] >= self.num_categories:
                raise DataError(f"item {item} category outside [0, {self.num_categories})")

    @classmethod
    def from_lists(cls, cats_per_item: Sequence[Iterable[int]], num_categories: int | None = None):
        mapping = {i: tuple(sorted(set(int(c) for c in cs))) for i, cs in enumerate(cats_per_item)}
        if num_categories is None:
            num_categories = 1 + max((c[-1] for c in mapping.values() if c), default=0)
        return cls(len(mapping), num_categories, mapping)

    def cats(self, item_id: int) -> tuple[int, ...]:
        try:
            return self.categories_of[item_id]
        except KeyError:
            raise KeyError(f"item {item_id} missing from catalog") from None

    def membership_matrix(self) -> np.ndarray:
        """(N, V^C) row-stochastic matrix averaging each item's categories."""
        m = np.zeros((self.num_items, self.num_categories))
        for item, cats in self.categories_of.items():
            m[item, list(cats)] = 1.0 / len(cats)
        return m


@dataclass(frozen=True)
class UserSequence:
    user_id: int
    events: tuple[Interaction, ...]

    def __post_init__(self):
        prev = None
        for e in self.events:
            if e.user_id != self.user_id:
                raise DataError(f"event for user {e.user_id} in sequence of user {self.user_id}")
            if prev is not None and not prev < e.key:
                raise DataError(f"user {self.user_id}: events not strictly increasing at {e.key}")
            prev = e.key

    def __len__(self):
        return len(self.events)


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "leave-one-out"
    thresholds: tuple[int, int] | None = None

    def __post_init__(self):
        if self.mode not in ("leave-one-out", "timestamp-threshold"):
            raise ValueError(f"unknown split mode {self.mode!r}")
        if self.mode == "timestamp-threshold":
            if self.thresholds is None or self.thresholds[0] > self.thresholds[1]:
                raise ValueError("timestamp-threshold needs (train_end, val_end) with train_end <= val_end")


class Split(NamedTuple):
    train: list[UserSequence]
    val: list[UserSequence]
    test: list[UserSequence]
    skipped: int


@dataclass(frozen=True)
class SynthConfig:
    num_users: int = 64
    num_items: int = 256
    num_categories: int = 8
    num_actions: int = 3
    events_per_user: int = 256
    long_range_interest_strength: float = 0.8
    recency_drift: float = 0.05
    seed: int = 0
    # Dirichlet concentration of the per-user category mixtures
    interest_concentration: float = 0.3

    def __post_init__(self):
        for name in ("num_users", "num_items", "num_categories", "num_actions", "events_per_user"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("long_range_interest_strength", "recency_drift"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.interest_concentration <= 0:
            raise ValueError("interest_concentration must be positive")
        if self.num_categories > self.num_items:
            raise ValueError("num_categories must not exceed num_items")


@dataclass
class Meta:
    users: int | None = None
    items: int | None = None
    actions: int | None = None
    categories: int | None = None
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------- loading

def _parse_cats(raw) -> tuple[int, ...]:
    cats = tuple(sorted(set(int(c) for c in raw)))
    if not cats:
        raise DataError("record has no categories")
    return cats


def _read_records(path: Path, fmt: str):
    meta = Meta()
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#meta"):
                try:
                    header = json.loads(line[len("#meta"):])
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: bad #meta header: {exc}") from None
                meta = Meta(header.get("users"), header.get("items"), header.get("actions"),
                            header.get("categories"),
                            {k: v for k, v in header.items() if k not in ("users", "items", "actions", "categories")})
                continue
            try:
                if fmt == "jsonl":
                    obj = json.loads(line)
                    rec = (int(obj["user"]), int(obj["item"]), int(obj["action"]), int(obj["ts"]),
                           _parse_cats(obj["cats"]))
                elif fmt == "tsv":
                    parts = line.split("\t")
                    if len(parts) != 5:
                        raise DataError(f"expected 5 tab-separated fields, got {len(parts)}")
                    u, i, a, t = (int(p) for p in parts[:4])
                    rec = (u, i, a, t, _parse_cats(parts[4].split("|")))
                else:
                    raise ValueError(f"unknown format {fmt!r}")
            except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
                if isinstance(exc, ValueError) and str(exc).startswith("unknown format"):
                    raise
                raise DataError(f"{path}:{lineno}: malformed record: {exc}") from None
            records.append((lineno, rec))
    return meta, records


def load_events(path: str | Path, format: str = "jsonl"):
    """Read an event log; returns ``(sequences, catalog, meta)``.

    Sequences are sorted by user id, and each user's events by
    (timestamp, input order).  Vocabulary sizes come from the ``#meta``
    header when present, otherwise max id + 1.
    """
    path = Path(path)
    meta, records = _read_records(path, format)
    if not records:
        raise EmptyInputError(f"{path}: no interaction records")

    def bound(declared, observed, what, lineno_of):
        if declared is None:
            return observed + 1
        if observed >= declared:
            raise DataError(f"{path}:{lineno_of}: {what} id {observed} outside declared bound {declared}")
        return int(declared)

    for lineno, (u, i, a, t, cats) in records:
        if min(u, i, a) < 0 or cats[0] < 0:
            raise DataError(f"{path}:{lineno}: negative id")
    worst = {}
    for idx, name in enumerate(("users", "items", "actions")):
        lineno, rec = max(records, key=lambda r: r[1][idx])
        worst[name] = (rec[idx], lineno)
    lineno_c, rec_c = max(records, key=lambda r: r[1][4][-1])
    n_users = bound(meta.users, worst["users"][0], "user", worst["users"][1])
    n_items = bound(meta.items, worst["items"][0], "item", worst["items"][1])
    n_actions = bound(meta.actions, worst["actions"][0], "action", worst["actions"][1])
    n_cats = bound(meta.categories, rec_c[4][-1], "category", lineno_c)
    meta = Meta(n_users, n_items, n_actions, n_cats, meta.extra)

    cats_of: dict[int, set[int]] = {}
    per_user: dict[int, list] = {}
    for pos, (_, (u, i, a, t, cats)) in enumerate(records):
        cats_of.setdefault(i, set()).update(cats)
        per_user.setdefault(u, []).append((t, pos, i, a))
    seqs = []
    for u in sorted(per_user):
        rows = sorted(per_user[u])
        events = tuple(Interaction(u, i, a, t, k) for k, (t, _, i, a) in enumerate(rows))
        seqs.append(UserSequence(u, events))
    catalog = ItemCatalog(n_items, n_cats, {i: tuple(sorted(c)) for i, c in sorted(cats_of.items())})
    return seqs, catalog, meta


def write_events(path: str | Path, seqs: Iterable[UserSequence], catalog: ItemCatalog,
                 format: str = "jsonl", meta: Meta | None = None):
    """Write events in the same formats ``load_events`` reads (sorted keys, no trailing space)."""
    path = Path(path)
    lines = []
    if meta is not None:
        header = {k: v for k, v in (("users", meta.users), ("items", meta.items),
                                    ("actions", meta.actions), ("categories", meta.categories))
                  if v is not None}
        header.update(meta.extra)
        lines.append("#meta " + json.dumps(header, sort_keys=True))
    for seq in seqs:
        for e in seq.events:
            cats = catalog.cats(e.item_id)
            if format == "jsonl":
                lines.append(json.dumps({"user": e.user_id, "item": e.item_id, "action": e.action_id,
                                         "ts": e.timestamp, "cats": list(cats)}, sort_keys=True))
            elif format == "tsv":
                lines.append(f"{e.user_id}\t{e.item_id}\t{e.action_id}\t{e.timestamp}\t"
                             + "|".join(str(c) for c in cats))
            else:
                raise ValueError(f"unknown format {format!r}")
    path.write_text("".join(line + "\n" for line in lines))


def write_catalog(path: str | Path, catalog: ItemCatalog, extra: dict | None = None):
    header = {"categories": catalog.num_categories, "items": catalog.num_items}
    header.update(extra or {})
    lines = ["#meta " + json.dumps(header, sort_keys=True)]
    for item in sorted(catalog.categories_of):
        lines.append(json.dumps({"cats": list(catalog.categories_of[item]), "item": item}, sort_keys=True))
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_catalog(path: str | Path) -> ItemCatalog:
    path = Path(path)
    header: dict = {}
    mapping = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                if line.startswith("#meta"):
                    header = json.loads(line[len("#meta"):])
                    continue
                obj = json.loads(line)
                mapping[int(obj["item"])] = _parse_cats(obj["cats"])
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed catalog line: {exc}") from None
    if not mapping:
        raise EmptyInputError(f"{path}: empty catalog")
    n_items = header.get("items", max(mapping) + 1)
    n_cats = header.get("categories", 1 + max(c[-1] for c in mapping.values()))
    return ItemCatalog(int(n_items), int(n_cats), dict(sorted(mapping.items())))


# ---------------------------------------------------------------- partition / split

def partition_history_recent(seq: UserSequence | Sequence[Interaction], ilen: int):
    """Split into (history, recent): recent is the last ``min(ilen, len)`` events."""
    if ilen < 1:
        raise ValueError("iLen must be >= 1")
    events = list(seq.events if isinstance(seq, UserSequence) else seq)
    cut = max(0, len(events) - ilen)
    return events[:cut], events[cut:]


def split(seqs: Iterable[UserSequence], spec: SplitSpec = SplitSpec()) -> Split:
    train, val, test = [], [], []
    skipped = 0
    for seq in seqs:
        ev = seq.events
        if spec.mode == "leave-one-out":
            if len(ev) < 3:
                skipped += 1
                continue
            parts = (ev[:-2], ev[-2:-1], ev[-1:])
        else:
            t_train, t_val = spec.thresholds
            parts = (tuple(e for e in ev if e.timestamp < t_train),
                     tuple(e for e in ev if t_train <= e.timestamp < t_val),
                     tuple(e for e in ev if e.timestamp >= t_val))
        for bucket, part in zip((train, val, test), parts):
            bucket.append(UserSequence(seq.user_id, tuple(part)))
    if skipped:
        log.warning("split: skipped %d user(s) with fewer than 3 events", skipped)
    return Split(train, val, test, skipped)


# ---------------------------------------------------------------- synthesis

def generate_synthetic(cfg: SynthConfig):
    """Mixture-of-categories users; returns ``(sequences, catalog)``.

    Each user holds a stable category mixture and a drifting one.  Every
    event draws a category from ``s * stable + (1 - s) * drifting`` and an
    item uniformly from that category.  The drifting mixture relaxes toward
    a fresh Dirichlet draw at rate ``recency_drift`` after each event.
    Actions depend on the category, so they are predictable from items.
    """
    rng = np.random.default_rng(cfg.seed)
    C, N = cfg.num_categories, cfg.num_items

    # every category gets at least one item through the first-category permutation
    first = rng.permutation(np.arange(N) % C)
    cats_per_item = []
    for i in range(N):
        k = int(rng.integers(1, min(3, C) + 1))
        others = rng.choice(np.delete(np.arange(C), first[i]), size=k - 1, replace=False) if k > 1 else []
        cats_per_item.append(sorted({int(first[i]), *map(int, others)}))
    catalog = ItemCatalog.from_lists(cats_per_item, C)
    members = [[] for _ in range(C)]
    for i, cs in enumerate(cats_per_item):
        for c in cs:
            members[c].append(i)
    members = [np.asarray(m) for m in members]
    action_probs = rng.dirichlet(np.full(cfg.num_actions, 0.5), size=C)

    s = cfg.long_range_interest_strength
    alpha = np.full(C, cfg.interest_concentration)
    seqs = []
    for u in range(cfg.num_users):
        stable = rng.dirichlet(alpha)
        drifting = rng.dirichlet(alpha)
        gaps = rng.integers(1, 100, size=cfg.events_per_user)
        ts = np.cumsum(gaps)
        events = []
        for k in range(cfg.events_per_user):
            p = s * stable + (1.0 - s) * drifting
            c = int(rng.choice(C, p=p / p.sum()))
            item = int(members[c][rng.integers(len(members[c]))])
            action = int(rng.choice(cfg.num_actions, p=action_probs[c]))
            events.append(Interaction(u, item, action, int(ts[k]), k))
            if cfg.recency_drift > 0:
                drifting = (1 - cfg.recency_drift) * drifting + cfg.recency_drift * rng.dirichlet(alpha)
        seqs.append(UserSequence(u, tuple(events)))
    return seqs, catalog


def synth_meta(cfg: SynthConfig) -> Meta:
    return Meta(cfg.num_users, cfg.num_items, cfg.num_actions, cfg.num_categories)
