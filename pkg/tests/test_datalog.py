import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cause.datalog import (DataError, EmptyInputError, Interaction, ItemCatalog, Meta, SplitSpec,
                           SynthConfig, UserSequence, generate_synthetic, load_catalog, load_events,
                           partition_history_recent, split, write_catalog, write_events)

FIX = Path(__file__).parent / "fixtures"


def seq_of(user, n, t0=0):
    return UserSequence(user, tuple(Interaction(user, k, 0, t0 + k, k) for k in range(n)))


def test_load_sorts_and_counts():
    seqs, cat, meta = load_events(FIX / "two_users.jsonl")
    assert [len(s) for s in seqs] == [4, 2]
    assert cat.num_items == 8 and meta.items == 8
    assert [e.timestamp for e in seqs[0].events] == [5, 10, 20, 20]
    # timestamp tie at 20 keeps file order: item 3 before item 5
    assert [e.item_id for e in seqs[0].events] == [7, 3, 3, 5]
    assert [e.seq_pos for e in seqs[0].events] == [0, 1, 2, 3]


def test_three_records_sorted_by_time(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("".join(json.dumps({"user": 0, "item": i, "action": 0, "ts": t, "cats": [0]}) + "\n"
                         for i, t in enumerate([5, 2, 9])))
    seqs, _, _ = load_events(p)
    assert [e.timestamp for e in seqs[0].events] == [2, 5, 9]


def test_categories_deduplicated_and_sorted():
    _, cat, _ = load_events(FIX / "two_users.jsonl")
    assert cat.cats(5) == (0, 2)
    assert cat.num_categories == 3


def test_tsv_format():
    seqs, cat, _ = load_events(FIX / "small.tsv", format="tsv")
    assert [len(s) for s in seqs] == [2, 1]
    assert cat.cats(7) == (0, 2)


def test_malformed_record_reports_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"user": 0, "item": 1, "action": 0, "ts": 1, "cats": [0]}\n{"user": 0, "item": 1}\n')
    with pytest.raises(DataError, match=":2:"):
        load_events(p)


def test_declared_bounds_enforced(tmp_path):
    p = tmp_path / "b.jsonl"
    p.write_text('#meta {"items": 2}\n{"user": 0, "item": 5, "action": 0, "ts": 1, "cats": [0]}\n')
    with pytest.raises(DataError, match="item id 5"):
        load_events(p)


def test_header_declares_vocab(tmp_path):
    p = tmp_path / "h.jsonl"
    p.write_text('#meta {"actions": 4, "categories": 9, "items": 10, "users": 3}\n'
                 '{"user": 0, "item": 5, "action": 0, "ts": 1, "cats": [0]}\n')
    _, cat, meta = load_events(p)
    assert (meta.users, meta.items, meta.actions, meta.categories) == (3, 10, 4, 9)
    assert cat.num_items == 10 and cat.num_categories == 9


def test_empty_file(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    with pytest.raises(EmptyInputError):
        load_events(p)


@pytest.mark.parametrize("fmt", ["jsonl", "tsv"])
def test_round_trip(tmp_path, fmt):
    seqs, cat = generate_synthetic(SynthConfig(num_users=5, num_items=20, num_categories=4, events_per_user=12))
    p = tmp_path / f"r.{fmt}"
    write_events(p, seqs, cat, format=fmt, meta=Meta(5, 20, 3, 4))
    back, cat2, _ = load_events(p, format=fmt)
    key = lambda ss: sorted((e.user_id, e.item_id, e.action_id, e.timestamp) for s in ss for e in s.events)
    assert key(back) == key(seqs)
    assert all(cat2.cats(i) == cat.cats(i) for i in cat2.categories_of)
    p2 = tmp_path / f"r2.{fmt}"
    write_events(p2, back, cat2, format=fmt, meta=Meta(5, 20, 3, 4))
    assert p2.read_bytes() == p.read_bytes()
    assert not any(line != line.rstrip() for line in p.read_text().splitlines())


def test_catalog_round_trip(tmp_path):
    cat = ItemCatalog.from_lists([[0], [1, 2], [2]], 4)
    write_catalog(tmp_path / "c.jsonl", cat)
    back = load_catalog(tmp_path / "c.jsonl")
    assert back == cat


def test_partition_examples():
    h, r = partition_history_recent(seq_of(0, 10), 4)
    assert len(h) == 6 and len(r) == 4
    h, r = partition_history_recent(seq_of(0, 3), 8)
    assert h == [] and len(r) == 3
    assert partition_history_recent(UserSequence(0, ()), 5) == ([], [])


@given(n=st.integers(0, 60), ilen=st.integers(1, 70))
def test_partition_properties(n, ilen):
    s = seq_of(1, n)
    h, r = partition_history_recent(s, ilen)
    assert len(r) <= ilen
    assert len(h) + len(r) == n
    assert tuple(h + r) == s.events


def test_leave_one_out():
    sp = split([seq_of(0, 5)])
    assert [len(sp.train[0]), len(sp.val[0]), len(sp.test[0])] == [3, 1, 1]
    assert sp.test[0].events[0].seq_pos == 4


def test_timestamp_threshold_split():
    s = UserSequence(0, tuple(Interaction(0, k, 0, t, k) for k, t in enumerate([50, 150, 250])))
    sp = split([s], SplitSpec("timestamp-threshold", (100, 200)))
    assert [len(sp.train[0]), len(sp.val[0]), len(sp.test[0])] == [1, 1, 1]


def test_split_skips_short_users():
    seqs, _, _ = load_events(FIX / "ten_users.jsonl")
    sp = split(seqs)
    assert len(sp.val) == len(sp.test) == 8
    assert sp.skipped == 2


@given(n=st.integers(3, 30), t1=st.integers(0, 40), dt=st.integers(0, 40))
def test_split_disjoint_and_exhaustive(n, t1, dt):
    s = seq_of(0, n)
    for spec in (SplitSpec(), SplitSpec("timestamp-threshold", (t1, t1 + dt))):
        tr, va, te, _ = split([s], spec)
        parts = tr[0].events + va[0].events + te[0].events
        assert sorted(e.seq_pos for e in parts) == list(range(n))


def test_synthetic_determinism(tmp_path):
    cfg = SynthConfig(num_users=8, num_items=40, num_categories=5, events_per_user=30, seed=7)
    for name in ("a", "b"):
        seqs, cat = generate_synthetic(cfg)
        write_events(tmp_path / f"{name}.jsonl", seqs, cat)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_synthetic_shape_and_bounds():
    cfg = SynthConfig(num_users=64, num_items=256, num_categories=8, events_per_user=256, seed=1)
    seqs, cat = generate_synthetic(cfg)
    assert len(seqs) == 64 and all(len(s) == 256 for s in seqs)
    assert set(cat.categories_of) == set(range(256))
    assert all(1 <= len(c) <= 3 for c in cat.categories_of.values())
    assert {c for cs in cat.categories_of.values() for c in cs} == set(range(8))
    for s in seqs:
        ts = [e.timestamp for e in s.events]
        assert all(a < b for a, b in zip(ts, ts[1:]))
        assert all(0 <= e.item_id < 256 and 0 <= e.action_id < 3 for e in s.events)


def test_synthetic_config_errors():
    with pytest.raises(ValueError):
        SynthConfig(num_items=4, num_categories=5)
    with pytest.raises(ValueError):
        SynthConfig(long_range_interest_strength=1.5)


def _category_hist(events, cat, C):
    h = np.zeros(C)
    for e in events:
        for c in cat.cats(e.item_id):
            h[c] += 1
    return h / h.sum()


def test_stable_interest_keeps_halves_close():
    # Monte-Carlo over 100 users: pure long-range interest gives matching halves
    cfg = SynthConfig(num_users=100, num_items=200, num_categories=10, events_per_user=512,
                      long_range_interest_strength=1.0, seed=3)
    seqs, cat = generate_synthetic(cfg)
    tv = []
    for s in seqs:
        first = _category_hist(s.events[:256], cat, 10)
        second = _category_hist(s.events[256:], cat, 10)
        tv.append(0.5 * np.abs(first - second).sum())
    assert max(tv) < 0.15
