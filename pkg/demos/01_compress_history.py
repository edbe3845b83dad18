"""
Compressing a long history into category buckets
================================================

A user's events are split into a recent window and an older history.  The
history is grouped by category, the V most recently touched categories are
kept, and each keeps only its G newest items.
"""

from cause import Interaction, ItemCatalog, SynthConfig, compress, generate_synthetic, partition_history_recent

seqs, catalog = generate_synthetic(SynthConfig(num_users=3, num_items=60, num_categories=6,
                                               events_per_user=120, seed=1))
user = seqs[0]
history, recent = partition_history_recent(user, 32)
print(f"user {user.user_id}: {len(user)} events -> history {len(history)}, recent {len(recent)}")

# V=4 buckets of at most G=5 items; buckets come out oldest first
plan = compress(history, catalog, V=4, G=5)
for b in plan.buckets:
    print(f"  category {b.category_id}: items {b.item_ids} (last seen at t={b.last_ts})")

# the retained slot count is what the model actually reads from history
print("retained slots:", plan.retained, "of", len(history), "history events")

# an item in several categories lands in every one of its buckets
multi = ItemCatalog.from_lists([[0, 1], [1]])
events = [Interaction(0, 0, 0, 1, 0), Interaction(0, 1, 0, 2, 1)]
print([(b.category_id, b.item_ids) for b in compress(events, multi, 8, 32).buckets])
