"""
Why shorter sequences pay off
=============================

Backbone cost grows as H*L^2*D (attention) plus H*L*D^2*r (feed-forward).
Compressing a long history into a handful of tokens shrinks L.
"""

from cause import ItemCatalog, Interaction, ModelConfig, UserSequence
from cause.perfbench import compression_report, cost_ratio, flop_cost, time_forward

for L in (268, 1024, 4096):
    c = flop_cost(3, L, 64)
    print(f"L={L:5d} attention {c.attention_cost:>14,d}  ffn {c.ffn_cost:>12,d}")

print("1024 vs 268:", round(cost_ratio(1024, 268), 3))
print("4096 vs 1024:", round(cost_ratio(4096, 1024), 3))

# a user with 2000 events: 128 recent events + 8 buckets
cat = ItemCatalog.from_lists([[i % 20] for i in range(300)], 20)
user = UserSequence(0, tuple(Interaction(0, (7 * k) % 300, 0, k, k) for k in range(2000)))
row = compression_report([user], cat, V=8, G=32, ilen=128)["users"][0]
print("total sLen", row["total_slen"], "vs uncompressed", row["uncompressed_slen"],
      "flop ratio", round(row["flop_ratio"], 1))

# wall clock on this machine: ratios matter, not milliseconds
cfg = ModelConfig(item_vocab=300, action_vocab=3, user_vocab=1, category_vocab=20, hidden_dim=64,
                  num_layers=3, num_heads=8)
small, big = time_forward(cfg, 268, batch=1, reps=5), time_forward(cfg, 1024, batch=1, reps=5)
print(f"{small.mean_ms:.1f} ms vs {big.mean_ms:.1f} ms -> {big.mean_ms / small.mean_ms:.1f}x")
