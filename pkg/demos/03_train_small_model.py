"""
Training a small model on synthetic logs
========================================

Each user's long-range category mixture is blended with a drifting
short-term mixture.  A leave-one-out split holds back the last two events.
"""

import logging

from cause import ModelConfig, SynthConfig, TrainConfig, generate_synthetic, split, train
from cause.evalmetrics import evaluate

logging.basicConfig(level=logging.INFO, format="%(message)s")

seqs, catalog = generate_synthetic(SynthConfig(num_users=48, num_items=80, num_categories=8,
                                               events_per_user=64, seed=0))
sp = split(seqs)

cfg = ModelConfig(item_vocab=80, action_vocab=3, user_vocab=48, category_vocab=8, hidden_dim=16,
                  num_layers=1, num_heads=2, max_recent=16, dtype="float32")
res = train(cfg, TrainConfig(epochs=8, negatives=20, windows_per_user=2), sp.train, catalog, sp.val)
print(f"best epoch {res.best_epoch}, val N@10 {res.best_val:.4f}")

# test: context is train + val, target is the final event
context = [type(s)(s.user_id, s.events + v.events) for s, v in zip(sp.train, sp.val)]
report = evaluate(res.model, context, sp.test, catalog)
print({k: round(v, 4) for k, v in report.metrics.items()})

# sampled protocol: rank against 20 random non-target items instead of the whole catalog
print(evaluate(res.model, context, sp.test, catalog, protocol="sampled:20", seed=1).metrics["N@10"])
