"""
Categories from clustering item embeddings
==========================================

When no catalog is available, k-means over trained item embeddings gives
one category per item.  The induced catalog plugs straight back into the
compressor and the model.
"""

import numpy as np

from cause import ModelConfig, SynthConfig, TrainConfig, compress, generate_synthetic, split, train
from cause.cluster import induce_catalog, kmeans_fit

seqs, catalog = generate_synthetic(SynthConfig(num_users=32, num_items=60, num_categories=4,
                                               events_per_user=48, seed=2))
sp = split(seqs)
cfg = ModelConfig(item_vocab=60, action_vocab=3, user_vocab=32, category_vocab=4, hidden_dim=16,
                  num_layers=1, num_heads=2, max_recent=16, use_history=False, use_item_category=False)
model = train(cfg, TrainConfig(epochs=5, negatives=20), sp.train, catalog).model

res = kmeans_fit(model.params["E_item"].data, k=4, seed=0)
print("iterations", res.iterations_run, "inertia", round(res.inertia, 5))
print("cluster sizes", np.bincount(res.assignment).tolist())
induced = induce_catalog(res)

# how often do the induced clusters agree with the true first category
pairs = [(catalog.cats(i)[0], induced.cats(i)[0]) for i in range(60)]
table = np.zeros((4, 4), dtype=int)
for true, got in pairs:
    table[true, got] += 1
print(table)

plan = compress(list(sp.train[0].events), induced, V=4, G=8)
print([b.category_id for b in plan.buckets])
