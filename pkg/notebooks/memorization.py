# -*- coding: utf-8 -*-
"""
Overfitting a tiny KG
=====================

A sanity check for the whole training loop: each encoder should memorize
a small random graph and rank its own training facts near the top.
"""

###########################################################################
# Imports and a random graph. Valid and test reuse training rows on purpose.

from kgtransfer import (DatasetSplit, DistillConfig, EncoderConfig, NceConfig, TrainConfig,
                        WalkConfig, evaluate, random_kg, retrain)

kg = random_kg(50, 5, 200, seed=0)
split = DatasetSplit(kg.triplets, kg.triplets[:20], kg.triplets[:20])

###########################################################################
# Train each encoder and score the facts it was trained on.

for kind in ("lstm", "rsn", "transformer"):
    res = retrain(kg, split, EncoderConfig(kind, 64, dropout_rate=0.0), WalkConfig(5, 2, 0),
                  NceConfig(k=10, seed=0),
                  TrainConfig(batch_size=128, learning_rate=0.01, epochs=200, seed=0),
                  DistillConfig(valid_every=200), setting="lp")
    rep = evaluate(res.checkpoint, kg.triplets, kg.triplets, "lp")
    print(f"{kind:12s} MRR {rep.mrr:.3f}  H@10 {rep.hits[10]:.3f}")
