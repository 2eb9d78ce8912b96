"""
Stitching an ad at query time
=============================

Each of the five ad positions has its own logistic scorer over hashed text
and query features. A stitch fills the positions in order, each time taking
the best remaining asset of the right kind. Explore mode replaces the point
score with a Thompson draw whose width shrinks as the features get trained.
"""

import numpy as np

from adstitch.core import AdAsset, AssetKind, Position, Query
from adstitch.stitcher import (
    Mode,
    StitchRequest,
    Stitcher,
    TrainExample,
    count_options,
    feature_keys,
    featurize,
    fresh_models,
    train_online,
    trial_count,
)

URL = "https://shop.brightmug.com/mugs"
titles = [AdAsset(f"t{i}", URL, AssetKind.TITLE, t) for i, t in enumerate(
    ["Handmade Ceramic Mugs", "Gift Sets for Coffee Lovers", "Mugs in Twelve Glazes", "Dishwasher Safe Mugs"])]
descs = [AdAsset(f"d{i}", URL, AssetKind.DESCRIPTION, t) for i, t in enumerate(
    ["Handmade ceramic mugs in twelve glazes.", "Gift sets ship in two days.", "Microwave and dishwasher safe."])]
query = Query("coffee mug gift")

# %%
# Features are token n-grams of the asset, alone and crossed with the query's
# n-grams, hashed with a position-specific salt.
keys = feature_keys(titles[1].text, query)
print(f"{len(keys)} feature keys, e.g. {keys[:3]} ... {keys[-2:]}")
x_t1 = featurize(titles[1], query, Position.T1, hash_bits=18)
x_t2 = featurize(titles[1], query, Position.T2, hash_bits=18)
print("same asset, T1 vs T2 indices overlap:", len(set(x_t1.indices) & set(x_t2.indices)))

# %%
# Untrained models score everything 0.5, so the greedy pass falls back to
# asset-id order. Five positions over 4 titles and 3 descriptions cost
# this many model evaluations:
models = fresh_models(18)
engine = Stitcher(models)
ad = engine.stitch(StitchRequest(query, titles, descs))
print("evaluations:", ad.evaluations, "=", count_options(len(titles), len(descs)))

# %%
# Teach T1 that "Gift Sets for Coffee Lovers" gets clicks for this query.
rng = np.random.default_rng(0)
for _ in range(30):
    batch = [TrainExample(featurize(a, query, Position.T1, 18), int(a.id == "t1" and rng.random() < 0.8))
             for a in titles]
    train_online(models[Position.T1], batch)
engine = Stitcher(models)
ad = engine.stitch(StitchRequest(query, titles, descs))
print("exploit T1:", ad.title1.text, f"(p = {ad.scores[0]:.2f})")

# %%
# The trained title has a large trial count, so its Thompson draws stay close
# to the point estimate. A new asset shares no features with the training data,
# so its count is zero and its draws come from Beta(1, 1). The untrained
# description slot shows the same effect across the whole pool.
teapot = AdAsset("t9", URL, AssetKind.TITLE, "Stoneware Teapot")
n_seen = trial_count(models[Position.T1], featurize(titles[1], query, Position.T1, 18))
n_new = trial_count(models[Position.T1], featurize(teapot, Query("teapot"), Position.T1, 18))
print(f"trial counts: trained {n_seen:.1f}, new {n_new:.1f}")
picks = [engine.stitch(StitchRequest(query, titles, descs, Mode.EXPLORE, rng_seed=s)).title1.id
         for s in range(200)]
print("explore T1 picks:", {k: picks.count(k) for k in sorted(set(picks))})
picks = [engine.stitch(StitchRequest(query, titles, descs, Mode.EXPLORE, rng_seed=s)).desc1.id
         for s in range(200)]
print("explore D1 picks (untrained):", {k: picks.count(k) for k in sorted(set(picks))})
