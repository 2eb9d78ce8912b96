"""
Real-time stitching against a prestitched control
=================================================

The control builds five whole ads per page offline, without seeing a query,
and ranks them at query time. The treatment stitches a fresh ad for every
query with the same models. When clicks depend on the query, only the
treatment can follow them.
"""

from adstitch.simulator import (
    OnlinePolicy,
    WorldSpec,
    ab_compare,
    prestitch_policy,
    simulate,
    synthetic_world,
)
from adstitch.stitcher import Mode, fresh_models

world = synthetic_world(WorldSpec(seed=100, hash_bits=16, win_bias=8.0, win_weight=0.0))

# %%
# Warm the models up with explore traffic, then freeze them for both arms.
learner = OnlinePolicy(fresh_models(16), Mode.EXPLORE, trial_scale=0.25, joint=True)
simulate(world, learner, 30_000, train=True, learning_rate=0.002, seed=0)
treatment = learner.with_mode(Mode.EXPLOIT)
control = prestitch_policy(learner.models, world.catalog, m=5, seed=0, trial_scale=0.25)
for url, ads in control.ads.items():
    print(f"{url}: {len(ads)} prestitched ads")

# %%
# Each arm gets its own 100k SRPV of traffic.
t = simulate(world, treatment, 100_000, seed=1)
c = simulate(world, control, 100_000, seed=2)
report = ab_compare(t, c, seed=0)
print(f"\n{'metric':<6} {'treatment':>10} {'control':>10} {'delta':>8}  significant")
for name, d in report.to_record().items():
    delta = "n/a" if d["delta_pct"] is None else f"{d['delta_pct']:+.1f}%"
    print(f"{name:<6} {d['treatment']:>10.4f} {d['control']:>10.4f} {delta:>8}  {d['significant']}")
