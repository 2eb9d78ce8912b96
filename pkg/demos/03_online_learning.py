"""
Learning to stitch from simulated traffic
=========================================

A synthetic world hides a click model over the same hashed features the
stitcher uses. Serving in Explore mode and training on the clicks it sees,
the policy's exploit stitches approach the best ad for every (page, query).
"""

import time

from adstitch.simulator import OnlinePolicy, OraclePolicy, WorldSpec, expected_metrics, simulate, synthetic_world
from adstitch.stitcher import Mode, fresh_models

# %%
# Two landing pages with 15 titles and 10 descriptions each, ten queries per
# page. Every served ad wins its auction here, so CTR is the only signal.
spec = WorldSpec(seed=0, win_bias=8.0, win_weight=0.0, hash_bits=18)
world = synthetic_world(spec)
best = expected_metrics(world, OraclePolicy(world)).ctr
print(f"{world.catalog.n_assets()} assets, {len(world.contexts())} contexts, oracle-best CTR {best:.3f}")

# %%
# The five position logits add up to one ad logit during training, so a slot
# is credited only for its share of the click. A small learning rate and a
# small trial scale keep the estimates steady once the good assets are found.
policy = OnlinePolicy(fresh_models(spec.hash_bits), Mode.EXPLORE, trial_scale=0.25, joint=True)
exploit = policy.with_mode(Mode.EXPLOIT)
curve = []


def checkpoint(step, _):
    curve.append((step, expected_metrics(world, exploit).ctr / best))


start = time.perf_counter()
log = simulate(world, policy, 100_000, train=True, learning_rate=0.001, seed=0,
               checkpoint_every=10_000, on_checkpoint=checkpoint)
print(f"simulated {log.srpv} SRPV in {time.perf_counter() - start:.0f} s, explore CTR {log.clicks / log.impressions:.3f}")
for step, ratio in curve:
    print(f"  after {step:>7,} SRPV: exploit CTR = {ratio:.3f} x oracle-best  " + "#" * int(40 * ratio))

# %%
# How many contexts now get exactly the oracle's ad?
oracle = OraclePolicy(world)
exact = sum(exploit.serve(world.entry(pi), world.query(pi, qi)) == oracle.serve(world.entry(pi), world.query(pi, qi))
            for pi, qi, _ in world.contexts())
print(f"exact oracle stitch in {exact}/{len(world.contexts())} contexts")
