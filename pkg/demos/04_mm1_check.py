"""
Sanity check on a textbook queue
================================

A single always-open room with Poisson arrivals and exponential service
is an M/M/1 queue, whose mean wait is rho / (mu - lambda).
"""

import numpy as np

from ultraqueue import engine

lam, mu = 0.8, 1.0  # per minute
world = engine.QueueWorld(lam * 60, lambda rng: max(1, int(round(rng.exponential(60 / mu)))), 1, (0, 1000))
days = engine.run_world_replications(world, engine.SimConfig(n_replications=4, seed=0, breaks=False, walks=False))

waits = np.array([r.wait for d in days for r in d.records]) / 60
print(f"{len(waits)} arrivals, mean wait {waits.mean():.2f} min, theory {lam / mu / (mu - lam):.2f} min")

# the engine waits are Lindley's recursion on the same arrival and service sequence
recs = days[0].records
w, worst = 0, 0
for prev, cur in zip(recs, recs[1:]):
    w = max(0, w + prev.service - (cur.arrival_ts - prev.arrival_ts))
    worst = max(worst, abs(w - cur.wait))
print("largest deviation from the recursion:", worst, "s")
