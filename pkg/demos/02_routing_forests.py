"""
Two-level routing forests
=========================

Train the room-type forest and the per-type room forests on replayed
queue states, then ask which features the type choice leans on.
"""

import logging

from ultraqueue import calibrate, forest, routing, synth

logging.basicConfig(level=logging.ERROR)

log = synth.synthesize_log(synth.compact_scenario(), 60, seed=1)
model = calibrate.build_model(log, calibrate.CalibrationConfig(seed=0, train_routing=False))

# smaller forests than the defaults keep this quick
small = forest.Hyperparams(40, False, "gini", "sqrt_p", 20, 20, 9)
policy = routing.train_policy(log, model, small, {t: forest.Hyperparams(40) for t in model.room_types.types})
print(routing.evaluation_csv(policy))

# state each historical arrival saw, rebuilt from the log
rows = routing.replay_features(log, model)
X, y = routing.level1_data(rows, policy)
held_out = ~routing.split_mask(len(rows), 0, 0.8)

# one-hot blocks (item group, weekday) are shuffled as a unit
imp = forest.permutation_importance(policy.level1, X[held_out], y[held_out], n_repeats=3)
for name, drop in sorted(imp.items(), key=lambda kv: -kv[1]):
    print(f"{name:14s} {drop:+.4f}")
