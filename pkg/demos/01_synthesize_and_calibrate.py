"""
From a synthetic log to a calibrated model
==========================================

Generate a ground-truth log, then recover room types, item groups,
arrival rates and gap statistics from it.
"""

import logging

import numpy as np

from ultraqueue import calibrate, synth

logging.basicConfig(level=logging.ERROR)

# twelve rooms, four hidden room types; 60 consecutive days
scenario = synth.compact_scenario()
log = synth.synthesize_log(scenario, 60, seed=1)
print(f"{len(log)} visits over 60 days")

# calibration only; routing is trained in the next demo
model = calibrate.build_model(log, calibrate.CalibrationConfig(seed=0, train_routing=False))

# the clustered room types should match the scenario's own grouping
print("recovered:", model.room_types.members)
print("truth:    ", {t: spec.rooms for t, spec in scenario.room_types.items()})

# single items and the group each landed in
print(model.item_groups.item_group)

# total weekday arrival rate per hour against the scenario's curve
est = np.sum(list(model.arrivals.curves("weekday").values()), axis=0)
for h, e, t in zip(model.arrivals.hours, est, scenario.arrival_rates["weekday"]):
    print(f"{h:02d}:00  estimated {e:5.1f}/h  true {t:5.1f}/h")

# pooled break probability per room type
for t in model.room_types.types:
    n = sum(v for (rt, _), v in model.gaps.handoffs.items() if rt == t)
    b = sum(len(v) for (rt, _), v in model.gaps.breaks.items() if rt == t)
    print(f"{t}: {b}/{n} busy handoffs had a break ({b / n:.2f})")
