"""The bundled water-distribution plant: tanks, pumps, demand, and the
registers an RTU exposes."""

# %%
import numpy as np

from cpsbot.process import PlantTopology, Substation, level_from_register

plant = PlantTopology.default(3)
for i, spec in enumerate(plant.substations, 1):
    print(f"sub{i}: {spec.stage:12s} capacity {spec.tank_capacity:7.0f} L, start {spec.initial_level:6.0f} L")

# %% Ten minutes with pump 1 forced on
rng = np.random.default_rng(0)
subs = [Substation(i, s, rng) for i, s in enumerate(plant.substations, 1)]
subs[0].store.coils[subs[0].rmap.pump] = True
levels = []
for k in range(6000):
    for s in subs:
        s.tick(k * 0.1, 0.1)
    if k % 600 == 0:
        levels.append([level_from_register(int(s.store.holding_registers[s.rmap.level])) for s in subs])
print(np.array(levels).round(1))
