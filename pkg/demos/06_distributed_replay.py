"""Substation 2's level and flow are replayed to the SCADA as substation 1's,
carried through the broker."""

# %%
from cpsbot.scenario import load_preset, run_scenario

cfg = load_preset("sim_replay")
result = run_scenario(cfg)
print(cfg.attack.replay)
print(result.report)

# %%
src = {t: v for t, v in result.scada.levels(2)}
dst = {t: v for t, v in result.scada.levels(1)}
for (t1, v1), (t2, v2) in list(zip(sorted(dst.items()), sorted(src.items())))[14:30]:
    print(f"t={t1 / 1e6:6.2f}s  sub1 shown={v1:6d}   sub2 at {t2 / 1e6:6.2f}s={v2:6d}")
