"""Both RTUs are cut off at t=30 s. The bots answer the SCADA with values the
C&C estimates from a shadow tank model, while the forced pumps run the real
tanks away."""

# %%
from cpsbot.scenario import load_preset, run_scenario

result = run_scenario(load_preset("sim_impersonation"))
print(result.phases.entries)
print(result.report)

# %% What the SCADA saw versus the real tank (raw register, 0.1 L)
for sub in (1, 2):
    seen = dict(result.scada.levels(sub))
    real = dict(result.rtus[sub].history)
    print(f"sub{sub}")
    for t_us in sorted(seen)[::8]:
        true = real[max(t for t in real if t <= t_us)]
        print(f"  t={t_us / 1e6:6.2f}s  scada={seen[t_us]:6d}  rtu={true:6d}")
