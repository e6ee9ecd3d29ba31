"""Score every attack preset, then inject a 5 ms serving delay to show what
the latency metric catches."""

# %%
from cpsbot.metrics import to_table
from cpsbot.scenario import load_preset, run_scenario

names = ["sim_impersonation", "sim_replay", "testbed_impersonation", "testbed_replay"]
reports = [run_scenario(load_preset(n), sample_host=True).report for n in names]
print(to_table(reports, labels=names))

# %% Fault injection
cfg = load_preset("sim_impersonation")
cfg.attack.serve_delay_ms = 5.0
slow = run_scenario(cfg).report
print("mu_d with a +5 ms serving delay:", slow.mu_d_ms, "ms")

# %% Re-scoring a saved trace gives the same numbers
import tempfile
from pathlib import Path

from cpsbot.metrics import compute_report
from cpsbot.netfabric import Trace

result = run_scenario(load_preset("sim_replay"))
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "trace.jsonl"
    result.trace.write(path)
    print("identical after re-scoring:", compute_report(Trace.read(path)) == result.report)
