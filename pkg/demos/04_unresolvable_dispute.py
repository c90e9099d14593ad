# # A disagreement no parameter can explain
#
# Shifting by an average only works when the delay is constant. Here one upload
# arrives instantly and another takes twice the average, so the shifted window
# still misses one of them. After the provider has nothing left to offer, the
# interval is escalated with the full negotiation transcript.

# %%
import tempfile
from pathlib import Path

from bilateral.audit import find_outcome, format_replay
from bilateral.simulator import load_scenario, run

scenario = load_scenario(Path(__file__).resolve().parents[1] / "scenarios" / "c_jitter.txt")
out_dir = Path(tempfile.mkdtemp(prefix="bilateral-c-"))
report = run(scenario, out_dir)
print(report.to_table())

# %% [markdown]
# The replay of the escalated interval shows the counters stepping 0 to 3, the
# TT adoption in round 2 and the provider's final stop with nothing in conflict.

# %%
print(format_replay(*find_outcome(out_dir, 1)))

# %% [markdown]
# An interval that matched straight away has an empty transcript.

# %%
print(format_replay(*find_outcome(out_dir, 3)))
