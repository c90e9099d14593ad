# # When the two parties cut time differently
#
# The consumer's interval boundaries run late by a configurable offset. Uploads
# that land in the gap are counted in different intervals by the two sides, so
# their totals disagree until the consumer adopts the provider's boundaries.

# %%
from pathlib import Path

from bilateral.simulator import ScheduleSpec, load_scenario, run, with_overrides

base = load_scenario(Path(__file__).resolve().parents[1] / "scenarios" / "a_misaligned.txt")

# %%
for offset in (1, 500, 30_000):
    report = run(with_overrides(base, consumer_schedule=ScheduleSpec(60_000, offset)))
    rounds = [r.rounds_used for r in report.intervals]
    print(f"offset={offset:>6} ms  agreed={report.agreed_count}/{len(rounds)}  rounds per interval={rounds}")

# %% [markdown]
# One round is enough: the provider reports its bounds, the consumer recounts
# its own log under them and the totals match. The report table shows each
# interval next to a brute-force recount from the raw request list.

# %%
print(run(base).to_table())
