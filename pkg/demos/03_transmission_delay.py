# # Uploads take time to arrive
#
# The consumer stamps an upload when it sends it, the provider when it arrives.
# With a constant network delay d every upload near the end of an interval is
# counted one interval later by the provider. The provider's average delay per
# interval (TT) lets both sides line up their windows.

# %%
from pathlib import Path

from bilateral.simulator import DelayModel, load_scenario, run, with_overrides

base = load_scenario(Path(__file__).resolve().parents[1] / "scenarios" / "b_delay.txt")

# %%
for d in (1, 100, 5000):
    s = with_overrides(base, delay_model=DelayModel("constant", d, d), quiet_tail_ms=d)
    report = run(s)
    print(f"delay={d:>5} ms  agreed={report.agreed_count}/{len(report.intervals)}  "
          f"rounds={[r.rounds_used for r in report.intervals]}")

# %% [markdown]
# Round 1 finds the boundaries already equal, so only the TT differs. In round
# 2 the consumer adopts the provider's TT and compares against the provider's
# count over the shifted window [SP+TT, EP+TT), which matches its own.

# %%
report = run(base)
negotiated = next(r for r in report.intervals if r.rounds_used == 2)
print(f"interval {negotiated.index}: final params (SP, EP, TT) = {negotiated.final_params}, "
      f"agreed SC = {negotiated.agreed_sc}, oracle delta = {negotiated.oracle_delta}")
