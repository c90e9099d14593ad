# # Checking the evidence after the fact
#
# Every settled interval leaves signed tokens behind: the provider's signed
# record, the consumer's receipt, the consumer's signed decision and the
# provider's receipt for it. An auditor with the public keys and the two meter
# logs can recheck all of it offline.

# %%
import tempfile
from pathlib import Path

from bilateral import encoding
from bilateral.audit import verify_run
from bilateral.evidence import IntervalOutcome
from bilateral.simulator import load_scenario, run

scenario = load_scenario(Path(__file__).resolve().parents[1] / "scenarios" / "a_misaligned.txt")
out_dir = Path(tempfile.mkdtemp(prefix="bilateral-a-"))
run(scenario, out_dir)
result = verify_run(out_dir)
print("ok:", result.ok, "entries:", result.entries_checked)

# %% [markdown]
# Now change one byte of the provider's signed record inside the third stored
# entry, the way someone editing the file by hand would.

# %%
path = out_dir / "evidence.agreed"
lines = path.read_text().splitlines(keepends=True)
cols = lines[4].rstrip("\n").split("\t")
outcome = IntervalOutcome.from_fields(encoding.decode(bytes.fromhex(cols[-1])))
env = outcome.envelopes[0]
outcome.envelopes = (env.with_payload(env.payload[:-1] + b"\x07"),) + outcome.envelopes[1:]
cols[-1] = encoding.encode(outcome.fields()).hex()
lines[4] = "\t".join(cols) + "\n"
path.write_text("".join(lines))

result = verify_run(out_dir)
print("ok:", result.ok)
for problem in result.problems:
    print(" ", problem)
