# # Storage accounting, one upload at a time
#
# A file system never stores exactly the bytes a client sends. Each file also
# carries metadata, and space is handed out in whole chunks. Both parties meter
# every upload with the same formula, so they can later compare totals.

# %%
from bilateral import FsConfig, MeterRecord, scuf
from bilateral.accounting import ClockField, ConsumptionInterval, chunks_consumed, interval_consumption

cfg = FsConfig(metadata_bytes=2048, chunk_size_bytes=4096)

# %% [markdown]
# A 10 KiB upload plus 2 KiB of metadata is exactly three chunks. An empty file
# still costs half a chunk of metadata, which rounds up to a whole one.

# %%
for bt in (10240, 0, 1, 4096, 4097):
    print(f"bt={bt:>6}  chunks={str(chunks_consumed(bt, cfg)):>6}  scuf={scuf(bt, cfg)}")

# %% [markdown]
# Per-interval consumption is the sum over the uploads whose time stamp falls
# in the half-open window [SP, EP).

# %%
uploads = [MeterRecord(1, 10, 10240), MeterRecord(2, 20, 0), MeterRecord(3, 30, 4096), MeterRecord(4, 60_000, 1)]
record = interval_consumption(uploads, ConsumptionInterval(1, 0, 60_000), cfg, ClockField.RTS)
print(record.storage_consumed, "bytes from", record.request_count, "uploads")
# the upload stamped exactly at EP belongs to the next interval
