"""Request interceptors and the append-only meter logs they feed.

Log line format, one record per line, tab separated::

    request_id  user_id  rts  bt  rrt

with ``-`` in the last column when the record has no receive time.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Union

from .accounting import ClockField, MeterRecord, Party
from .errors import EncodingError, MissingReceiveTime, NegativeTT


@dataclass(frozen=True)
class UploadRequest:
    request_id: int
    issue_time: int
    payload_size: int
    user_id: str = "u0"

    def __post_init__(self):
        if self.payload_size < 0:
            raise ValueError("payload_size must be non-negative")


def intercept_consumer(req: UploadRequest) -> MeterRecord:
    return MeterRecord(req.request_id, req.issue_time, req.payload_size, None, req.user_id)


def intercept_provider(req: UploadRequest, arrival_time: int) -> MeterRecord:
    if arrival_time < req.issue_time:
        raise NegativeTT(
            f"request {req.request_id} arrived at {arrival_time}, issued at {req.issue_time}"
        )
    return MeterRecord(req.request_id, req.issue_time, req.payload_size, arrival_time, req.user_id)


def encode_record(rec: MeterRecord) -> str:
    if "\t" in rec.user_id or "\n" in rec.user_id:
        raise EncodingError(f"user_id {rec.user_id!r} contains a separator")
    rrt = "-" if rec.request_received_time is None else str(rec.request_received_time)
    return "\t".join(
        (str(rec.request_id), rec.user_id, str(rec.request_time_stamp), str(rec.bytes_transferred), rrt)
    )


def decode_record(line: str) -> MeterRecord:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 5:
        raise EncodingError(f"expected 5 fields, got {len(parts)}: {line!r}")
    rid, uid, rts, bt, rrt = parts
    try:
        return MeterRecord(int(rid), int(rts), int(bt), None if rrt == "-" else int(rrt), uid)
    except ValueError as exc:
        raise EncodingError(f"bad meter line {line!r}: {exc}") from exc


@dataclass
class MeterLog:
    """Append-only record log for one party, optionally mirrored to a file."""

    party: Party
    path: Optional[Path] = None
    entries: List[MeterRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.path is not None:
            self.path = Path(self.path)

    def append(self, rec: MeterRecord) -> "MeterLog":
        if self.party is Party.CONSUMER and rec.request_received_time is not None:
            raise ValueError("consumer log entries never carry RRT")
        if self.party is Party.PROVIDER and rec.request_received_time is None:
            raise MissingReceiveTime("provider log entries must carry RRT")
        line = encode_record(rec)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(line + "\n")
        self.entries.append(rec)
        return self

    def extend(self, records) -> "MeterLog":
        for rec in records:
            self.append(rec)
        return self

    def __iter__(self) -> Iterator[MeterRecord]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def read_window(self, start: int, end: int, clock_field: ClockField) -> List[MeterRecord]:
        """Records whose ``clock_field`` stamp lies in ``[start, end)``, in append order."""
        if start > end:
            raise ValueError("window start after end")
        if clock_field is ClockField.RRT and self.party is Party.CONSUMER:
            raise MissingReceiveTime("consumer logs carry no receive times")
        return [r for r in self.entries if start <= r.timestamp(clock_field) < end]

    @classmethod
    def load(cls, path: Union[str, os.PathLike], party: Party) -> "MeterLog":
        log = cls(party)
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    log.entries.append(decode_record(line))
        log.path = Path(path)
        return log
