"""Storage accounting model shared by consumer and provider.

All sizes are integer bytes and all times integer milliseconds, so every
party that applies the same model to the same records gets bit-identical
results.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Optional, Sequence

from . import encoding
from .errors import EmptyInput, MissingReceiveTime, NegativeTT


class Party(enum.Enum):
    CONSUMER = "Consumer"
    PROVIDER = "Provider"


class ClockField(enum.Enum):
    """Which timestamp decides interval membership."""

    RTS = "RTS"  # request time stamp, stamped by the consumer
    RRT = "RRT"  # request received time, stamped by the provider


@dataclass(frozen=True)
class FsConfig:
    metadata_bytes: int = 2048
    chunk_size_bytes: int = 4096

    def __post_init__(self):
        if self.chunk_size_bytes <= 0:
            raise ValueError("chunk_size_bytes must be positive")
        if self.metadata_bytes < 0:
            raise ValueError("metadata_bytes must be non-negative")


@dataclass(frozen=True)
class MeterRecord:
    request_id: int
    request_time_stamp: int
    bytes_transferred: int
    request_received_time: Optional[int] = None
    user_id: str = "u0"

    def __post_init__(self):
        if self.bytes_transferred < 0:
            raise ValueError("bytes_transferred must be non-negative")
        rrt = self.request_received_time
        if rrt is not None and rrt < self.request_time_stamp:
            raise NegativeTT(
                f"request {self.request_id}: received at {rrt} "
                f"before issue at {self.request_time_stamp}"
            )

    def timestamp(self, clock_field: ClockField) -> int:
        if clock_field is ClockField.RTS:
            return self.request_time_stamp
        if self.request_received_time is None:
            raise MissingReceiveTime(f"request {self.request_id} has no RRT")
        return self.request_received_time


@dataclass(frozen=True)
class ConsumptionInterval:
    index: int
    start_point: int
    end_point: int

    def __post_init__(self):
        if self.start_point >= self.end_point:
            raise ValueError(
                f"interval {self.index}: start {self.start_point} "
                f"not before end {self.end_point}"
            )

    def __contains__(self, t: int) -> bool:
        return self.start_point <= t < self.end_point

    def shifted(self, offset: int) -> "ConsumptionInterval":
        return ConsumptionInterval(
            self.index, self.start_point + offset, self.end_point + offset
        )


@dataclass(frozen=True)
class AccountingParams:
    start_point: int
    end_point: int
    transmission_time: int = 0

    def __post_init__(self):
        if self.start_point >= self.end_point:
            raise ValueError("start_point must precede end_point")
        if self.transmission_time < 0:
            raise ValueError("transmission_time must be non-negative")

    def fields(self) -> tuple:
        return (self.start_point, self.end_point, self.transmission_time)

    @classmethod
    def from_fields(cls, fields) -> "AccountingParams":
        sp, ep, tt = encoding.expect_shape(fields, 3, "accounting params")
        return cls(sp, ep, tt)


@dataclass(frozen=True)
class AccountingRecord:
    interval_index: int
    party: Party
    params: AccountingParams
    storage_consumed: int
    request_count: int

    def __post_init__(self):
        if self.storage_consumed < 0:
            raise ValueError("storage_consumed must be non-negative")

    def fields(self) -> tuple:
        return (
            self.interval_index,
            self.party.value,
            self.params.fields(),
            self.storage_consumed,
            self.request_count,
        )

    @classmethod
    def from_fields(cls, fields) -> "AccountingRecord":
        idx, party, params, sc, n = encoding.expect_shape(fields, 5, "accounting record")
        return cls(idx, Party(party), AccountingParams.from_fields(params), sc, n)

    def to_bytes(self) -> bytes:
        return encoding.encode(self.fields())

    @classmethod
    def from_bytes(cls, data: bytes) -> "AccountingRecord":
        return cls.from_fields(encoding.decode(data))


def chunks_consumed(bt: int, cfg: FsConfig) -> Fraction:
    """Chunks a request of ``bt`` bytes occupies, as an exact fraction."""
    return Fraction(bt + cfg.metadata_bytes, cfg.chunk_size_bytes)


def scuf(bt: int, cfg: FsConfig) -> int:
    """Bytes of storage consumed by one upload, rounded up to whole chunks."""
    ch = cfg.chunk_size_bytes
    return -(-(bt + cfg.metadata_bytes) // ch) * ch


def interval_consumption(
    records: Iterable[MeterRecord],
    interval: ConsumptionInterval,
    cfg: FsConfig,
    clock_field: ClockField,
    transmission_time: int = 0,
    party: Optional[Party] = None,
) -> AccountingRecord:
    """Sum of :func:`scuf` over records stamped inside ``[SP, EP)``.

    ``party`` defaults to the side whose interceptor owns ``clock_field``.
    ``transmission_time`` is only carried into the record's params.
    """
    if party is None:
        party = Party.CONSUMER if clock_field is ClockField.RTS else Party.PROVIDER
    total = 0
    count = 0
    for rec in records:
        if rec.timestamp(clock_field) in interval:
            total += scuf(rec.bytes_transferred, cfg)
            count += 1
    params = AccountingParams(interval.start_point, interval.end_point, transmission_time)
    return AccountingRecord(interval.index, party, params, total, count)


def tt_of_request(rec: MeterRecord) -> int:
    if rec.request_received_time is None:
        raise MissingReceiveTime(f"request {rec.request_id} has no RRT")
    tt = rec.request_received_time - rec.request_time_stamp
    if tt < 0:
        raise NegativeTT(f"request {rec.request_id}: negative transmission time {tt}")
    return tt


def _round_half_away(num: int, den: int) -> int:
    q, r = divmod(abs(num) * 2 + den, 2 * den)
    return q if num >= 0 else -q


def tt_average(records: Sequence[MeterRecord]) -> int:
    """Mean transmission time in ms, rounded to nearest, ties away from zero.

    Raises EmptyInput for an empty sequence; the provider substitutes the
    previous interval's average in that case.
    """
    if not records:
        raise EmptyInput("no records to average")
    return _round_half_away(sum(tt_of_request(r) for r in records), len(records))


def compensated_by_difference(base_sc: int, n: int, m: int) -> int:
    """Provider total compensated by ``|N - M|`` bytes in flight.

    Kept for completeness; the negotiation uses interval shifting instead,
    since the absolute value cannot remove an overcount.
    """
    if n < 0 or m < 0:
        raise ValueError("in-flight byte counts must be non-negative")
    return base_sc + abs(n - m)


def shifted_interval_consumption(
    records: Iterable[MeterRecord],
    interval: ConsumptionInterval,
    tt: int,
    cfg: FsConfig,
) -> AccountingRecord:
    """Provider consumption over ``[SP + tt, EP + tt)`` on the receive clock.

    The returned params keep the nominal interval bounds and carry ``tt``.
    """
    if tt < 0:
        raise ValueError("tt must be non-negative")
    rec = interval_consumption(records, interval.shifted(tt), cfg, ClockField.RRT)
    params = AccountingParams(interval.start_point, interval.end_point, tt)
    return AccountingRecord(interval.index, Party.PROVIDER, params, rec.storage_consumed, rec.request_count)
