"""Deterministic harness: workloads, delays, schedules, and full runs.

Randomness comes from :class:`random.Random` (MT19937) seeded with the
strings ``"<seed>/workload"`` and ``"<seed>/delay"``; string seeds are hashed
with SHA-512 by the standard library, so a scenario reproduces bit-exactly on
any platform running CPython 3.

Scenario files are flat ``key=value`` text; ``#`` starts a comment::

    seed=7
    duration_ms=600000
    request_rate=count:200          # or interarrival:<mean ms>
    size_distribution=uniform:0:65536   # or fixed:<bytes>
    delay_model=constant:100        # zero | uniform:<lo>:<hi> | explicit
    fs_config=2048:4096             # metadata bytes : chunk size
    provider_schedule=60000:0       # interval length : phase
    consumer_schedule=60000:500
    tolerance=0
    max_rounds=3
"""

from __future__ import annotations

import enum
import json
import math
import random
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .accounting import (
    AccountingParams,
    ConsumptionInterval,
    FsConfig,
    Party,
)
from .ccrp import (
    DEFAULT_MAX_ROUNDS,
    DEFAULT_TIMEOUT_STEPS,
    Channel,
    ConsumerRAS,
    ProviderRAS,
    run_interval,
)
from .errors import ScenarioError
from .evidence import (
    DEFAULT_BACKEND,
    EvidenceStore,
    KeyedIdentity,
    Keyring,
    PayloadKind,
    SignedEnvelope,
    TokenKind,
)
from .metering import MeterLog, UploadRequest, encode_record, intercept_consumer, intercept_provider

METERS_CONSUMER = "meters.consumer"
METERS_PROVIDER = "meters.provider"
EVIDENCE_AGREED = "evidence.agreed"
EVIDENCE_NON_AGREED = "evidence.nonagreed"
REPORT_TABLE = "report.txt"
REPORT_LINES = "report.jsonl"
SCENARIO_COPY = "scenario.txt"
KEYS_FILE = "keys.txt"
OUTPUT_FILES = (
    METERS_CONSUMER,
    METERS_PROVIDER,
    EVIDENCE_AGREED,
    EVIDENCE_NON_AGREED,
    REPORT_TABLE,
    REPORT_LINES,
    SCENARIO_COPY,
    KEYS_FILE,
)


def _ints(text: str, n: int, what: str) -> List[int]:
    parts = text.split(":")
    if len(parts) != n:
        raise ScenarioError(f"{what}: expected {n} ':'-separated integers, got {text!r}")
    try:
        return [int(p) for p in parts]
    except ValueError:
        raise ScenarioError(f"{what}: non-integer in {text!r}") from None


@dataclass(frozen=True)
class RequestRate:
    kind: str  # "count" or "interarrival"
    value: int

    @classmethod
    def parse(cls, text: str) -> "RequestRate":
        text = text.strip()
        if text == "0":
            return cls("count", 0)
        kind, _, value = text.partition(":")
        if kind not in ("count", "interarrival"):
            raise ScenarioError(f"request_rate: unknown kind {kind!r}")
        (v,) = _ints(value, 1, "request_rate")
        if v < 0 or (kind == "interarrival" and v == 0):
            raise ScenarioError(f"request_rate: bad value {v}")
        return cls(kind, v)

    def __str__(self):
        return f"{self.kind}:{self.value}"


@dataclass(frozen=True)
class SizeDistribution:
    low: int
    high: int

    @classmethod
    def parse(cls, text: str) -> "SizeDistribution":
        kind, _, rest = text.strip().partition(":")
        if kind == "fixed":
            (v,) = _ints(rest, 1, "size_distribution")
            lo = hi = v
        elif kind == "uniform":
            lo, hi = _ints(rest, 2, "size_distribution")
        else:
            raise ScenarioError(f"size_distribution: unknown kind {kind!r}")
        if lo < 0 or hi < lo:
            raise ScenarioError(f"size_distribution: bad bounds {lo}..{hi}")
        return cls(lo, hi)

    def sample(self, rng: random.Random) -> int:
        return self.low if self.low == self.high else rng.randint(self.low, self.high)

    def __str__(self):
        return f"fixed:{self.low}" if self.low == self.high else f"uniform:{self.low}:{self.high}"


@dataclass(frozen=True)
class DelayModel:
    kind: str  # zero | constant | uniform | explicit
    low: int = 0
    high: int = 0

    @classmethod
    def parse(cls, text: str) -> "DelayModel":
        kind, _, rest = text.strip().partition(":")
        if kind in ("zero", "explicit"):
            if rest:
                raise ScenarioError(f"delay_model: {kind} takes no arguments")
            return cls(kind)
        if kind == "constant":
            (d,) = _ints(rest, 1, "delay_model")
            lo = hi = d
        elif kind == "uniform":
            lo, hi = _ints(rest, 2, "delay_model")
        else:
            raise ScenarioError(f"delay_model: unknown kind {kind!r}")
        if lo < 0 or hi < lo:
            raise ScenarioError(f"delay_model: bad bounds {lo}..{hi}")
        return cls(kind, lo, hi)

    def __str__(self):
        if self.kind in ("zero", "explicit"):
            return self.kind
        if self.kind == "constant":
            return f"constant:{self.low}"
        return f"uniform:{self.low}:{self.high}"


@dataclass(frozen=True)
class ScheduleSpec:
    length: int
    phase: int = 0

    @classmethod
    def parse(cls, text: str) -> "ScheduleSpec":
        length, phase = _ints(text.strip(), 2, "schedule")
        if length <= 0:
            raise ScenarioError("schedule: interval length must be positive")
        return cls(length, phase)

    def __str__(self):
        return f"{self.length}:{self.phase}"


@dataclass(frozen=True)
class ExplicitRequest:
    issue_time: int
    size: int
    delay: int = 0


def _parse_requests(text: str) -> Tuple[ExplicitRequest, ...]:
    out = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        parts = _ints(item, item.count(":") + 1, "requests")
        if len(parts) == 2:
            parts.append(0)
        if len(parts) != 3 or min(parts) < 0:
            raise ScenarioError(f"requests: bad entry {item!r}")
        out.append(ExplicitRequest(*parts))
    return tuple(out)


def _parse_index_set(text: str) -> Tuple[int, ...]:
    try:
        return tuple(sorted({int(s) for s in text.split(",") if s.strip()}))
    except ValueError:
        raise ScenarioError(f"bad interval list {text!r}") from None


@dataclass(frozen=True)
class Scenario:
    seed: int = 0
    duration_ms: int = 600_000
    request_rate: RequestRate = RequestRate("count", 100)
    size_distribution: SizeDistribution = SizeDistribution(0, 65_536)
    delay_model: DelayModel = DelayModel("zero")
    fs_config: FsConfig = FsConfig()
    provider_schedule: ScheduleSpec = ScheduleSpec(60_000)
    consumer_schedule: ScheduleSpec = ScheduleSpec(60_000)
    tolerance: int = 0
    max_rounds: int = DEFAULT_MAX_ROUNDS
    # no request is issued in the last quiet_tail_ms of the run
    quiet_tail_ms: int = 0
    user_count: int = 1
    # hand-built workload; replaces request_rate/size_distribution when set
    requests: Tuple[ExplicitRequest, ...] = ()
    tamper_intervals: Tuple[int, ...] = ()
    drop_intervals: Tuple[int, ...] = ()
    timeout_steps: int = DEFAULT_TIMEOUT_STEPS
    signature_backend: str = DEFAULT_BACKEND

    def __post_init__(self):
        if self.duration_ms <= 0:
            raise ScenarioError("duration_ms must be positive")
        if self.tolerance < 0 or self.max_rounds < 0 or self.quiet_tail_ms < 0:
            raise ScenarioError("tolerance, max_rounds and quiet_tail_ms must be non-negative")
        if self.user_count < 1:
            raise ScenarioError("user_count must be at least 1")
        if self.delay_model.kind == "explicit" and not self.requests:
            raise ScenarioError("delay_model=explicit needs an explicit requests list")
        for r in self.requests:
            if r.issue_time >= self.duration_ms:
                raise ScenarioError(f"explicit request at {r.issue_time} is outside the run")


_PARSERS = {
    "seed": int,
    "duration_ms": int,
    "request_rate": RequestRate.parse,
    "size_distribution": SizeDistribution.parse,
    "delay_model": DelayModel.parse,
    "fs_config": lambda t: FsConfig(*_ints(t.strip(), 2, "fs_config")),
    "provider_schedule": ScheduleSpec.parse,
    "consumer_schedule": ScheduleSpec.parse,
    "tolerance": int,
    "max_rounds": int,
    "quiet_tail_ms": int,
    "user_count": int,
    "requests": _parse_requests,
    "tamper_intervals": _parse_index_set,
    "drop_intervals": _parse_index_set,
    "timeout_steps": int,
    "signature_backend": str.strip,
}


def parse_scenario(text: str) -> Scenario:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ScenarioError(f"line {lineno}: expected key=value")
        if key not in _PARSERS:
            raise ScenarioError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ScenarioError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _PARSERS[key](value.strip())
        except ValueError as exc:
            raise ScenarioError(f"line {lineno}: {key}: {exc}") from None
    return Scenario(**values)


def load_scenario(path) -> Scenario:
    return parse_scenario(Path(path).read_text(encoding="utf-8"))


def format_scenario(s: Scenario) -> str:
    out = []
    for f in fields(Scenario):
        v = getattr(s, f.name)
        if f.name == "fs_config":
            text = f"{v.metadata_bytes}:{v.chunk_size_bytes}"
        elif f.name == "requests":
            if not v:
                continue
            text = ",".join(f"{r.issue_time}:{r.size}:{r.delay}" for r in v)
        elif f.name in ("tamper_intervals", "drop_intervals"):
            if not v:
                continue
            text = ",".join(map(str, v))
        else:
            text = str(v)
        out.append(f"{f.name}={text}")
    return "\n".join(out) + "\n"


# -- workload and delivery ---------------------------------------------------

def _rng(scenario: Scenario, stream: str) -> random.Random:
    return random.Random(f"{scenario.seed}/{stream}")


def generate_workload(scenario: Scenario) -> List[UploadRequest]:
    """Upload requests sorted by issue time; ids are 1-based in that order."""
    users = [f"u{k}" for k in range(scenario.user_count)]
    if scenario.requests:
        times_sizes = sorted(((r.issue_time, r.size) for r in scenario.requests), key=lambda ts: ts[0])
        return [UploadRequest(i, t, s, users[(i - 1) % len(users)]) for i, (t, s) in enumerate(times_sizes, 1)]
    rng = _rng(scenario, "workload")
    horizon = scenario.duration_ms - scenario.quiet_tail_ms
    rate = scenario.request_rate
    if horizon <= 0 or rate.value == 0:
        return []
    if rate.kind == "count":
        times = sorted(rng.randrange(horizon) for _ in range(rate.value))
    else:
        times = []
        t = int(rng.expovariate(1 / rate.value))
        while t < horizon:
            times.append(t)
            t += int(rng.expovariate(1 / rate.value))
    return [
        UploadRequest(i, t, scenario.size_distribution.sample(rng), users[rng.randrange(len(users))])
        for i, t in enumerate(times, 1)
    ]


def sample_delays(requests: Sequence[UploadRequest], scenario: Scenario) -> Dict[int, int]:
    model = scenario.delay_model
    if model.kind == "explicit":
        ordered = sorted(scenario.requests, key=lambda r: r.issue_time)
        return {req.request_id: e.delay for req, e in zip(requests, ordered)}
    if model.kind == "zero":
        return {r.request_id: 0 for r in requests}
    if model.kind == "constant":
        return {r.request_id: model.low for r in requests}
    rng = _rng(scenario, "delay")
    return {r.request_id: rng.randint(model.low, model.high) for r in requests}


def deliver(requests: Sequence[UploadRequest], delays: Dict[int, int]) -> List[Tuple[int, UploadRequest]]:
    """Provider-side arrival events ``(arrival_time, request)`` in arrival order.

    Nothing is lost: requests still in flight when the run ends are delivered
    after it, into the provider's log, and only shifted windows can see them.
    Equal arrival times are ordered by request id.
    """
    events = [(r.issue_time + delays[r.request_id], r) for r in requests]
    events.sort(key=lambda e: (e[0], e[1].request_id))
    return events


def schedule_intervals(scenario: Scenario, party: Party) -> List[ConsumptionInterval]:
    """Contiguous intervals covering ``[0, duration_ms)``.

    Interior boundaries sit at ``phase + k * length``; the first interval
    starts at 0 and the last ends at the run's end.
    """
    sched = scenario.provider_schedule if party is Party.PROVIDER else scenario.consumer_schedule
    end = scenario.duration_ms
    bounds = [0]
    k = 1
    while True:
        b = sched.phase + k * sched.length
        if b >= end:
            break
        if b > 0:
            bounds.append(b)
        k += 1
    bounds.append(end)
    return [ConsumptionInterval(i, a, b) for i, (a, b) in enumerate(zip(bounds, bounds[1:]), 1)]


# -- oracle ------------------------------------------------------------------

class OracleClock(enum.Enum):
    ISSUE = "issue"
    ARRIVAL = "arrival"


def oracle_recount(
    requests: Sequence[UploadRequest],
    params: AccountingParams,
    cfg: FsConfig,
    clock: OracleClock = OracleClock.ISSUE,
    arrivals: Optional[Dict[int, int]] = None,
) -> int:
    """Brute-force consumption straight from the request list.

    ISSUE counts issue times in ``[SP, EP)``; ARRIVAL counts arrival times in
    ``[SP + TT, EP + TT)``.  Shares no code with the accounting module.
    """
    if clock is OracleClock.ISSUE:
        lo, hi = params.start_point, params.end_point
    else:
        if arrivals is None:
            raise ValueError("arrival clock needs arrival times")
        lo = params.start_point + params.transmission_time
        hi = params.end_point + params.transmission_time
    total = 0
    for req in requests:
        t = req.issue_time if clock is OracleClock.ISSUE else arrivals[req.request_id]
        if lo <= t < hi:
            total += math.ceil(Fraction(req.payload_size + cfg.metadata_bytes, cfg.chunk_size_bytes)) * cfg.chunk_size_bytes
    return total


# -- runs ----------------------------------------------------------------------

@dataclass
class IntervalReport:
    index: int
    decision: str
    rounds_used: int
    comparisons: int
    reason: str
    consumer_sc: int
    provider_sc: Optional[int]
    agreed_sc: Optional[int]
    oracle_sc: Optional[int]
    oracle_delta: Optional[int]
    final_params: Optional[Tuple[int, int, int]]

    @property
    def agreed(self) -> bool:
        return self.agreed_sc is not None


@dataclass
class RunArtifacts:
    requests: List[UploadRequest]
    arrivals: Dict[int, int]
    consumer_log: MeterLog
    provider_log: MeterLog
    provider_schedule: List[ConsumptionInterval]
    consumer_schedule: List[ConsumptionInterval]
    store: EvidenceStore
    keyring: Keyring
    consumer_history: list


@dataclass
class RunReport:
    intervals: List[IntervalReport]
    logs_unchanged: bool = True
    artifacts: Optional[RunArtifacts] = field(default=None, repr=False, compare=False)

    @property
    def agreed_count(self) -> int:
        return sum(1 for r in self.intervals if r.agreed)

    @property
    def non_agreed_count(self) -> int:
        return len(self.intervals) - self.agreed_count

    @property
    def agreed_bytes(self) -> int:
        return sum(r.agreed_sc for r in self.intervals if r.agreed)

    @property
    def all_agreed(self) -> bool:
        return self.non_agreed_count == 0

    def to_lines(self) -> str:
        rows = [json.dumps(r.__dict__, sort_keys=True) for r in self.intervals]
        rows.append(json.dumps(
            {
                "totals": {
                    "intervals": len(self.intervals),
                    "agreed": self.agreed_count,
                    "non_agreed": self.non_agreed_count,
                    "agreed_bytes": self.agreed_bytes,
                    "logs_unchanged": self.logs_unchanged,
                }
            },
            sort_keys=True,
        ))
        return "\n".join(rows) + "\n"

    def to_table(self) -> str:
        head = ("interval", "decision", "rounds", "compares", "reason", "consumer_sc", "provider_sc", "agreed_sc", "oracle_delta")
        rows = [head]
        dash = lambda v: "-" if v is None else str(v)  # noqa: E731
        for r in self.intervals:
            rows.append((str(r.index), r.decision, str(r.rounds_used), str(r.comparisons), r.reason,
                         str(r.consumer_sc), dash(r.provider_sc), dash(r.agreed_sc), dash(r.oracle_delta)))
        widths = [max(len(row[i]) for row in rows) for i in range(len(head))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
        n = len(self.intervals)
        pct = 100.0 * self.agreed_count / n if n else 100.0
        lines.append("")
        lines.append(
            f"intervals={n} agreed={self.agreed_count} non_agreed={self.non_agreed_count} "
            f"agreed_pct={pct:.1f} agreed_bytes={self.agreed_bytes} logs_unchanged={self.logs_unchanged}"
        )
        return "\n".join(lines) + "\n"


def _flip_last_byte(env: SignedEnvelope) -> SignedEnvelope:
    p = bytearray(env.payload)
    p[-1] ^= 0x01
    return env.with_payload(bytes(p))


def _make_fault(scenario: Scenario, current: List[int]):
    tamper, drop = set(scenario.tamper_intervals), set(scenario.drop_intervals)
    if not tamper and not drop:
        return None

    def fault(recipient, msg):
        idx = current[0]
        if recipient is not Party.CONSUMER:
            return msg
        if idx in drop:
            return None
        if (
            idx in tamper
            and isinstance(msg, SignedEnvelope)
            and msg.token_kind is TokenKind.NRO
            and msg.payload_kind is PayloadKind.ACCOUNTING_RECORD
        ):
            return _flip_last_byte(msg)
        return msg

    return fault


def _snapshot(log: MeterLog) -> bytes:
    if log.path is not None:
        return log.path.read_bytes()
    return "".join(encode_record(r) + "\n" for r in log.entries).encode()


def run(scenario: Scenario, out_dir=None) -> RunReport:
    """Meter the whole workload, then settle every interval in order."""
    p_sched = schedule_intervals(scenario, Party.PROVIDER)
    c_sched = schedule_intervals(scenario, Party.CONSUMER)
    if len(p_sched) != len(c_sched):
        raise ScenarioError(
            f"provider schedule has {len(p_sched)} intervals, consumer schedule {len(c_sched)}"
        )

    paths = {}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name in OUTPUT_FILES:
            (out_dir / name).unlink(missing_ok=True)
            paths[name] = out_dir / name
        (out_dir / SCENARIO_COPY).write_text(format_scenario(scenario), encoding="utf-8")

    requests = generate_workload(scenario)
    delays = sample_delays(requests, scenario)
    events = deliver(requests, delays)
    arrivals = {r.request_id: t for t, r in events}

    c_log = MeterLog(Party.CONSUMER, paths.get(METERS_CONSUMER))
    p_log = MeterLog(Party.PROVIDER, paths.get(METERS_PROVIDER))
    if paths:
        paths[METERS_CONSUMER].touch()
        paths[METERS_PROVIDER].touch()
    for req in requests:
        c_log.append(intercept_consumer(req))
    for t, req in events:
        p_log.append(intercept_provider(req, t))

    backend = scenario.signature_backend
    provider_id = KeyedIdentity.derive("provider", scenario.seed, backend)
    consumer_id = KeyedIdentity.derive("consumer", scenario.seed, backend)
    keyring = Keyring(provider_id.public(), consumer_id.public())
    if paths:
        paths[KEYS_FILE].write_text(
            "# party_id backend verification_key_hex\n"
            + "".join(f"{k.party_id}\t{k.backend}\t{k.key.hex()}\n" for k in (keyring.provider, keyring.consumer)),
            encoding="utf-8",
        )
    store = EvidenceStore(keyring, consumer_id, paths.get(EVIDENCE_AGREED), paths.get(EVIDENCE_NON_AGREED))

    before = (_snapshot(c_log), _snapshot(p_log))
    cfg = scenario.fs_config
    provider = ProviderRAS(provider_id, keyring, p_log, p_sched, cfg, scenario.max_rounds)
    consumer = ConsumerRAS(
        consumer_id, keyring, c_log, c_sched, cfg, scenario.tolerance, scenario.max_rounds, scenario.timeout_steps
    )
    current = [0]
    channel = Channel(_make_fault(scenario, current))

    reports = []
    for interval in p_sched:
        current[0] = interval.index
        outcome = run_interval(consumer, provider, channel, interval.index, store)
        agreed = store.outcome(interval.index) in store.agreed
        agreed_sc = oracle_sc = delta = final = None
        if outcome.decision is not None:
            final = outcome.decision.final_params.fields()
        if agreed:
            agreed_sc = outcome.decision.storage_consumed
            oracle_sc = oracle_recount(requests, outcome.decision.final_params, cfg)
            delta = agreed_sc - oracle_sc
        reports.append(IntervalReport(
            index=interval.index,
            decision="-" if outcome.decision is None else outcome.decision.value.value,
            rounds_used=outcome.rounds_used,
            comparisons=outcome.comparisons,
            reason="-" if outcome.reason is None else outcome.reason.value,
            consumer_sc=outcome.consumer_record.storage_consumed,
            provider_sc=None if outcome.provider_record is None else outcome.provider_record.storage_consumed,
            agreed_sc=agreed_sc,
            oracle_sc=oracle_sc,
            oracle_delta=delta,
            final_params=final,
        ))

    after = (_snapshot(c_log), _snapshot(p_log))
    report = RunReport(reports, logs_unchanged=before == after)
    report.artifacts = RunArtifacts(
        requests, arrivals, c_log, p_log, p_sched, c_sched, store, keyring, list(consumer.history)
    )
    if paths:
        paths[REPORT_TABLE].write_text(report.to_table(), encoding="utf-8")
        paths[REPORT_LINES].write_text(report.to_lines(), encoding="utf-8")
    return report


def with_overrides(scenario: Scenario, **overrides) -> Scenario:
    """Copy of ``scenario`` with the non-None overrides applied."""
    return replace(scenario, **{k: v for k, v in overrides.items() if v is not None})
