"""Offline checks over a run's output directory."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .accounting import (
    AccountingRecord,
    ClockField,
    ConsumptionInterval,
    Party,
    interval_consumption,
    shifted_interval_consumption,
)
from .ccrp import decode_transcript
from . import encoding
from .errors import EncodingError
from .evidence import (
    AGREED,
    NON_AGREED,
    IntervalOutcome,
    Keyring,
    VerifierKey,
    check_evidence_line,
    parse_entry_line,
    read_evidence_file,
)
from .metering import MeterLog
from .simulator import (
    EVIDENCE_AGREED,
    EVIDENCE_NON_AGREED,
    KEYS_FILE,
    METERS_CONSUMER,
    METERS_PROVIDER,
    SCENARIO_COPY,
    load_scenario,
    schedule_intervals,
)


def load_keyring(path) -> Keyring:
    keys: Dict[str, VerifierKey] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        party, backend, hexkey = line.split("\t")
        keys[party] = VerifierKey(party, backend, bytes.fromhex(hexkey))
    return Keyring(keys["provider"], keys["consumer"])


@dataclass
class VerifyResult:
    problems: List[str] = field(default_factory=list)
    entries_checked: int = 0

    @property
    def ok(self) -> bool:
        return not self.problems


def _rederive(outcome: IntervalOutcome, c_log: MeterLog, p_log: MeterLog, cfg, tolerance: int) -> List[str]:
    d = outcome.decision
    fp = d.final_params
    problems = []
    mine = interval_consumption(
        c_log.entries, ConsumptionInterval(d.interval_index, fp.start_point, fp.end_point), cfg, ClockField.RTS
    )
    if mine.storage_consumed != d.storage_consumed:
        problems.append(
            f"consumer log gives {mine.storage_consumed} under final params, decision says {d.storage_consumed}"
        )
    try:
        sr_p = AccountingRecord.from_bytes(outcome.envelopes[0].payload)
    except (EncodingError, ValueError) as exc:
        return problems + [f"undecodable provider record: {exc}"]
    p_interval = ConsumptionInterval(d.interval_index, sr_p.params.start_point, sr_p.params.end_point)
    theirs = shifted_interval_consumption(p_log.entries, p_interval, fp.transmission_time, cfg)
    if abs(theirs.storage_consumed - d.storage_consumed) > tolerance:
        problems.append(
            f"provider log gives {theirs.storage_consumed} at shift {fp.transmission_time}, "
            f"decision says {d.storage_consumed}"
        )
    return problems


def verify_run(out_dir) -> VerifyResult:
    """Re-check every stored entry and re-derive every agreed amount from the meter logs."""
    out_dir = Path(out_dir)
    result = VerifyResult()
    try:
        keyring = load_keyring(out_dir / KEYS_FILE)
        scenario = load_scenario(out_dir / SCENARIO_COPY)
        c_log = MeterLog.load(out_dir / METERS_CONSUMER, Party.CONSUMER)
        p_log = MeterLog.load(out_dir / METERS_PROVIDER, Party.PROVIDER)
    except (OSError, ValueError, KeyError) as exc:
        result.problems.append(f"cannot load run directory: {exc}")
        return result

    seen: Dict[int, str] = {}
    for fname, status in ((EVIDENCE_AGREED, AGREED), (EVIDENCE_NON_AGREED, NON_AGREED)):
        try:
            lines = read_evidence_file(out_dir / fname)
        except (OSError, UnicodeDecodeError) as exc:
            result.problems.append(f"{fname}: unreadable: {exc}")
            continue
        for lineno, text in lines:
            where = f"{fname}:{lineno}"
            try:
                ev = parse_entry_line(text, lineno)
            except EncodingError as exc:
                result.problems.append(f"{where}: unparseable entry: {exc}")
                continue
            where += f" (interval {ev.interval_index})"
            result.entries_checked += 1
            outcome, problems = check_evidence_line(ev, keyring, status)
            if outcome is not None and status == AGREED and not problems:
                problems = _rederive(outcome, c_log, p_log, scenario.fs_config, scenario.tolerance)
            if outcome is not None:
                counters = [r.counter for r, _ in _safe_transcript(outcome)]
                if counters != list(range(len(counters))):
                    problems.append(f"transcript counters {counters} are not 0..n-1")
            result.problems += [f"{where}: {p}" for p in problems]
            if ev.interval_index in seen:
                result.problems.append(f"{where}: interval also recorded in {seen[ev.interval_index]}")
            seen[ev.interval_index] = where

    expected = {ci.index for ci in schedule_intervals(scenario, Party.PROVIDER)}
    missing = sorted(expected - set(seen))
    if missing:
        result.problems.append(f"intervals without a terminal entry: {missing}")
    return result


def _safe_transcript(outcome: IntervalOutcome):
    try:
        return decode_transcript(outcome)
    except (EncodingError, ValueError):
        return []


def find_outcome(out_dir, interval_index: int) -> Optional[Tuple[str, IntervalOutcome]]:
    out_dir = Path(out_dir)
    for fname, status in ((EVIDENCE_AGREED, AGREED), (EVIDENCE_NON_AGREED, NON_AGREED)):
        for lineno, text in read_evidence_file(out_dir / fname):
            ev = parse_entry_line(text, lineno)
            if ev.interval_index == interval_index:
                return status, IntervalOutcome.from_fields(encoding.decode(ev.entry))
    return None


def format_replay(status: str, outcome: IntervalOutcome) -> str:
    lines = [f"interval {outcome.interval_index}: {status}"
             + ("" if outcome.reason is None else f" ({outcome.reason.value})")]
    if outcome.provider_record is not None:
        lines.append(f"  provider proposed SC={outcome.provider_record.storage_consumed} "
                     f"params={outcome.provider_record.params.fields()}")
    if outcome.consumer_record is not None:
        lines.append(f"  consumer final SC={outcome.consumer_record.storage_consumed} "
                     f"params={outcome.consumer_record.params.fields()}")
    pairs = decode_transcript(outcome)
    if not pairs:
        lines.append("  no negotiation took place (empty transcript)")
    for n, (req, resp) in enumerate(pairs, 1):
        kinds = ",".join(sorted(k.value for k in resp.conflicting)) or "none"
        lines.append(f"  round {n}: request counter={req.counter} consumer_params={req.consumer_params.fields()}")
        lines.append(f"           response counter={resp.counter} provider_params={resp.provider_params.fields()} "
                     f"conflicting={kinds} stop={resp.stop} compensated_sc={resp.compensated_sc}")
    if outcome.decision is not None:
        d = outcome.decision
        lines.append(f"  decision {d.value.value} after {d.rounds_used} round(s), "
                     f"SC={d.storage_consumed}, final params={d.final_params.fields()}")
    lines.append("  tokens: " + (", ".join(f"{e.token_kind.value}({e.payload_kind.value})" for e in outcome.envelopes) or "none"))
    return "\n".join(lines) + "\n"
