"""Comparison and conflict resolution between the two accounting services.

The provider proposes a signed record for an interval.  The consumer
recomputes its own record and compares.  While they differ it asks the
provider for its accounting parameters and adopts them one class per round:
interval bounds in round 1, then transmission time from round 2 on.  Once
the TT is adopted the comparison target becomes the provider's TT-shifted
figure, which the provider ships in every response.  When the provider has
nothing left that differs, or the round budget is spent, it answers with
``stop`` and the interval is escalated.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass
from typing import Callable, Dict, FrozenSet, List, Optional, Sequence, Tuple

from . import encoding
from .accounting import (
    AccountingParams,
    AccountingRecord,
    ClockField,
    ConsumptionInterval,
    FsConfig,
    Party,
    interval_consumption,
    shifted_interval_consumption,
    tt_average,
)
from .errors import CounterViolation, EmptyInput, EncodingError, InvalidSignature
from .evidence import (
    Decision,
    DecisionValue,
    EvidenceStore,
    IntervalOutcome,
    KeyedIdentity,
    Keyring,
    PayloadKind,
    Reason,
    SignedEnvelope,
    TokenKind,
    step1_propose,
    step2_validate_deliver,
    step4_submit_decision,
    step5_ack,
    verify,
)
from .metering import MeterLog

DEFAULT_MAX_ROUNDS = 3
DEFAULT_TIMEOUT_STEPS = 16


class ConflictKind(enum.Enum):
    INTERVAL_BOUNDS = "IntervalBounds"
    TRANSMISSION_TIME = "TransmissionTime"


# adoption order; position + 1 is the first round a kind may be adopted in
PRIORITY = (ConflictKind.INTERVAL_BOUNDS, ConflictKind.TRANSMISSION_TIME)


@dataclass(frozen=True)
class NegotiationRequest:
    interval_index: int
    consumer_params: AccountingParams
    counter: int

    def to_bytes(self) -> bytes:
        return encoding.encode(("NReq", self.interval_index, self.consumer_params.fields(), self.counter))

    @classmethod
    def from_bytes(cls, data: bytes) -> "NegotiationRequest":
        tag, idx, params, counter = encoding.expect_shape(encoding.decode(data), 4, "negotiation request")
        if tag != "NReq":
            raise EncodingError("not a negotiation request")
        return cls(idx, AccountingParams.from_fields(params), counter)


@dataclass(frozen=True)
class NegotiationResponse:
    interval_index: int
    provider_params: AccountingParams
    counter: int
    conflicting: FrozenSet[ConflictKind]
    stop: bool
    # provider's consumption over its interval shifted by its own TT
    compensated_sc: int = 0

    def to_bytes(self) -> bytes:
        kinds = tuple(k.value for k in PRIORITY if k in self.conflicting)
        return encoding.encode(
            ("NRes", self.interval_index, self.provider_params.fields(), self.counter, kinds, self.stop, self.compensated_sc)
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "NegotiationResponse":
        tag, idx, params, counter, kinds, stop, csc = encoding.expect_shape(
            encoding.decode(data), 7, "negotiation response"
        )
        if tag != "NRes":
            raise EncodingError("not a negotiation response")
        return cls(idx, AccountingParams.from_fields(params), counter, frozenset(ConflictKind(k) for k in kinds), stop, csc)


@dataclass(frozen=True)
class DecisionBundle:
    """Step-4 message: receipt for the proposal plus the signed decision."""

    nrr_sr: SignedEnvelope
    nro_decn: SignedEnvelope


def compare(sr_c: AccountingRecord, sr_p: AccountingRecord, tolerance: int = 0) -> DecisionValue:
    if sr_c.interval_index != sr_p.interval_index:
        raise ValueError("records belong to different intervals")
    if abs(sr_c.storage_consumed - sr_p.storage_consumed) <= tolerance:
        return DecisionValue.YES
    return DecisionValue.NO


# -- transport ---------------------------------------------------------------

Fault = Callable[[Party, object], Optional[object]]


class Channel:
    """In-memory FIFO mailboxes, one per party.

    ``fault`` sees every message before delivery and may return a modified
    message, or None to drop it.
    """

    def __init__(self, fault: Optional[Fault] = None):
        self.fault = fault
        self._boxes: Dict[Party, deque] = {Party.CONSUMER: deque(), Party.PROVIDER: deque()}

    def send(self, recipient: Party, msg) -> None:
        if self.fault is not None:
            msg = self.fault(recipient, msg)
            if msg is None:
                return
        self._boxes[recipient].append(msg)

    def receive(self, recipient: Party):
        box = self._boxes[recipient]
        return box.popleft() if box else None

    def in_flight(self) -> int:
        return sum(len(b) for b in self._boxes.values())

    def clear(self) -> None:
        for box in self._boxes.values():
            box.clear()


# -- provider side -------------------------------------------------------------

class ProviderState(enum.Enum):
    IDLE = "Idle"
    AWAIT_REQUEST = "AwaitRequest"
    DONE = "Done"


@dataclass(frozen=True)
class ProviderAccount:
    interval: ConsumptionInterval
    record: AccountingRecord
    compensated_sc: int


def provider_accounts(log: MeterLog, schedule: Sequence[ConsumptionInterval], cfg: FsConfig) -> List[ProviderAccount]:
    """SR_p for every interval of the provider's schedule.

    TT is averaged over the interval's own arrivals; an interval with no
    arrivals carries the previous average forward (0 before any arrival).
    """
    out = []
    tt = 0
    for interval in schedule:
        window = log.read_window(interval.start_point, interval.end_point, ClockField.RRT)
        try:
            tt = tt_average(window)
        except EmptyInput:
            pass
        record = interval_consumption(window, interval, cfg, ClockField.RRT, transmission_time=tt)
        shifted = shifted_interval_consumption(log.entries, interval, tt, cfg)
        out.append(ProviderAccount(interval, record, shifted.storage_consumed))
    return out


class ProviderRAS:
    def __init__(
        self,
        identity: KeyedIdentity,
        keyring: Keyring,
        log: MeterLog,
        schedule: Sequence[ConsumptionInterval],
        cfg: FsConfig,
        max_rounds: int = DEFAULT_MAX_ROUNDS,
    ):
        self.identity = identity
        self.keyring = keyring
        self.log = log
        self.cfg = cfg
        self.max_rounds = max_rounds
        self.accounts = {a.interval.index: a for a in provider_accounts(log, schedule, cfg)}
        self.state = ProviderState.IDLE
        self.current: Optional[int] = None
        self.proposal: Optional[SignedEnvelope] = None
        self.expected_counter = 0
        self.acknowledged: Dict[int, SignedEnvelope] = {}

    def account(self, interval_index: int) -> ProviderAccount:
        return self.accounts[interval_index]

    def propose(self, interval_index: int) -> SignedEnvelope:
        if self.state is ProviderState.AWAIT_REQUEST:
            raise RuntimeError(f"interval {self.current} still open")
        self.current = interval_index
        self.expected_counter = 0
        self.proposal = step1_propose(self.identity, self.account(interval_index).record)
        self.state = ProviderState.AWAIT_REQUEST
        return self.proposal

    def handle(self, msg) -> List[Tuple[Party, object]]:
        if self.state is not ProviderState.AWAIT_REQUEST:
            return []
        if isinstance(msg, NegotiationRequest):
            if msg.interval_index != self.current:
                raise CounterViolation(f"request for interval {msg.interval_index}, open is {self.current}")
            if msg.counter != self.expected_counter:
                raise CounterViolation(f"request counter {msg.counter}, expected {self.expected_counter}")
            resp = provider_handle(msg, self)
            self.expected_counter = resp.counter
            return [(Party.CONSUMER, resp)]
        if isinstance(msg, DecisionBundle):
            try:
                ack = step5_ack(self.identity, msg.nrr_sr, msg.nro_decn, self.keyring.consumer, self.proposal)
            except InvalidSignature:
                return []  # consumer times out waiting for NRR(decn)
            self.acknowledged[self.current] = ack
            self.state = ProviderState.DONE
            return [(Party.CONSUMER, ack)]
        return []

    def release(self) -> None:
        """Abandon an interval the consumer has already terminated."""
        self.state = ProviderState.DONE


def provider_handle(req: NegotiationRequest, provider: ProviderRAS) -> NegotiationResponse:
    acct = provider.account(req.interval_index)
    mine = acct.record.params
    theirs = req.consumer_params
    conflicting = set()
    if (theirs.start_point, theirs.end_point) != (mine.start_point, mine.end_point):
        conflicting.add(ConflictKind.INTERVAL_BOUNDS)
    if theirs.transmission_time != mine.transmission_time:
        conflicting.add(ConflictKind.TRANSMISSION_TIME)
    stop = req.counter >= provider.max_rounds or not conflicting
    return NegotiationResponse(
        req.interval_index, mine, req.counter + 1, frozenset(conflicting), stop, acct.compensated_sc
    )


# -- consumer side -------------------------------------------------------------

class ConsumerState(enum.Enum):
    IDLE = "Idle"
    AWAIT_RECORD = "AwaitRecord"
    COMPARING = "Comparing"
    AWAIT_RESPONSE = "AwaitResponse"
    DECIDING = "Deciding"
    DONE = "Done"


_C = ConsumerState
CONSUMER_EDGES = {
    _C.IDLE: {_C.AWAIT_RECORD},
    _C.AWAIT_RECORD: {_C.COMPARING, _C.DONE},
    _C.COMPARING: {_C.AWAIT_RESPONSE, _C.DECIDING},
    _C.AWAIT_RESPONSE: {_C.COMPARING, _C.DECIDING, _C.DONE},
    _C.DECIDING: {_C.DONE},
    _C.DONE: {_C.AWAIT_RECORD},
}


class ConsumerRAS:
    def __init__(
        self,
        identity: KeyedIdentity,
        keyring: Keyring,
        log: MeterLog,
        schedule: Sequence[ConsumptionInterval],
        cfg: FsConfig,
        tolerance: int = 0,
        max_rounds: int = DEFAULT_MAX_ROUNDS,
        timeout_steps: int = DEFAULT_TIMEOUT_STEPS,
    ):
        self.identity = identity
        self.keyring = keyring
        self.log = log
        self.schedule = {ci.index: ci for ci in schedule}
        self.cfg = cfg
        self.tolerance = tolerance
        self.max_rounds = max_rounds
        self.timeout_steps = timeout_steps
        self.state = ConsumerState.IDLE
        self.history: List[ConsumerState] = [self.state]
        self._reset(None)

    def _reset(self, interval_index: Optional[int]) -> None:
        self.index = interval_index
        self.working: Optional[AccountingParams] = None
        self.proposal: Optional[SignedEnvelope] = None
        self.sr_p: Optional[AccountingRecord] = None
        self.sr_c: Optional[AccountingRecord] = None
        self.tt_adopted = False
        self.last_response: Optional[NegotiationResponse] = None
        self.pending: Optional[NegotiationRequest] = None
        self.transcript: List[Tuple[bytes, bytes]] = []
        self.adoptions: List[Tuple[int, ConflictKind]] = []
        self.comparisons = 0
        self.decision: Optional[Decision] = None
        self.envelopes: List[SignedEnvelope] = []
        self.idle_steps = 0
        self._pending_reason: Optional[Reason] = None
        self.outcome: Optional[IntervalOutcome] = None

    def _enter(self, state: ConsumerState) -> None:
        if state not in CONSUMER_EDGES[self.state]:
            raise RuntimeError(f"illegal transition {self.state.value} -> {state.value}")
        self.state = state
        self.history.append(state)

    def expect(self, interval_index: int) -> None:
        self._enter(ConsumerState.AWAIT_RECORD)
        self._reset(interval_index)
        own = self.schedule[interval_index]
        self.working = AccountingParams(own.start_point, own.end_point, 0)

    # recompute SR_c from the meter log under the working params
    def recompute(self) -> AccountingRecord:
        w = self.working
        interval = ConsumptionInterval(self.index, w.start_point, w.end_point)
        self.sr_c = interval_consumption(self.log.entries, interval, self.cfg, ClockField.RTS, transmission_time=w.transmission_time)
        return self.sr_c

    def comparison_target(self) -> AccountingRecord:
        if self.tt_adopted and self.last_response is not None:
            r = self.last_response
            return AccountingRecord(self.index, Party.PROVIDER, r.provider_params, r.compensated_sc, self.sr_p.request_count)
        return self.sr_p

    def handle(self, msg) -> List[Tuple[Party, object]]:
        self.idle_steps = 0
        if self.state is ConsumerState.AWAIT_RECORD and isinstance(msg, SignedEnvelope):
            return self._on_proposal(msg)
        if self.state is ConsumerState.AWAIT_RESPONSE and isinstance(msg, NegotiationResponse):
            return self._on_response(msg)
        if self.state is ConsumerState.DECIDING and isinstance(msg, SignedEnvelope):
            return self._on_ack(msg)
        return []

    def tick(self) -> List[Tuple[Party, object]]:
        """One simulation step with nothing delivered to either party."""
        if self.state in (ConsumerState.AWAIT_RECORD, ConsumerState.AWAIT_RESPONSE, ConsumerState.DECIDING):
            self.idle_steps += 1
            if self.idle_steps >= self.timeout_steps:
                self.abort(Reason.TIMEOUT)
        return []

    def abort(self, reason: Reason) -> None:
        if self.state is ConsumerState.DONE:
            return
        if self.sr_c is None and self.index is not None:
            self.recompute()
        self._finish(reason)

    def _on_proposal(self, env: SignedEnvelope):
        self.proposal = env
        try:
            self.sr_p = step2_validate_deliver(env, self.keyring.provider)
        except InvalidSignature:
            self.envelopes = [env]
            self.recompute()
            self._finish(Reason.TAMPER)
            return []
        if self.sr_p.interval_index != self.index:
            self.envelopes = [env]
            self.recompute()
            self._finish(Reason.PROTOCOL_ERROR)
            return []
        self.envelopes = [env]
        return self._compare_and_act()

    def _compare_and_act(self):
        self._enter(ConsumerState.COMPARING)
        if self.sr_c is None or self.comparisons == 0:
            self.recompute()
        self.comparisons += 1
        if compare(self.sr_c, self.comparison_target(), self.tolerance) is DecisionValue.YES:
            return self._decide(DecisionValue.YES)
        counter = 0 if self.last_response is None else self.last_response.counter
        self.pending = NegotiationRequest(self.index, self.working, counter)
        self._enter(ConsumerState.AWAIT_RESPONSE)
        return [(Party.PROVIDER, self.pending)]

    def _on_response(self, resp: NegotiationResponse):
        req = self.pending
        if resp.interval_index != self.index or resp.counter != req.counter + 1:
            self._finish(Reason.PROTOCOL_ERROR)
            return []
        self.transcript.append((req.to_bytes(), resp.to_bytes()))
        self.last_response = resp
        if resp.stop:
            reason = Reason.ROUNDS_EXHAUSTED if resp.conflicting else Reason.UNEXPLAINED_DIVERGENCE
            return self._decide(DecisionValue.NO, reason)
        if resp.counter > self.max_rounds:
            self._finish(Reason.PROTOCOL_ERROR)
            return []
        consumer_apply(resp, self)
        return self._compare_and_act()

    def _decide(self, value: DecisionValue, reason: Optional[Reason] = None):
        if self.state is not ConsumerState.COMPARING:
            self._enter(ConsumerState.COMPARING)
        self.decision = Decision(self.index, value, self.working, len(self.transcript), self.sr_c.storage_consumed)
        self._pending_reason = reason
        nrr_sr, nro_decn = step4_submit_decision(self.identity, self.decision, self.proposal)
        self.envelopes = [self.proposal, nrr_sr, nro_decn]
        self._enter(ConsumerState.DECIDING)
        return [(Party.PROVIDER, DecisionBundle(nrr_sr, nro_decn))]

    def _on_ack(self, env: SignedEnvelope):
        nro_decn = self.envelopes[2]
        if (
            env.payload_kind is not PayloadKind.DECISION
            or env.token_kind is not TokenKind.NRR
            or env.payload != nro_decn.digest()
            or not verify(env, self.keyring.provider)
        ):
            self._finish(Reason.PROTOCOL_ERROR)
            return []
        self.envelopes.append(env)
        self._finish(self._pending_reason)
        return []

    def _finish(self, reason: Optional[Reason]) -> None:
        self.outcome = IntervalOutcome(
            interval_index=self.index,
            decision=self.decision,
            reason=reason,
            consumer_record=self.sr_c,
            provider_record=self.sr_p,
            envelopes=tuple(self.envelopes),
            transcript=tuple(self.transcript),
            rounds_used=len(self.transcript),
            comparisons=self.comparisons,
        )
        self.state = ConsumerState.DONE
        self.history.append(ConsumerState.DONE)


def consumer_apply(resp: NegotiationResponse, consumer: ConsumerRAS) -> AccountingRecord:
    """Adopt the provider's conflicting parameters allowed this round, then recompute SR_c."""
    if consumer.pending is not None and (
        resp.interval_index != consumer.pending.interval_index or resp.counter != consumer.pending.counter + 1
    ):
        raise CounterViolation(f"response counter {resp.counter} does not answer request {consumer.pending.counter}")
    w = consumer.working
    sp, ep, tt = w.start_point, w.end_point, w.transmission_time
    p = resp.provider_params
    for position, kind in enumerate(PRIORITY):
        if kind not in resp.conflicting or resp.counter < position + 1:
            continue
        if kind is ConflictKind.INTERVAL_BOUNDS:
            sp, ep = p.start_point, p.end_point
        else:
            tt = p.transmission_time
            consumer.tt_adopted = True
        consumer.adoptions.append((resp.counter, kind))
    consumer.working = AccountingParams(sp, ep, tt)
    consumer.last_response = resp
    return consumer.recompute()


def run_interval(
    consumer: ConsumerRAS,
    provider: ProviderRAS,
    channel: Channel,
    interval_index: int,
    store: Optional[EvidenceStore] = None,
) -> IntervalOutcome:
    """Drive one interval from proposal to a terminal outcome.

    Each step delivers at most one message to each party, provider first;
    a step with nothing to deliver counts toward the consumer's timeout.
    """
    consumer.expect(interval_index)
    channel.send(Party.CONSUMER, provider.propose(interval_index))
    while consumer.state is not ConsumerState.DONE:
        delivered = False
        for party, handler in ((Party.PROVIDER, provider), (Party.CONSUMER, consumer)):
            msg = channel.receive(party)
            if msg is None:
                continue
            delivered = True
            try:
                out = handler.handle(msg)
            except CounterViolation:
                consumer.abort(Reason.PROTOCOL_ERROR)
                break
            for recipient, m in out:
                channel.send(recipient, m)
            if consumer.state is ConsumerState.DONE:
                break
        if not delivered:
            consumer.tick()
    if provider.state is ProviderState.AWAIT_REQUEST:
        provider.release()
    channel.clear()
    outcome = consumer.outcome
    if store is not None:
        store.commit(outcome)
    return outcome


def decode_transcript(outcome: IntervalOutcome) -> List[Tuple[NegotiationRequest, NegotiationResponse]]:
    return [(NegotiationRequest.from_bytes(a), NegotiationResponse.from_bytes(b)) for a, b in outcome.transcript]
