import dataclasses
import random

import pytest

from bilateral.accounting import AccountingParams, AccountingRecord, ConsumptionInterval, FsConfig, Party
from bilateral.ccrp import (
    PRIORITY,
    Channel,
    ConflictKind,
    ConsumerRAS,
    ConsumerState,
    NegotiationRequest,
    NegotiationResponse,
    ProviderRAS,
    compare,
    consumer_apply,
    decode_transcript,
    provider_handle,
    run_interval,
)
from bilateral.errors import CounterViolation
from bilateral.evidence import DecisionValue, EvidenceStore, KeyedIdentity, Keyring, Reason, SignedEnvelope
from bilateral.metering import MeterLog, UploadRequest, intercept_consumer, intercept_provider

CFG = FsConfig(2048, 4096)
IB, TT = ConflictKind.INTERVAL_BOUNDS, ConflictKind.TRANSMISSION_TIME


def schedule(*bounds):
    return [ConsumptionInterval(i, a, b) for i, (a, b) in enumerate(zip(bounds, bounds[1:]), 1)]


def pair(uploads, p_sched, c_sched, max_rounds=3, tolerance=0, timeout_steps=16):
    """Provider and consumer services over ``uploads`` given as (issue, size, delay)."""
    c_log, p_log = MeterLog(Party.CONSUMER), MeterLog(Party.PROVIDER)
    reqs = [UploadRequest(i, t, s) for i, (t, s, _) in enumerate(uploads, 1)]
    for r in reqs:
        c_log.append(intercept_consumer(r))
    for r, (_, _, d) in sorted(zip(reqs, uploads), key=lambda x: (x[0].issue_time + x[1][2], x[0].request_id)):
        p_log.append(intercept_provider(r, r.issue_time + d))
    p_id = KeyedIdentity.derive("provider", 5)
    c_id = KeyedIdentity.derive("consumer", 5)
    ring = Keyring(p_id.public(), c_id.public())
    provider = ProviderRAS(p_id, ring, p_log, p_sched, CFG, max_rounds)
    consumer = ConsumerRAS(c_id, ring, c_log, c_sched, CFG, tolerance, max_rounds, timeout_steps)
    return consumer, provider, EvidenceStore(ring, c_id)


JITTER = [(50, 0, 0), (400, 10240, 200), (950, 4096, 100), (1500, 10240, 100), (2500, 20000, 100)]


def rec(sc, params=AccountingParams(0, 1000, 0)):
    return AccountingRecord(1, Party.CONSUMER, params, sc, 1)


class TestCompare:
    def test_equal(self):
        assert compare(rec(24576), rec(24576)) is DecisionValue.YES

    def test_differ(self):
        assert compare(rec(24576), rec(16384)) is DecisionValue.NO

    def test_tolerance_covers_one_chunk(self):
        assert compare(rec(24576), rec(28672)) is DecisionValue.NO
        assert compare(rec(24576), rec(28672), tolerance=4096) is DecisionValue.YES

    def test_tolerance(self):
        assert compare(rec(24576), rec(20480), tolerance=4096) is DecisionValue.YES
        assert compare(rec(24576), rec(20480), tolerance=4095) is DecisionValue.NO

    def test_params_ignored(self):
        assert compare(rec(8192), rec(8192, AccountingParams(5, 6, 7))) is DecisionValue.YES

    def test_interval_mismatch(self):
        other = AccountingRecord(2, Party.PROVIDER, AccountingParams(0, 1, 0), 0, 0)
        with pytest.raises(ValueError):
            compare(rec(0), other)


class TestMessages:
    def test_request_roundtrip(self):
        req = NegotiationRequest(4, AccountingParams(1, 2, 3), 2)
        assert NegotiationRequest.from_bytes(req.to_bytes()) == req

    def test_response_roundtrip(self):
        resp = NegotiationResponse(4, AccountingParams(1, 2, 3), 3, frozenset({IB, TT}), True, 8192)
        assert NegotiationResponse.from_bytes(resp.to_bytes()) == resp

    def test_wrong_tag(self):
        req = NegotiationRequest(4, AccountingParams(1, 2, 3), 2)
        with pytest.raises(ValueError):
            NegotiationResponse.from_bytes(req.to_bytes())


class TestProviderHandle:
    def test_agreeing_params_stop(self):
        _, provider, _ = pair([(10, 0, 0)], schedule(0, 1000), schedule(0, 1000))
        resp = provider_handle(NegotiationRequest(1, AccountingParams(0, 1000, 0), 0), provider)
        assert resp.conflicting == frozenset()
        assert resp.stop
        assert resp.counter == 1
        assert resp.provider_params == AccountingParams(0, 1000, 0)

    def test_bounds_and_tt_conflict(self):
        _, provider, _ = pair([(10, 0, 100)], schedule(0, 1000), schedule(0, 1000))
        resp = provider_handle(NegotiationRequest(1, AccountingParams(0, 1500, 0), 1), provider)
        assert resp.conflicting == {IB, TT}
        assert not resp.stop
        assert resp.counter == 2

    def test_round_budget_forces_stop(self):
        _, provider, _ = pair([(10, 0, 0)], schedule(0, 1000), schedule(0, 1000), max_rounds=3)
        resp = provider_handle(NegotiationRequest(1, AccountingParams(0, 999, 0), 3), provider)
        assert resp.conflicting == {IB}
        assert resp.stop

    def test_compensated_sc_is_shifted_count(self):
        _, provider, _ = pair(JITTER, schedule(0, 1000, 2000, 3000), schedule(0, 1000, 2000, 3000))
        acct = provider.account(1)
        assert acct.record.storage_consumed == 16384
        assert acct.record.params.transmission_time == 100
        assert acct.compensated_sc == 20480

    def test_empty_interval_carries_tt(self):
        uploads = [(10, 0, 300), (2500, 0, 400)]
        _, provider, _ = pair(uploads, schedule(0, 1000, 2000, 3000), schedule(0, 1000, 2000, 3000))
        assert [provider.account(i).record.params.transmission_time for i in (1, 2, 3)] == [300, 300, 400]


class TestConsumerApply:
    def _consumer(self, c_sched):
        consumer, _, _ = pair([(10, 0, 0)], schedule(0, 1000), c_sched)
        consumer.expect(1)
        consumer.recompute()
        return consumer

    def test_round_one_adopts_bounds_only(self):
        consumer = self._consumer(schedule(0, 1500))
        consumer.pending = NegotiationRequest(1, consumer.working, 0)
        resp = NegotiationResponse(1, AccountingParams(0, 1000, 100), 1, frozenset({IB, TT}), False, 0)
        consumer_apply(resp, consumer)
        assert consumer.working == AccountingParams(0, 1000, 0)
        assert consumer.adoptions == [(1, IB)]
        assert not consumer.tt_adopted

    def test_round_two_adopts_tt(self):
        consumer = self._consumer(schedule(0, 1000))
        consumer.sr_p = AccountingRecord(1, Party.PROVIDER, AccountingParams(0, 1000, 100), 0, 0)
        consumer.pending = NegotiationRequest(1, consumer.working, 1)
        resp = NegotiationResponse(1, AccountingParams(0, 1000, 100), 2, frozenset({TT}), False, 4096)
        consumer_apply(resp, consumer)
        assert consumer.working == AccountingParams(0, 1000, 100)
        assert consumer.tt_adopted
        assert consumer.comparison_target().storage_consumed == 4096

    def test_recomputes_under_new_bounds(self):
        consumer = self._consumer(schedule(0, 5))
        assert consumer.sr_c.request_count == 0
        consumer.pending = NegotiationRequest(1, consumer.working, 0)
        sr = consumer_apply(NegotiationResponse(1, AccountingParams(0, 1000, 0), 1, frozenset({IB}), False, 0), consumer)
        assert sr.request_count == 1
        assert sr.storage_consumed == 4096

    def test_rejects_out_of_order_counter(self):
        consumer = self._consumer(schedule(0, 1000))
        consumer.pending = NegotiationRequest(1, consumer.working, 0)
        with pytest.raises(CounterViolation):
            consumer_apply(NegotiationResponse(1, AccountingParams(0, 1000, 0), 2, frozenset({IB}), False, 0), consumer)

    def test_priority_order(self):
        assert PRIORITY == (IB, TT)


class TestFsm:
    def test_illegal_edge(self):
        consumer, _, _ = pair([], schedule(0, 1000), schedule(0, 1000))
        with pytest.raises(RuntimeError):
            consumer._enter(ConsumerState.DECIDING)

    def test_round_zero_path(self):
        consumer, provider, store = pair([(10, 5000, 0)], schedule(0, 1000), schedule(0, 1000))
        out = run_interval(consumer, provider, Channel(), 1, store)
        assert out.decision.value is DecisionValue.YES
        assert out.rounds_used == 0 and out.comparisons == 1
        assert [s.value for s in consumer.history] == ["Idle", "AwaitRecord", "Comparing", "Deciding", "Done"]
        assert len(store.agreed) == 1

    def test_negotiation_path(self):
        consumer, provider, _ = pair([(10, 5000, 0), (1200, 0, 0)], schedule(0, 1000, 2000), schedule(0, 1300, 2000))
        out = run_interval(consumer, provider, Channel(), 1)
        assert out.decision.value is DecisionValue.YES
        assert out.rounds_used == 1
        states = [s.value for s in consumer.history]
        assert states == ["Idle", "AwaitRecord", "Comparing", "AwaitResponse", "Comparing", "Deciding", "Done"]


class TestRunInterval:
    def test_misaligned_bounds_settle_in_round_one(self):
        consumer, provider, store = pair([(10, 0, 0), (999, 0, 0), (1200, 0, 0)], schedule(0, 1000, 2000), schedule(0, 1500, 2000))
        out = run_interval(consumer, provider, Channel(), 1, store)
        assert out.decision.value is DecisionValue.YES
        assert out.rounds_used == 1
        assert out.decision.final_params == AccountingParams(0, 1000, 0)
        assert consumer.adoptions == [(1, IB)]

    def test_delay_settles_in_round_two(self):
        uploads = [(10, 0, 100), (950, 10240, 100), (1500, 0, 100)]
        consumer, provider, store = pair(uploads, schedule(0, 1000, 2000), schedule(0, 1000, 2000))
        out = run_interval(consumer, provider, Channel(), 1, store)
        assert out.decision.value is DecisionValue.YES
        assert out.rounds_used == 2
        assert out.decision.final_params == AccountingParams(0, 1000, 100)
        assert out.decision.storage_consumed == 4096 + 12288
        assert consumer.adoptions == [(2, TT)]

    def test_jitter_is_unexplained(self):
        consumer, provider, store = pair(JITTER, schedule(0, 1000, 2000, 3000), schedule(0, 1000, 2000, 3000))
        out = run_interval(consumer, provider, Channel(), 1, store)
        assert out.decision.value is DecisionValue.NO
        assert out.reason is Reason.UNEXPLAINED_DIVERGENCE
        pairs = decode_transcript(out)
        assert [(q.counter, r.counter) for q, r in pairs] == [(0, 1), (1, 2), (2, 3)]
        assert [r.stop for _, r in pairs] == [False, False, True]
        assert pairs[-1][1].conflicting == frozenset()
        assert store.agreed == [] and len(out.envelopes) == 4

    def test_rounds_exhausted(self):
        # a budget of zero rounds stops the very first request
        consumer, provider, store = pair([(10, 0, 0), (1200, 0, 0)], schedule(0, 1000, 2000), schedule(0, 1500, 2000), max_rounds=0)
        out = run_interval(consumer, provider, Channel(), 1, store)
        assert out.reason is Reason.ROUNDS_EXHAUSTED
        assert out.rounds_used == 1
        assert store.agreed == []

    def test_tamper(self):
        def flip(recipient, msg):
            if recipient is Party.CONSUMER and isinstance(msg, SignedEnvelope):
                return msg.with_payload(msg.payload[:-1] + bytes([msg.payload[-1] ^ 1]))
            return msg

        consumer, provider, store = pair([(10, 0, 0)], schedule(0, 1000), schedule(0, 1000))
        out = run_interval(consumer, provider, Channel(flip), 1, store)
        assert out.reason is Reason.TAMPER
        assert out.decision is None
        assert store.outcome(1).reason is Reason.TAMPER

    def test_drop_times_out(self):
        consumer, provider, store = pair([(10, 0, 0)], schedule(0, 1000), schedule(0, 1000), timeout_steps=4)
        out = run_interval(consumer, provider, Channel(lambda r, m: None if r is Party.CONSUMER else m), 1, store)
        assert out.reason is Reason.TIMEOUT
        assert store.agreed == []

    def test_lost_ack_times_out(self):
        def drop_ack(recipient, msg):
            if recipient is Party.CONSUMER and isinstance(msg, SignedEnvelope) and msg.payload_kind.value == "DecisionMsg":
                return None
            return msg

        consumer, provider, store = pair([(10, 0, 0)], schedule(0, 1000), schedule(0, 1000), timeout_steps=4)
        out = run_interval(consumer, provider, Channel(drop_ack), 1, store)
        assert out.reason is Reason.TIMEOUT
        assert len(out.envelopes) == 3
        assert store.agreed == []

    def test_counter_violation_is_protocol_error(self):
        def skip(recipient, msg):
            if isinstance(msg, NegotiationRequest):
                return dataclasses.replace(msg, counter=msg.counter + 1)
            return msg

        consumer, provider, store = pair([(10, 0, 0), (1200, 0, 0)], schedule(0, 1000, 2000), schedule(0, 1500, 2000))
        out = run_interval(consumer, provider, Channel(skip), 1, store)
        assert out.reason is Reason.PROTOCOL_ERROR
        assert store.agreed == []

    def test_replayed_response_is_protocol_error(self):
        seen = []

        def replay(recipient, msg):
            if isinstance(msg, NegotiationResponse):
                seen.append(msg)
                return seen[0]
            return msg

        consumer, provider, _ = pair(JITTER, schedule(0, 1000, 2000, 3000), schedule(0, 1000, 2000, 3000))
        out = run_interval(consumer, provider, Channel(replay), 1)
        assert out.reason is Reason.PROTOCOL_ERROR
        assert out.rounds_used == 1


@pytest.mark.parametrize("max_rounds", [0, 1, 2, 3, 5])
def test_termination_and_monotone_transcripts(max_rounds):
    rng = random.Random(max_rounds)
    for _ in range(40):
        uploads = [(rng.randrange(5000), rng.randint(0, 20000), rng.choice([0, 0, 50, 300])) for _ in range(rng.randint(0, 30))]
        p_sched = schedule(0, 1000, 2000, 3000, 4000, 5000)
        shift = rng.choice([0, 1, 400])
        c_sched = schedule(0, 1000 + shift, 2000 + shift, 3000, 4000 - shift, 5000)
        consumer, provider, store = pair(uploads, p_sched, c_sched, max_rounds=max_rounds)
        for ci in p_sched:
            out = run_interval(consumer, provider, Channel(), ci.index, store)
            assert out.rounds_used <= max_rounds + 1
            assert out.comparisons <= max_rounds + 1
            pairs = decode_transcript(out)
            assert [q.counter for q, _ in pairs] == list(range(len(pairs)))
            assert all(r.counter == q.counter + 1 for q, r in pairs)
            assert all(not r.stop for _, r in pairs[:-1])
        assert len(store.agreed) + len(store.non_agreed) == len(p_sched)
