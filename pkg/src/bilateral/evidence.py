"""Two-party non-repudiation evidence: signed envelopes and evidence stores.

A settled interval leaves a chain of four tokens::

    NRO(SR)   provider -> consumer   origin of the provider's record
    NRR(SR)   consumer -> provider   receipt of that record
    NRO(decn) consumer -> provider   origin of the consumer's decision
    NRR(decn) provider -> consumer   receipt of the decision

Receipt tokens carry the SHA-256 digest of the envelope they acknowledge.
Signing goes through a pluggable backend.  The default is Ed25519 public-key
signatures; ``hmac-sha256`` is a symmetric alternative whose verification key
is the signing secret, useful only for exercising protocol logic.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from cryptography.exceptions import InvalidSignature as CryptoInvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from . import encoding
from .accounting import AccountingParams, AccountingRecord
from .errors import EncodingError, InvalidSignature


# -- signature backends ----------------------------------------------------

class Ed25519Backend:
    name = "ed25519"

    def derive(self, seed: bytes) -> Tuple[bytes, bytes]:
        raw = hashlib.sha256(b"ed25519:" + seed).digest()
        pub = Ed25519PrivateKey.from_private_bytes(raw).public_key()
        return raw, pub.public_bytes(Encoding.Raw, PublicFormat.Raw)

    def sign(self, signing_key: bytes, message: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(signing_key).sign(message)

    def verify(self, verification_key: bytes, message: bytes, signature: bytes) -> bool:
        try:
            Ed25519PublicKey.from_public_bytes(verification_key).verify(signature, message)
        except (CryptoInvalidSignature, ValueError):
            return False
        return True


class HmacSha256Backend:
    """Symmetric stand-in: the verification key is the shared secret.

    Detects tampering but anyone able to verify can also forge, so it gives
    integrity without non-repudiation.
    """

    name = "hmac-sha256"

    def derive(self, seed: bytes) -> Tuple[bytes, bytes]:
        secret = hashlib.sha256(b"hmac-sha256:" + seed).digest()
        return secret, secret

    def sign(self, signing_key: bytes, message: bytes) -> bytes:
        return hmac.new(signing_key, message, hashlib.sha256).digest()

    def verify(self, verification_key: bytes, message: bytes, signature: bytes) -> bool:
        return hmac.compare_digest(self.sign(verification_key, message), signature)


BACKENDS = {b.name: b for b in (Ed25519Backend(), HmacSha256Backend())}
DEFAULT_BACKEND = Ed25519Backend.name


def get_backend(name: str):
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"unknown signature backend {name!r}") from None


@dataclass(frozen=True)
class VerifierKey:
    party_id: str
    backend: str
    key: bytes


@dataclass(frozen=True)
class KeyedIdentity:
    party_id: str
    signing_key: bytes = field(repr=False)
    verification_key: bytes
    backend: str = DEFAULT_BACKEND

    @classmethod
    def derive(cls, party_id: str, seed, backend: str = DEFAULT_BACKEND) -> "KeyedIdentity":
        """Deterministic identity for simulations: same seed, same keys."""
        sk, vk = get_backend(backend).derive(f"{seed}:{party_id}".encode())
        return cls(party_id, sk, vk, backend)

    def public(self) -> VerifierKey:
        return VerifierKey(self.party_id, self.backend, self.verification_key)


@dataclass(frozen=True)
class Keyring:
    provider: VerifierKey
    consumer: VerifierKey

    def for_party(self, party_id: str) -> VerifierKey:
        for vk in (self.provider, self.consumer):
            if vk.party_id == party_id:
                return vk
        raise KeyError(party_id)


# -- envelopes -------------------------------------------------------------

class PayloadKind(enum.Enum):
    ACCOUNTING_RECORD = "AccountingRecordMsg"
    DECISION = "DecisionMsg"


class TokenKind(enum.Enum):
    NRO = "NRO"
    NRR = "NRR"


@dataclass(frozen=True)
class SignedEnvelope:
    payload: bytes
    payload_kind: PayloadKind
    token_kind: TokenKind
    signer: str
    signature: bytes
    sequence: int

    def signed_message(self) -> bytes:
        return _signed_message(self.payload_kind, self.token_kind, self.signer, self.sequence, self.payload)

    def fields(self) -> tuple:
        return (
            self.payload,
            self.payload_kind.value,
            self.token_kind.value,
            self.signer,
            self.signature,
            self.sequence,
        )

    @classmethod
    def from_fields(cls, fields) -> "SignedEnvelope":
        payload, pk, tk, signer, sig, seq = encoding.expect_shape(fields, 6, "envelope")
        try:
            return cls(payload, PayloadKind(pk), TokenKind(tk), signer, sig, seq)
        except ValueError as exc:
            raise EncodingError(str(exc)) from exc

    def to_bytes(self) -> bytes:
        return encoding.encode(self.fields())

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_bytes()).digest()

    def with_payload(self, payload: bytes) -> "SignedEnvelope":
        return SignedEnvelope(payload, self.payload_kind, self.token_kind, self.signer, self.signature, self.sequence)


def _signed_message(payload_kind, token_kind, signer, sequence, payload) -> bytes:
    return encoding.encode((payload_kind.value, token_kind.value, signer, sequence, payload))


def sign(
    identity: KeyedIdentity,
    payload_kind: PayloadKind,
    token_kind: TokenKind,
    sequence: int,
    payload: bytes,
) -> SignedEnvelope:
    msg = _signed_message(payload_kind, token_kind, identity.party_id, sequence, payload)
    sig = get_backend(identity.backend).sign(identity.signing_key, msg)
    return SignedEnvelope(payload, payload_kind, token_kind, identity.party_id, sig, sequence)


def verify(envelope: SignedEnvelope, verification_key: VerifierKey) -> bool:
    if envelope.signer != verification_key.party_id:
        return False
    backend = get_backend(verification_key.backend)
    return backend.verify(verification_key.key, envelope.signed_message(), envelope.signature)


# -- decisions ---------------------------------------------------------------

class DecisionValue(enum.Enum):
    YES = "Yes"
    NO = "No"


@dataclass(frozen=True)
class Decision:
    """Consumer's verdict on one interval.

    ``storage_consumed`` is the consumer's figure under ``final_params``; on
    a Yes it is the amount both parties sign off on.
    """

    interval_index: int
    value: DecisionValue
    final_params: AccountingParams
    rounds_used: int
    storage_consumed: int = 0

    def fields(self) -> tuple:
        return (
            self.interval_index,
            self.value.value,
            self.final_params.fields(),
            self.rounds_used,
            self.storage_consumed,
        )

    @classmethod
    def from_fields(cls, fields) -> "Decision":
        idx, value, params, rounds, sc = encoding.expect_shape(fields, 5, "decision")
        try:
            value = DecisionValue(value)
        except ValueError as exc:
            raise EncodingError(str(exc)) from exc
        return cls(idx, value, AccountingParams.from_fields(params), rounds, sc)

    def to_bytes(self) -> bytes:
        return encoding.encode(self.fields())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Decision":
        return cls.from_fields(encoding.decode(data))


class Reason(enum.Enum):
    TAMPER = "Tamper"
    TIMEOUT = "Timeout"
    PROTOCOL_ERROR = "ProtocolError"
    UNEXPLAINED_DIVERGENCE = "UnexplainedDivergence"
    ROUNDS_EXHAUSTED = "RoundsExhausted"


# -- the five steps --------------------------------------------------------

def step1_propose(provider: KeyedIdentity, sr_p: AccountingRecord) -> SignedEnvelope:
    return sign(provider, PayloadKind.ACCOUNTING_RECORD, TokenKind.NRO, sr_p.interval_index, sr_p.to_bytes())


def _expect(env: SignedEnvelope, kind: PayloadKind, token: TokenKind, key: VerifierKey, what: str):
    if env.payload_kind is not kind or env.token_kind is not token:
        raise InvalidSignature(f"{what}: expected {token.value}/{kind.value}")
    if not verify(env, key):
        raise InvalidSignature(f"{what}: signature does not verify for {key.party_id}")


def step2_validate_deliver(envelope: SignedEnvelope, provider_key: VerifierKey) -> AccountingRecord:
    _expect(envelope, PayloadKind.ACCOUNTING_RECORD, TokenKind.NRO, provider_key, "NRO(SR)")
    try:
        record = AccountingRecord.from_bytes(envelope.payload)
    except (EncodingError, ValueError) as exc:
        raise InvalidSignature(f"NRO(SR): undecodable payload: {exc}") from exc
    if record.interval_index != envelope.sequence:
        raise InvalidSignature("NRO(SR): record interval does not match envelope sequence")
    return record


def step4_submit_decision(
    consumer: KeyedIdentity, decision: Decision, received: SignedEnvelope
) -> Tuple[SignedEnvelope, SignedEnvelope]:
    seq = decision.interval_index
    nrr_sr = sign(consumer, PayloadKind.ACCOUNTING_RECORD, TokenKind.NRR, seq, received.digest())
    nro_decn = sign(consumer, PayloadKind.DECISION, TokenKind.NRO, seq, decision.to_bytes())
    return nrr_sr, nro_decn


def step5_ack(
    provider: KeyedIdentity,
    nrr_sr: SignedEnvelope,
    nro_decn: SignedEnvelope,
    consumer_key: VerifierKey,
    sent: SignedEnvelope,
) -> SignedEnvelope:
    """Validate the consumer's decision bundle and acknowledge it."""
    _expect(nrr_sr, PayloadKind.ACCOUNTING_RECORD, TokenKind.NRR, consumer_key, "NRR(SR)")
    if nrr_sr.payload != sent.digest():
        raise InvalidSignature("NRR(SR) does not reference the proposed record")
    _expect(nro_decn, PayloadKind.DECISION, TokenKind.NRO, consumer_key, "NRO(decn)")
    try:
        decision = Decision.from_bytes(nro_decn.payload)
    except (EncodingError, ValueError) as exc:
        raise InvalidSignature(f"NRO(decn): undecodable payload: {exc}") from exc
    if not (decision.interval_index == nro_decn.sequence == nrr_sr.sequence == sent.sequence):
        raise InvalidSignature("decision bundle refers to a different interval")
    return sign(provider, PayloadKind.DECISION, TokenKind.NRR, decision.interval_index, nro_decn.digest())


def check_agreed_chain(envelopes: Sequence[SignedEnvelope], keyring: Keyring, interval_index: int) -> List[str]:
    """Problems with a four-token Yes chain; empty when the chain is complete."""
    if len(envelopes) != 4:
        return [f"expected 4 tokens, found {len(envelopes)}"]
    nro_sr, nrr_sr, nro_decn, nrr_decn = envelopes
    problems = []
    checks = (
        (nro_sr, PayloadKind.ACCOUNTING_RECORD, TokenKind.NRO, keyring.provider, "NRO(SR)"),
        (nrr_sr, PayloadKind.ACCOUNTING_RECORD, TokenKind.NRR, keyring.consumer, "NRR(SR)"),
        (nro_decn, PayloadKind.DECISION, TokenKind.NRO, keyring.consumer, "NRO(decn)"),
        (nrr_decn, PayloadKind.DECISION, TokenKind.NRR, keyring.provider, "NRR(decn)"),
    )
    for env, kind, token, key, name in checks:
        try:
            _expect(env, kind, token, key, name)
        except InvalidSignature as exc:
            problems.append(str(exc))
        if env.sequence != interval_index:
            problems.append(f"{name}: sequence {env.sequence} != interval {interval_index}")
    if nrr_sr.payload != nro_sr.digest():
        problems.append("NRR(SR) does not reference NRO(SR)")
    if nrr_decn.payload != nro_decn.digest():
        problems.append("NRR(decn) does not reference NRO(decn)")
    try:
        if Decision.from_bytes(nro_decn.payload).value is not DecisionValue.YES:
            problems.append("decision is not Yes")
    except (EncodingError, ValueError):
        problems.append("NRO(decn): undecodable decision")
    return problems


# -- outcomes and stores -----------------------------------------------------

@dataclass
class IntervalOutcome:
    """Terminal state of one interval's exchange.

    ``transcript`` holds canonical encodings of each negotiation
    request/response pair; ``comparisons`` counts comparator invocations.
    """

    interval_index: int
    decision: Optional[Decision] = None
    reason: Optional[Reason] = None
    consumer_record: Optional[AccountingRecord] = None
    provider_record: Optional[AccountingRecord] = None
    envelopes: Tuple[SignedEnvelope, ...] = ()
    transcript: Tuple[Tuple[bytes, bytes], ...] = ()
    rounds_used: int = 0
    comparisons: int = 0

    @property
    def is_yes(self) -> bool:
        return self.decision is not None and self.decision.value is DecisionValue.YES

    def fields(self) -> tuple:
        return (
            self.interval_index,
            None if self.decision is None else self.decision.fields(),
            None if self.reason is None else self.reason.value,
            None if self.consumer_record is None else self.consumer_record.fields(),
            None if self.provider_record is None else self.provider_record.fields(),
            tuple(e.fields() for e in self.envelopes),
            tuple(self.transcript),
            self.rounds_used,
            self.comparisons,
        )

    @classmethod
    def from_fields(cls, fields) -> "IntervalOutcome":
        idx, dec, reason, c_rec, p_rec, envs, transcript, rounds, comps = encoding.expect_shape(
            fields, 9, "interval outcome"
        )
        try:
            return cls(
                idx,
                None if dec is None else Decision.from_fields(dec),
                None if reason is None else Reason(reason),
                None if c_rec is None else AccountingRecord.from_fields(c_rec),
                None if p_rec is None else AccountingRecord.from_fields(p_rec),
                tuple(SignedEnvelope.from_fields(e) for e in envs),
                tuple((bytes(a), bytes(b)) for a, b in transcript),
                rounds,
                comps,
            )
        except (TypeError, ValueError) as exc:
            raise EncodingError(f"malformed interval outcome: {exc}") from exc


AGREED = "agreed"
NON_AGREED = "non_agreed"

_HEADER = (
    "# bilateral evidence store v1: {kind}\n"
    "# columns: interval status reason sealer seal_hex entry_hex\n"
)


@dataclass(frozen=True)
class EvidenceLine:
    lineno: int
    interval_index: int
    status: str
    reason: str
    sealer: str
    seal: bytes
    entry: bytes


def _seal_message(entry: bytes) -> bytes:
    return encoding.encode(("EntrySeal", entry))


def format_entry_line(status: str, outcome: IntervalOutcome, sealer: KeyedIdentity) -> str:
    entry = encoding.encode(outcome.fields())
    seal = get_backend(sealer.backend).sign(sealer.signing_key, _seal_message(entry))
    reason = "-" if outcome.reason is None else outcome.reason.value
    return "\t".join(
        (str(outcome.interval_index), status, reason, sealer.party_id, seal.hex(), entry.hex())
    )


def parse_entry_line(line: str, lineno: int = 0) -> EvidenceLine:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 6:
        raise EncodingError(f"expected 6 columns, got {len(parts)}")
    idx, status, reason, sealer, seal_hex, entry_hex = parts
    try:
        return EvidenceLine(lineno, int(idx), status, reason, sealer, bytes.fromhex(seal_hex), bytes.fromhex(entry_hex))
    except ValueError as exc:
        raise EncodingError(f"bad column: {exc}") from exc


def read_evidence_file(path) -> List[Tuple[int, str]]:
    """Non-header lines of an evidence file as ``(lineno, text)`` pairs."""
    out = []
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.startswith("#") or not line.strip():
                continue
            out.append((lineno, line))
    return out


def check_evidence_line(ev: EvidenceLine, keyring: Keyring, status: str) -> Tuple[Optional[IntervalOutcome], List[str]]:
    """Seal, structure, and token checks for one stored entry."""
    try:
        sealer_key = keyring.for_party(ev.sealer)
    except KeyError:
        return None, [f"unknown sealer {ev.sealer!r}"]
    if not get_backend(sealer_key.backend).verify(sealer_key.key, _seal_message(ev.entry), ev.seal):
        return None, ["entry seal does not verify"]
    try:
        outcome = IntervalOutcome.from_fields(encoding.decode(ev.entry))
    except EncodingError as exc:
        return None, [f"undecodable entry: {exc}"]
    problems = []
    if ev.status != status:
        problems.append(f"status column {ev.status!r} in {status} store")
    if outcome.interval_index != ev.interval_index:
        problems.append("interval column does not match entry")
    reason = "-" if outcome.reason is None else outcome.reason.value
    if reason != ev.reason:
        problems.append("reason column does not match entry")
    if status == AGREED:
        problems += check_agreed_chain(outcome.envelopes, keyring, outcome.interval_index)
    elif outcome.reason is not Reason.TAMPER:
        # a tampered proposal is kept verbatim as evidence; everything else must verify
        for env in outcome.envelopes:
            try:
                ok = verify(env, keyring.for_party(env.signer))
            except KeyError:
                ok = False
            if not ok:
                problems.append(f"{env.token_kind.value}/{env.payload_kind.value} by {env.signer} does not verify")
    return outcome, problems


@dataclass
class EvidenceStore:
    """Agreed and non-agreed interval outcomes, optionally mirrored to files."""

    keyring: Keyring
    sealer: KeyedIdentity
    agreed_path: Optional[Path] = None
    non_agreed_path: Optional[Path] = None
    agreed: List[IntervalOutcome] = field(default_factory=list)
    non_agreed: List[IntervalOutcome] = field(default_factory=list)

    def __post_init__(self):
        for attr, kind in (("agreed_path", AGREED), ("non_agreed_path", NON_AGREED)):
            path = getattr(self, attr)
            if path is None:
                continue
            path = Path(path)
            setattr(self, attr, path)
            if not path.exists() or os.path.getsize(path) == 0:
                path.write_text(_HEADER.format(kind=kind), encoding="utf-8")

    def commit(self, outcome: IntervalOutcome) -> "EvidenceStore":
        """Append the outcome to exactly one store.

        Only a Yes decision backed by a complete, valid four-token chain
        counts as agreed; anything else is kept for offline resolution.
        """
        if self.contains(outcome.interval_index):
            raise ValueError(f"interval {outcome.interval_index} already committed")
        if outcome.is_yes:
            if not check_agreed_chain(outcome.envelopes, self.keyring, outcome.interval_index):
                self._append(AGREED, outcome)
                return self
            outcome.reason = outcome.reason or Reason.PROTOCOL_ERROR
        elif outcome.reason is None:
            outcome.reason = Reason.PROTOCOL_ERROR
        self._append(NON_AGREED, outcome)
        return self

    def _append(self, status: str, outcome: IntervalOutcome) -> None:
        target, path = (self.agreed, self.agreed_path) if status == AGREED else (self.non_agreed, self.non_agreed_path)
        if path is not None:
            with open(path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(format_entry_line(status, outcome, self.sealer) + "\n")
        target.append(outcome)

    def contains(self, interval_index: int) -> bool:
        return any(o.interval_index == interval_index for o in self.agreed + self.non_agreed)

    def outcome(self, interval_index: int) -> Optional[IntervalOutcome]:
        for o in self.agreed + self.non_agreed:
            if o.interval_index == interval_index:
                return o
        return None


def commit(store: EvidenceStore, outcome: IntervalOutcome) -> EvidenceStore:
    return store.commit(outcome)
