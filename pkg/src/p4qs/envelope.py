"""Wire format for every protocol message, plus ticket and envelope operations.

Encoding rules (the cross-implementation contract):

* every message starts with a one-byte kind tag:
  QUERY=1, BATCH=2, RESPONSE=3, REQUEST_FOR_ANSWER=4, TICKET_BATCH=5,
  TICKET_EXCHANGE=6;
* variable-length fields are length-prefixed with a 4-byte big-endian
  unsigned count; floats are 8-byte big-endian IEEE doubles; timestamps are
  8-byte big-endian unsigned milliseconds;
* a query is exactly four parts in order: longitude text, latitude text,
  sealed payload, sealed key.  Coordinates travel as decimal ASCII;
* a ticket is a signature envelope over (token, validity marker, expiry),
  so holders can check it with the server's public signing key alone;
* batch messages replace member coordinates with one cloak region
  (x1, y1, x2, y2 as doubles, t1, t2 as timestamps); members keep only
  their sealed parts.

Golden files for each kind live in tests/golden and are regenerated by
``p4qs fixtures``.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass
from typing import Union

from .crypto import ASYM, SYM, DecryptError, ServerKeys, ServerPublic
from .geo import GeoPoint, RING_MAX, RING_MIN

KIND_QUERY = 1
KIND_BATCH = 2
KIND_RESPONSE = 3
KIND_REQUEST_FOR_ANSWER = 4
KIND_TICKET_BATCH = 5
KIND_TICKET_EXCHANGE = 6

VALIDITY_MARKER = b"server"


class CodecError(Exception):
    """Malformed message bytes."""


class InvalidTicket(Exception):
    """Ticket signature or validity marker check failed."""


class ExpiredTicket(Exception):
    """Ticket is past its expiry timestamp."""


_SIG_CACHE: dict = {}


def _lp(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


class _Reader:
    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.pos = offset

    def bytes_field(self) -> bytes:
        if self.pos + 4 > len(self.data):
            raise CodecError("truncated length prefix")
        (n,) = struct.unpack_from(">I", self.data, self.pos)
        self.pos += 4
        if self.pos + n > len(self.data):
            raise CodecError("truncated field")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def f64(self) -> float:
        if self.pos + 8 > len(self.data):
            raise CodecError("truncated double")
        (v,) = struct.unpack_from(">d", self.data, self.pos)
        self.pos += 8
        return v

    def u64(self) -> int:
        if self.pos + 8 > len(self.data):
            raise CodecError("truncated timestamp")
        (v,) = struct.unpack_from(">Q", self.data, self.pos)
        self.pos += 8
        return v

    def u32(self) -> int:
        if self.pos + 4 > len(self.data):
            raise CodecError("truncated count")
        (v,) = struct.unpack_from(">I", self.data, self.pos)
        self.pos += 4
        return v

    def done(self) -> None:
        if self.pos != len(self.data):
            raise CodecError("trailing bytes")


# ---------------------------------------------------------------------------
# Tickets


@dataclass(frozen=True)
class Ticket:
    """Server-signed, single-use, expiring capability.

    ``token`` selects the broker for one query; ``envelope`` is the
    self-contained signature blob that any peer can check against the
    server's public signing key.
    """

    token: float
    marker: bytes
    expiry_ms: int
    envelope: bytes

    @staticmethod
    def _body(token: float, marker: bytes, expiry_ms: int) -> bytes:
        return struct.pack(">d", token) + _lp(marker) + struct.pack(">Q", expiry_ms)

    @classmethod
    def from_envelope(cls, envelope: bytes) -> "Ticket":
        """Parse the signed body without verifying the signature."""
        if len(envelope) < 64:
            raise CodecError("ticket envelope too short")
        r = _Reader(envelope, 64)
        token = r.f64()
        marker = r.bytes_field()
        expiry = r.u64()
        r.done()
        return cls(token=token, marker=marker, expiry_ms=expiry, envelope=envelope)

    def verify(self, server_public: ServerPublic, now_ms: int) -> None:
        """Raise InvalidTicket / ExpiredTicket unless the ticket is good now.

        Signature results are memoized per (key, envelope); the expiry check
        is evaluated fresh on every call since it depends on the clock.
        """
        cache_key = (server_public.sign.public_bytes_raw(), self.envelope)
        good = _SIG_CACHE.get(cache_key)
        if good is None:
            try:
                body = ASYM.verify_with_public(server_public.sign, self.envelope)
                good = body == self._body(self.token, self.marker, self.expiry_ms)
            except Exception:
                good = False
            if len(_SIG_CACHE) > 200_000:
                _SIG_CACHE.clear()
            _SIG_CACHE[cache_key] = good
        if not good:
            raise InvalidTicket("signature check failed")
        if self.marker != VALIDITY_MARKER:
            raise InvalidTicket(f"unexpected validity marker {self.marker!r}")
        if now_ms >= self.expiry_ms:
            raise ExpiredTicket(f"expired at {self.expiry_ms}, now {now_ms}")

    def is_valid(self, server_public: ServerPublic, now_ms: int) -> bool:
        try:
            self.verify(server_public, now_ms)
            return True
        except (InvalidTicket, ExpiredTicket):
            return False


def mint_ticket(server_keys: ServerKeys, rng: random.Random, validity_ms: int,
                now_ms: int = 0) -> Ticket:
    """Mint a fresh ticket: uniform token in (-270, 270), signed body, expiry."""
    token = rng.uniform(RING_MIN, RING_MAX)
    expiry = now_ms + validity_ms
    body = Ticket._body(token, VALIDITY_MARKER, expiry)
    envelope = ASYM.sign_with_private(server_keys.sign_private, body)
    return Ticket(token=token, marker=VALIDITY_MARKER, expiry_ms=expiry, envelope=envelope)


def forge_unsigned_ticket(token: float, expiry_ms: int, rng: random.Random) -> Ticket:
    """A structurally well-formed ticket with a garbage signature.

    Used by anonymizers that ran out of real tickets (the filler members
    get rejected server-side) and by adversarial peers in exchange rounds.
    """
    body = Ticket._body(token, VALIDITY_MARKER, expiry_ms)
    return Ticket(token=token, marker=VALIDITY_MARKER, expiry_ms=expiry_ms,
                  envelope=rng.randbytes(64) + body)


# ---------------------------------------------------------------------------
# Message types


@dataclass(frozen=True)
class QueryEnvelope:
    """The four-part client message: plaintext location + sealed payload/key."""

    longitude_text: str
    latitude_text: str
    sealed_payload: bytes
    sealed_key: bytes

    def location(self) -> GeoPoint:
        try:
            return GeoPoint(float(self.longitude_text), float(self.latitude_text))
        except ValueError as exc:
            raise CodecError(f"bad plaintext location: {exc}") from exc

    def location_plaintext(self) -> bytes:
        """The exact byte encoding of this member's coordinates on the wire."""
        return _lp(self.longitude_text.encode("ascii")) + _lp(self.latitude_text.encode("ascii"))


@dataclass(frozen=True)
class CloakRegion:
    """Spatiotemporal cloak: bounding rectangle plus the batching time window."""

    x1: float
    y1: float
    x2: float
    y2: float
    t1: int
    t2: int

    def contains(self, p: GeoPoint) -> bool:
        return self.x1 <= p.longitude <= self.x2 and self.y1 <= p.latitude <= self.y2

    def center(self) -> GeoPoint:
        return GeoPoint(
            max(-180.0, min(180.0, (self.x1 + self.x2) / 2.0)),
            max(-90.0, min(90.0, (self.y1 + self.y2) / 2.0)),
        )


@dataclass(frozen=True)
class BatchMember:
    sealed_payload: bytes
    sealed_key: bytes


@dataclass(frozen=True)
class AnonymizedBatch:
    region: CloakRegion
    members: tuple


@dataclass(frozen=True)
class ResponseEnvelope:
    """Server answer: plaintext routing token + response sealed under the prop key."""

    token: float
    sealed_response: bytes


@dataclass(frozen=True)
class RequestForAnswer:
    token: float
    requester_addr: str


@dataclass(frozen=True)
class TicketBatch:
    tickets: tuple


@dataclass(frozen=True)
class TicketExchange:
    sender_id: str
    tickets: tuple


Message = Union[QueryEnvelope, AnonymizedBatch, ResponseEnvelope,
                RequestForAnswer, TicketBatch, TicketExchange]


# ---------------------------------------------------------------------------
# Encoding / decoding


def encode_message(msg: Message) -> bytes:
    if isinstance(msg, QueryEnvelope):
        return bytes([KIND_QUERY]) + msg.location_plaintext() + \
            _lp(msg.sealed_payload) + _lp(msg.sealed_key)
    if isinstance(msg, AnonymizedBatch):
        r = msg.region
        head = bytes([KIND_BATCH]) + struct.pack(">dddd", r.x1, r.y1, r.x2, r.y2) + \
            struct.pack(">QQ", r.t1, r.t2) + struct.pack(">I", len(msg.members))
        return head + b"".join(_lp(m.sealed_payload) + _lp(m.sealed_key) for m in msg.members)
    if isinstance(msg, ResponseEnvelope):
        return bytes([KIND_RESPONSE]) + struct.pack(">d", msg.token) + _lp(msg.sealed_response)
    if isinstance(msg, RequestForAnswer):
        return bytes([KIND_REQUEST_FOR_ANSWER]) + struct.pack(">d", msg.token) + \
            _lp(msg.requester_addr.encode("utf-8"))
    if isinstance(msg, TicketBatch):
        return bytes([KIND_TICKET_BATCH]) + struct.pack(">I", len(msg.tickets)) + \
            b"".join(_lp(t.envelope) for t in msg.tickets)
    if isinstance(msg, TicketExchange):
        return bytes([KIND_TICKET_EXCHANGE]) + _lp(msg.sender_id.encode("utf-8")) + \
            struct.pack(">I", len(msg.tickets)) + b"".join(_lp(t.envelope) for t in msg.tickets)
    raise TypeError(f"not a wire message: {type(msg)!r}")


def message_kind(data: bytes) -> int:
    if not data:
        raise CodecError("empty message")
    return data[0]


def decode_message(data: bytes) -> Message:
    kind = message_kind(data)
    r = _Reader(data, 1)
    if kind == KIND_QUERY:
        lon = r.bytes_field()
        lat = r.bytes_field()
        payload = r.bytes_field()
        key = r.bytes_field()
        r.done()
        try:
            msg = QueryEnvelope(lon.decode("ascii"), lat.decode("ascii"), payload, key)
        except UnicodeDecodeError as exc:
            raise CodecError("location text not ascii") from exc
        msg.location()  # malformed coordinates rejected at decode time
        return msg
    if kind == KIND_BATCH:
        x1, y1, x2, y2 = (r.f64(), r.f64(), r.f64(), r.f64())
        t1, t2 = r.u64(), r.u64()
        n = r.u32()
        members = []
        for _ in range(n):
            payload = r.bytes_field()
            key = r.bytes_field()
            members.append(BatchMember(payload, key))
        r.done()
        return AnonymizedBatch(CloakRegion(x1, y1, x2, y2, t1, t2), tuple(members))
    if kind == KIND_RESPONSE:
        token = r.f64()
        sealed = r.bytes_field()
        r.done()
        return ResponseEnvelope(token, sealed)
    if kind == KIND_REQUEST_FOR_ANSWER:
        token = r.f64()
        addr = r.bytes_field()
        r.done()
        return RequestForAnswer(token, addr.decode("utf-8"))
    if kind == KIND_TICKET_BATCH:
        n = r.u32()
        tickets = tuple(Ticket.from_envelope(r.bytes_field()) for _ in range(n))
        r.done()
        return TicketBatch(tickets)
    if kind == KIND_TICKET_EXCHANGE:
        sender = r.bytes_field().decode("utf-8")
        n = r.u32()
        tickets = tuple(Ticket.from_envelope(r.bytes_field()) for _ in range(n))
        r.done()
        return TicketExchange(sender, tickets)
    raise CodecError(f"unknown message kind {kind}")


# ---------------------------------------------------------------------------
# Query construction / opening


@dataclass(frozen=True)
class OpenedQuery:
    location: GeoPoint | None
    query_text: str
    ticket: Ticket
    broker_addr: str
    prop_key: bytes


def build_query(loc: GeoPoint, query_text: str, ticket: Ticket, broker_addr: str,
                prop_key: bytes, server_public: ServerPublic, rng: random.Random,
                now_ms: int, check_ticket: bool = True) -> QueryEnvelope:
    """Assemble the four-part query; rejects a bad ticket before sealing anything.

    ``check_ticket=False`` skips the validity gate; anonymizers use it to
    seal filler queries carrying forged tickets once their pool runs dry.
    """
    if check_ticket:
        ticket.verify(server_public, now_ms)
    inner = _lp(query_text.encode("utf-8")) + _lp(ticket.envelope) + \
        _lp(broker_addr.encode("utf-8"))
    sealed_payload = SYM.seal(prop_key, inner, rng)
    sealed_key = ASYM.encrypt_with_public(server_public.enc, prop_key, rng)
    return QueryEnvelope(
        longitude_text=repr(loc.longitude),
        latitude_text=repr(loc.latitude),
        sealed_payload=sealed_payload,
        sealed_key=sealed_key,
    )


def open_sealed_parts(sealed_payload: bytes, sealed_key: bytes,
                      server_keys: ServerKeys, now_ms: int,
                      verify_ticket: bool = True) -> OpenedQuery:
    """Server-side opening of one member's sealed fields.

    Raises CodecError / DecryptError / InvalidTicket / ExpiredTicket as
    distinct kinds so callers can count attack attempts by reason.
    """
    prop_key = ASYM.decrypt_with_private(server_keys.enc_private, sealed_key)
    if len(prop_key) != 32:
        raise DecryptError("recovered key has wrong length")
    inner = SYM.open(prop_key, sealed_payload)
    r = _Reader(inner)
    query_text = r.bytes_field().decode("utf-8", errors="replace")
    ticket = Ticket.from_envelope(r.bytes_field())
    broker_addr = r.bytes_field().decode("utf-8", errors="replace")
    r.done()
    if verify_ticket:
        ticket.verify(server_keys.public, now_ms)
    return OpenedQuery(location=None, query_text=query_text, ticket=ticket,
                       broker_addr=broker_addr, prop_key=prop_key)


def open_query(env: QueryEnvelope, server_keys: ServerKeys, now_ms: int) -> OpenedQuery:
    """Open a standalone query envelope: plaintext location plus sealed parts."""
    loc = env.location()
    opened = open_sealed_parts(env.sealed_payload, env.sealed_key, server_keys, now_ms)
    return OpenedQuery(location=loc, query_text=opened.query_text, ticket=opened.ticket,
                       broker_addr=opened.broker_addr, prop_key=opened.prop_key)
