"""The three-role peer: query emission, anonymizer batching/cloaking, brokering.

A peer is a pure state machine driven one event at a time (messages and
timers).  All cross-peer effects go through the injected context, which the
simulator (or a test stub) provides:

* ``ctx.send(dst_addr, message, routed_key=None)`` - emit a wire message;
  ``routed_key`` marks DHT-routed sends for hop accounting;
* ``ctx.set_timer(at_ms, tag) -> timer_id`` / ``ctx.cancel_timer(timer_id)``;
* ``ctx.directory`` - the overlay; ``ctx.server_public`` - installed key;
* ``ctx.rng`` - the run's seeded randomness; ``ctx.emit(record)`` - trace.

The anonymizer path deliberately touches only plaintext coordinates and the
opaque sealed fields of incoming envelopes; it holds no key that could open
them.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .crypto import SYM, DecryptError
from .envelope import (
    AnonymizedBatch,
    BatchMember,
    CloakRegion,
    CodecError,
    QueryEnvelope,
    RequestForAnswer,
    ResponseEnvelope,
    Ticket,
    TicketBatch,
    TicketExchange,
    build_query,
    forge_unsigned_ticket,
)
from .geo import GeoPoint, ZoneTag, geo_hash, zone_of
from .overlay import PeerRecord
from .tickets import TicketPool, TrustList, accept_exchanged

LBS_ADDR = "lbs"

QUERY_CATEGORIES = ("restaurant", "hospital", "cafe", "fuel")


def cloak(points, window_start_ms: int, now_ms: int,
          min_side_deg: float) -> CloakRegion:
    """Minimal bounding rectangle of the points, grown to the minimum side.

    Expansion is symmetric around the box center, so a lone point sits in
    the middle of a ``min_side_deg`` square.  Time bounds are the batching
    window.
    """
    if not points:
        raise ValueError("cloak of zero points")
    x1 = min(p.longitude for p in points)
    x2 = max(p.longitude for p in points)
    y1 = min(p.latitude for p in points)
    y2 = max(p.latitude for p in points)
    if x2 - x1 < min_side_deg:
        cx = (x1 + x2) / 2.0
        x1, x2 = cx - min_side_deg / 2.0, cx + min_side_deg / 2.0
    if y2 - y1 < min_side_deg:
        cy = (y1 + y2) / 2.0
        y1, y2 = cy - min_side_deg / 2.0, cy + min_side_deg / 2.0
    return CloakRegion(x1=x1, y1=y1, x2=x2, y2=y2, t1=window_start_ms, t2=now_ms)


@dataclass
class PendingQuery:
    query_id: int
    prop_key: bytes
    token: float
    broker: PeerRecord
    send_time: int
    query_text: str
    location: GeoPoint
    retries_left: int
    timer_id: int


@dataclass
class SubZoneBuffer:
    entries: list = field(default_factory=list)  # (QueryEnvelope, arrival_ms)
    window_start: int | None = None
    timer_id: int | None = None


@dataclass
class PeerCounters:
    queries_sent: int = 0
    completed: int = 0
    failed: int = 0
    deferred: int = 0
    retries: int = 0
    auth_discards: int = 0
    duplicate_responses: int = 0
    batches: int = 0
    real_members: int = 0
    fakes: int = 0
    fakes_unticketed: int = 0
    collab_merges: int = 0
    reforwarded: int = 0
    broker_forwards: int = 0
    broker_anomalies: int = 0
    non_delivery: int = 0
    gc_responses: int = 0
    invalid_exchange_tickets: int = 0
    trust_removals: int = 0


class Peer:
    """One node playing client, anonymizer and broker simultaneously."""

    def __init__(self, record: PeerRecord, ctx, k: int, t_wait_ms: int,
                 min_cloak_side_deg: float, broker_timeout_ms: int,
                 retry_limit: int = 2, trust_threshold: int = 3,
                 pseudonym_ticket: Ticket | None = None,
                 ticket_settle_ms: int = 0):
        self.record = record
        self.ctx = ctx
        self.k = k
        self.t_wait_ms = t_wait_ms
        self.min_cloak_side = min_cloak_side_deg
        self.broker_timeout_ms = broker_timeout_ms
        self.retry_limit = retry_limit
        self.pseudonym_ticket = pseudonym_ticket
        # how long after a fresh server batch the exchange rounds need to
        # mix it; deferred queries wait this out instead of spending a
        # ticket the server just handed straight to this peer
        self.ticket_settle_ms = ticket_settle_ms

        self.pool = TicketPool()
        self.trust = TrustList(threshold=trust_threshold)
        self.pending: dict = {}            # token -> PendingQuery
        self.deferred_queries: list = []   # (query_id, location, text, orig_send)
        self.buffers = {ZoneTag.LOW_LONGITUDE: SubZoneBuffer(),
                        ZoneTag.HIGH_LONGITUDE: SubZoneBuffer()}
        self.request_list: dict = {}       # token -> (requester_addr, stored_ms)
        self.response_list: dict = {}      # token -> (sealed, stored_ms)
        self.finished_tokens: set = set()  # completed queries, for idempotence
        self.counters = PeerCounters()
        self.latencies: list = []
        self.cooperative = True
        self.malicious_tickets = False
        self.fault_undersized_once = False
        self.queries_received = 0          # overload accounting, reset per period

    @property
    def peer_id(self) -> str:
        return self.record.peer_id

    @property
    def address(self) -> str:
        return self.record.address

    # ------------------------------------------------------------------
    # Client role

    def start_query(self, query_id: int, location: GeoPoint, query_text: str,
                    now_ms: int, orig_send_ms: int | None = None) -> bool:
        """Emit one query; returns False (and defers) when no ticket is usable."""
        send_time = now_ms if orig_send_ms is None else orig_send_ms
        ticket = self._take_ticket(now_ms)
        if ticket is None:
            self.counters.deferred += 1
            self.deferred_queries.append((query_id, location, query_text, send_time))
            self.ctx.emit({"ev": "query_deferred", "peer": self.peer_id,
                           "qid": query_id})
            return False
        anonymizer = self.ctx.directory.lookup(geo_hash(location))
        broker = self.ctx.directory.lookup(ticket.token)
        prop_key = SYM.new_key(self.ctx.rng)
        env = build_query(location, query_text, ticket, broker.address,
                          prop_key, self.ctx.server_public, self.ctx.rng, now_ms)
        timer_id = self.ctx.set_timer(now_ms + self.broker_timeout_ms,
                                      ("retry", self.peer_id, ticket.token))
        self.pending[ticket.token] = PendingQuery(
            query_id=query_id, prop_key=prop_key, token=ticket.token,
            broker=broker, send_time=send_time, query_text=query_text,
            location=location, retries_left=self.retry_limit, timer_id=timer_id)
        self.counters.queries_sent += 1
        self.ctx.send(anonymizer.address, env, routed_key=geo_hash(location))
        self.ctx.send(broker.address,
                      RequestForAnswer(token=ticket.token, requester_addr=self.address),
                      routed_key=ticket.token)
        self.ctx.emit({"ev": "query_sent", "peer": self.peer_id, "qid": query_id,
                       "token": ticket.token, "anonymizer": anonymizer.peer_id,
                       "broker": broker.peer_id, "lon": location.longitude,
                       "lat": location.latitude, "orig_t": send_time})
        return True

    def _take_ticket(self, now_ms: int) -> Ticket | None:
        if self.pseudonym_ticket is not None:
            return self.pseudonym_ticket
        return self.pool.take(self.ctx.server_public, now_ms,
                              min_remaining_ms=self.broker_timeout_ms,
                              rng=self.ctx.rng)

    def on_ticket_batch(self, msg: TicketBatch, now_ms: int) -> None:
        """Server-delivered tickets go straight to the pool; deferred queries
        flush once the exchange rounds have had time to mix the fresh batch."""
        self.pool.add(msg.tickets)
        if not self.deferred_queries:
            return
        if self.ticket_settle_ms <= 0:
            self.flush_deferred(now_ms)
        else:
            self.ctx.set_timer(now_ms + self.ticket_settle_ms,
                               ("flush", self.peer_id))

    def flush_deferred(self, now_ms: int) -> None:
        backlog, self.deferred_queries = self.deferred_queries, []
        for query_id, location, text, orig_send in backlog:
            self.start_query(query_id, location, text, now_ms,
                             orig_send_ms=orig_send)

    def on_retry_timer(self, token: float, now_ms: int) -> None:
        pq = self.pending.pop(token, None)
        if pq is None:
            return
        self._retry(pq, now_ms)

    def _retry(self, pq: PendingQuery, now_ms: int) -> None:
        if pq.retries_left <= 0:
            self.counters.failed += 1
            self.ctx.emit({"ev": "query_failed", "peer": self.peer_id,
                           "qid": pq.query_id})
            return
        self.counters.retries += 1
        self.ctx.emit({"ev": "query_retry", "peer": self.peer_id,
                       "qid": pq.query_id, "prev_token": pq.token})
        ok = self.start_query(pq.query_id, pq.location, pq.query_text, now_ms,
                              orig_send_ms=pq.send_time)
        if ok:
            # a fresh ticket means a fresh broker; carry the shrunken budget over
            for candidate in self.pending.values():
                if candidate.query_id == pq.query_id:
                    candidate.retries_left = pq.retries_left - 1
                    break

    def on_forwarded_response(self, msg: ResponseEnvelope, now_ms: int) -> None:
        pq = self.pending.get(msg.token)
        if pq is None:
            self.counters.duplicate_responses += 1
            return
        try:
            answer = SYM.open(pq.prop_key, msg.sealed_response)
        except DecryptError:
            self.counters.auth_discards += 1
            self.ctx.cancel_timer(pq.timer_id)
            del self.pending[msg.token]
            self._retry(pq, now_ms)
            return
        self.ctx.cancel_timer(pq.timer_id)
        del self.pending[msg.token]
        self.finished_tokens.add(msg.token)
        self.counters.completed += 1
        self.latencies.append(now_ms - pq.send_time)
        self.ctx.emit({"ev": "query_completed", "peer": self.peer_id,
                       "qid": pq.query_id, "token": msg.token,
                       "latency_ms": now_ms - pq.send_time,
                       "answer_len": len(answer)})

    # ------------------------------------------------------------------
    # Anonymizer role

    def on_query(self, env: QueryEnvelope, now_ms: int) -> None:
        try:
            location = env.location()
        except CodecError:
            self.ctx.emit({"ev": "query_dropped_malformed", "peer": self.peer_id})
            return
        key = geo_hash(location)
        responsible = self.ctx.directory.lookup(key)
        if responsible.peer_id != self.peer_id:
            # stale overlay view: pass it along to the right anonymizer
            self.counters.reforwarded += 1
            self.ctx.emit({"ev": "query_reforwarded", "peer": self.peer_id,
                           "to": responsible.peer_id})
            self.ctx.send(responsible.address, env, routed_key=key)
            return
        self.queries_received += 1
        side = zone_of(location)
        buf = self.buffers[side]
        if not buf.entries:
            buf.window_start = now_ms
            buf.timer_id = self.ctx.set_timer(now_ms + self.t_wait_ms,
                                              ("window", self.peer_id, side.value))
        buf.entries.append((env, now_ms))
        if len(buf.entries) >= self.k:
            self._emit_batch(side, now_ms)

    def on_window_expiry(self, side: ZoneTag, now_ms: int) -> None:
        buf = self.buffers[side]
        if not buf.entries:
            buf.window_start = None
            buf.timer_id = None
            return
        self._emit_batch(side, now_ms)

    def pending_count(self, side: ZoneTag) -> int:
        return len(self.buffers[side].entries)

    def donate_pending(self, side: ZoneTag) -> tuple:
        """Hand all buffered envelopes of one side to a collaborating neighbor."""
        buf = self.buffers[side]
        entries, start = buf.entries, buf.window_start
        if buf.timer_id is not None:
            self.ctx.cancel_timer(buf.timer_id)
        self.buffers[side] = SubZoneBuffer()
        return entries, start

    def _emit_batch(self, side: ZoneTag, now_ms: int) -> None:
        buf = self.buffers[side]
        entries = buf.entries
        window_start = buf.window_start if buf.window_start is not None else now_ms
        if buf.timer_id is not None:
            self.ctx.cancel_timer(buf.timer_id)
        self.buffers[side] = SubZoneBuffer()

        if len(entries) < self.k:
            donated, donated_start = self.ctx.collaborate(self.peer_id, side,
                                                          self.k - len(entries))
            if donated:
                self.counters.collab_merges += 1
                entries = entries + donated
                if donated_start is not None:
                    window_start = min(window_start, donated_start)

        real_count = len(entries)
        real_locations = [env.location() for env, _ in entries]
        fake_envs = []
        if len(entries) < self.k and not self.fault_undersized_once:
            fake_envs = self._make_fakes(self.k - len(entries), side,
                                         real_locations, now_ms)
        if self.fault_undersized_once:
            self.fault_undersized_once = False

        locations = real_locations + [env.location() for env in fake_envs]
        region = cloak(locations, window_start, now_ms, self.min_cloak_side)
        members = [BatchMember(env.sealed_payload, env.sealed_key)
                   for env, _ in entries]
        members += [BatchMember(env.sealed_payload, env.sealed_key)
                    for env in fake_envs]
        self.ctx.rng.shuffle(members)
        batch = AnonymizedBatch(region=region, members=tuple(members))
        self.counters.batches += 1
        self.counters.real_members += real_count
        self.counters.fakes += len(fake_envs)
        self.ctx.emit({"ev": "batch_emitted", "peer": self.peer_id,
                       "side": side.value, "real": real_count,
                       "fakes": len(fake_envs), "members": len(members)})
        self.ctx.send(LBS_ADDR, batch)

    def _sample_fake_point(self, side: ZoneTag, box: CloakRegion) -> GeoPoint:
        """Uniform point inside the prospective cloak box, preferring the
        batch's mirror side so the region never has to straddle the diagonal."""
        rng = self.ctx.rng
        x1, x2 = max(-180.0, box.x1), min(180.0, box.x2)
        y1, y2 = max(-90.0, box.y1), min(90.0, box.y2)
        point = None
        for _ in range(16):
            point = GeoPoint(rng.uniform(x1, x2), rng.uniform(y1, y2))
            if zone_of(point) is side:
                return point
        return point

    def _make_fakes(self, count: int, side: ZoneTag, real_locations: list,
                    now_ms: int) -> list:
        """Synthesize filler queries placed inside the prospective cloak box
        (the real members' bounding box grown to the minimum side), keeping
        the final region as tight as the real traffic allows.

        Each fake consumes one of the anonymizer's own tickets so the server
        accepts it; with an empty pool the filler carries a forged ticket and
        is rejected server-side (counted separately).
        """
        box = cloak(real_locations, 0, 0, self.min_cloak_side)
        fakes = []
        for _ in range(count):
            point = self._sample_fake_point(side, box)
            text = "nearest:" + self.ctx.rng.choice(QUERY_CATEGORIES)
            ticket = self._take_ticket(now_ms)
            throwaway = SYM.new_key(self.ctx.rng)
            if ticket is None:
                self.counters.fakes_unticketed += 1
                ticket = forge_unsigned_ticket(
                    self.ctx.rng.uniform(-270.0, 270.0),
                    now_ms + self.t_wait_ms, self.ctx.rng)
                env = build_query(point, text, ticket, self.address, throwaway,
                                  self.ctx.server_public, self.ctx.rng, now_ms,
                                  check_ticket=False)
            else:
                broker = self.ctx.directory.lookup(ticket.token)
                env = build_query(point, text, ticket, broker.address, throwaway,
                                  self.ctx.server_public, self.ctx.rng, now_ms)
            self.ctx.record_fake(self.peer_id, env, ticket.token, now_ms)
            fakes.append(env)
        return fakes

    # ------------------------------------------------------------------
    # Broker role

    def on_request_for_answer(self, msg: RequestForAnswer, now_ms: int) -> None:
        if not self.cooperative:
            return
        stored = self.response_list.pop(msg.token, None)
        if stored is not None:
            self.ctx.cancel_timer(stored[2])
            self._forward(msg.token, stored[0], msg.requester_addr)
            return
        if msg.token in self.request_list:
            self.counters.broker_anomalies += 1
            return
        timer_id = self.ctx.set_timer(
            now_ms + self.broker_timeout_ms,
            ("broker_gc", self.peer_id, msg.token, "request"))
        self.request_list[msg.token] = (msg.requester_addr, now_ms, timer_id)

    def on_response(self, msg: ResponseEnvelope, now_ms: int) -> None:
        """A response arriving from the server (this peer acting as broker)."""
        if not self.cooperative:
            return
        stored = self.request_list.pop(msg.token, None)
        if stored is not None:
            self.ctx.cancel_timer(stored[2])
            self._forward(msg.token, msg.sealed_response, stored[0])
            return
        if msg.token in self.response_list:
            self.counters.broker_anomalies += 1
            return
        timer_id = self.ctx.set_timer(
            now_ms + self.broker_timeout_ms,
            ("broker_gc", self.peer_id, msg.token, "response"))
        self.response_list[msg.token] = (msg.sealed_response, now_ms, timer_id)

    def on_broker_gc(self, token: float, which: str, now_ms: int) -> None:
        if which == "request":
            stored = self.request_list.pop(token, None)
            if stored is not None:
                self.counters.non_delivery += 1
                self.ctx.emit({"ev": "non_delivery", "peer": self.peer_id,
                               "token": token, "requester": stored[0]})
        else:
            if self.response_list.pop(token, None) is not None:
                self.counters.gc_responses += 1

    def _forward(self, token: float, sealed: bytes, requester_addr: str) -> None:
        self.counters.broker_forwards += 1
        self.ctx.send(requester_addr,
                      ResponseEnvelope(token=token, sealed_response=sealed))

    # ------------------------------------------------------------------
    # Ticket exchange

    def on_ticket_exchange(self, msg: TicketExchange, now_ms: int) -> None:
        before = len(self.trust.trusted)
        bad = accept_exchanged(self.pool, self.trust, msg.sender_id, msg.tickets,
                               self.ctx.server_public, now_ms)
        self.counters.invalid_exchange_tickets += bad
        if len(self.trust.trusted) < before:
            self.counters.trust_removals += 1
            self.ctx.emit({"ev": "trust_removed", "peer": self.peer_id,
                           "removed": msg.sender_id})

    # ------------------------------------------------------------------
    # Message dispatch

    def on_message(self, msg, now_ms: int) -> None:
        if isinstance(msg, QueryEnvelope):
            self.on_query(msg, now_ms)
        elif isinstance(msg, ResponseEnvelope):
            # broker match takes precedence; a response that matches neither
            # broker state nor an already-finished token must be the forward
            # for one of this peer's own pending queries
            if msg.token in self.request_list:
                self.on_response(msg, now_ms)
            elif msg.token in self.pending:
                self.on_forwarded_response(msg, now_ms)
            elif msg.token in self.finished_tokens:
                self.counters.duplicate_responses += 1
            else:
                self.on_response(msg, now_ms)
        elif isinstance(msg, RequestForAnswer):
            self.on_request_for_answer(msg, now_ms)
        elif isinstance(msg, TicketBatch):
            self.on_ticket_batch(msg, now_ms)
        elif isinstance(msg, TicketExchange):
            self.on_ticket_exchange(msg, now_ms)
        else:
            self.ctx.emit({"ev": "unexpected_message", "peer": self.peer_id,
                           "kind": type(msg).__name__})

    def on_timer(self, tag, now_ms: int) -> None:
        kind = tag[0]
        if kind == "window":
            self.on_window_expiry(ZoneTag(tag[2]), now_ms)
        elif kind == "retry":
            self.on_retry_timer(tag[2], now_ms)
        elif kind == "broker_gc":
            self.on_broker_gc(tag[2], tag[3], now_ms)
        elif kind == "flush":
            self.flush_deferred(now_ms)
