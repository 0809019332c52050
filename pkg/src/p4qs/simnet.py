"""Deterministic discrete-event simulator for the whole protocol.

One seeded ``random.Random`` drives every draw, events are totally ordered
by (fire time, sequence number), and actors only interact through emitted
messages and timers, so a (config, seed) pair always reproduces the same
byte-identical trace.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import math
import random
from dataclasses import dataclass, field

from .config import PROTOCOL_PSEUDONYM, RunConfig
from .crypto import ServerKeys
from .envelope import (
    AnonymizedBatch,
    QueryEnvelope,
    TicketBatch,
    TicketExchange,
    decode_message,
    encode_message,
    forge_unsigned_ticket,
    mint_ticket,
)
from .geo import GeoPoint, RING_MAX, RING_MIN, ZoneTag, geo_hash
from .lbs import Lbs, PoiStore
from .overlay import OverlayDirectory, PeerRecord
from .peer import LBS_ADDR, Peer
from .tickets import pair_round, select_for_exchange


class InvariantViolation(AssertionError):
    """A protocol invariant failed during or after a run."""


@dataclass(frozen=True)
class QuerySpec:
    t_ms: int
    peer_id: str
    location: GeoPoint
    text: str


@dataclass
class ClientQueryTruth:
    query_id: int
    peer_id: str
    t_ms: int
    location: GeoPoint | None = None
    tokens: list = field(default_factory=list)
    completed_at: int | None = None
    latency_ms: int | None = None


@dataclass
class SimTruth:
    """Ground truth the adversary never sees; derived from the trace."""

    queries: dict = field(default_factory=dict)      # qid -> ClientQueryTruth
    token_to_query: dict = field(default_factory=dict)  # token -> qid
    fake_tokens: dict = field(default_factory=dict)  # token -> creator peer_id


@dataclass
class SimResult:
    config: RunConfig
    trace: list
    trace_hash: str
    peers: dict
    lbs: Lbs
    directory: OverlayDirectory
    truth: SimTruth
    messages_sent: int
    messages_delivered: int
    messages_dropped: int
    messages_undelivered: int
    wall_seconds: float = 0.0

    def latencies(self) -> list:
        out = []
        for peer in self.peers.values():
            out.extend(peer.latencies)
        return out

    def counter_total(self, name: str) -> int:
        return sum(getattr(p.counters, name) for p in self.peers.values())


def route_hops(directory: OverlayDirectory, from_peer_id: str, key: float) -> int:
    """Greedy hop count from a peer to the key's responsible peer.

    Each hop moves to the known neighbor whose RA is lexicographically
    closest to the key over power-of-two ring offsets (the generalized
    ladder of the 2^(N-1) finger structure, deep enough for the overlay
    size), which keeps worst-case routes within ceil(log2 N) + 1 hops.
    """
    records = directory.peers()
    n = len(records)
    if n == 0:
        raise ValueError("empty overlay")
    target = directory.lookup(key)
    index = {rec.peer_id: i for i, rec in enumerate(records)}
    cur = directory.record(from_peer_id)
    if n == 1 or cur.peer_id == target.peer_id:
        return 0
    depth = max(1, math.ceil(math.log2(n)))
    offsets = sorted({1 << j for j in range(depth)})
    hops = 0

    def rank(rec):
        return (abs(rec.ra - key), rec.ra, rec.peer_id)

    while cur.peer_id != target.peer_id:
        i = index[cur.peer_id]
        best = cur
        for off in offsets:
            for j in (i + off, i - off):
                cand = records[j % n]
                if rank(cand) < rank(best):
                    best = cand
        if best.peer_id == cur.peer_id:
            raise InvariantViolation(
                f"greedy route stuck at {cur.peer_id} for key {key}")
        cur = best
        hops += 1
    return hops


class _PeerCtx:
    """The capability surface a peer state machine gets from the simulator."""

    def __init__(self, sim: "Simnet", peer_address: str, peer_id: str):
        self._sim = sim
        self._address = peer_address
        self._peer_id = peer_id

    @property
    def directory(self) -> OverlayDirectory:
        return self._sim.directory

    @property
    def server_public(self):
        return self._sim.server_public

    @property
    def rng(self) -> random.Random:
        return self._sim.rng

    def send(self, dst_addr: str, message, routed_key: float | None = None) -> None:
        self._sim.send_message(self._address, self._peer_id, dst_addr, message,
                               routed_key)

    def set_timer(self, at_ms: int, tag: tuple) -> int:
        return self._sim.set_timer(self._address, at_ms, tag)

    def cancel_timer(self, timer_id: int) -> None:
        self._sim.cancel_timer(timer_id)

    def collaborate(self, peer_id: str, side: ZoneTag, deficit: int) -> tuple:
        return self._sim.collaborate(peer_id, side, deficit)

    def emit(self, record: dict) -> None:
        self._sim.emit(record)

    def record_fake(self, creator_id: str, env, token: float, now_ms: int) -> None:
        self._sim.emit({"ev": "fake_created", "creator": creator_id,
                        "token": token})


class Simnet:
    """Build actors from a config, then run the event loop to quiescence."""

    def __init__(self, config: RunConfig, workload: list | None = None,
                 store: PoiStore | None = None):
        config.validate()
        self.config = config
        self.rng = random.Random(config.seed)
        self.clock = 0
        self._seq = 0
        self._heap: list = []
        self.trace: list = []
        self._timers_active: set = set()
        self._timer_ids = 0
        self.messages_sent = 0
        self.messages_delivered = 0
        self.messages_dropped = 0

        self.server_keys = ServerKeys.generate(self.rng)
        self.server_public = self.server_keys.public
        self.directory = OverlayDirectory()

        if store is None:
            if config.poi_path:
                store = PoiStore.load(config.poi_path)
            else:
                from .fixtures import load_default_store
                store = load_default_store()
        self.lbs = Lbs(self.server_keys, store, self.directory, k_min=config.k,
                       single_use=(config.protocol != PROTOCOL_PSEUDONYM))

        self.peers: dict = {}
        self.active: dict = {}
        base, jitter = config.latency.resolved()
        self._lat_base, self._lat_jitter = base, jitter

        for i in range(config.peers):
            pid = f"p{i:03d}"
            record = PeerRecord(peer_id=pid,
                                ra=self.rng.uniform(RING_MIN, RING_MAX),
                                address=f"addr:{pid}")
            pseudo = None
            if config.protocol == PROTOCOL_PSEUDONYM:
                pseudo = mint_ticket(self.server_keys, self.rng,
                                     validity_ms=config.horizon_ms + 120_000,
                                     now_ms=0)
            settle = 0
            if config.ticket.exchange_count and config.ticket.exchange_rounds:
                settle = (config.ticket.exchange_rounds + 1) * \
                    config.ticket.exchange_interval_ms
            peer = Peer(record, _PeerCtx(self, record.address, pid),
                        k=config.k, t_wait_ms=config.t_wait_ms,
                        min_cloak_side_deg=config.min_cloak_side_deg,
                        broker_timeout_ms=config.broker_timeout_ms,
                        retry_limit=config.retry_limit,
                        trust_threshold=config.ticket.trust_threshold,
                        pseudonym_ticket=pseudo,
                        ticket_settle_ms=settle)
            if config.fault_inject == "undersized_batch" and i == 0:
                peer.fault_undersized_once = True
            self.peers[pid] = peer
            self.active[pid] = True
            self.directory.join(record)
            self.lbs.register(pid)
            if config.protocol == PROTOCOL_PSEUDONYM and pseudo is not None:
                self.lbs.issuer.ledger.append((pseudo.token, pid, 0, pseudo.expiry_ms))

        all_ids = set(self.peers)
        for peer in self.peers.values():
            peer.trust.trust(all_ids - {peer.peer_id})

        self._clients = sorted(self.peers)[:config.clients] if config.clients \
            else sorted(self.peers)

        self._schedule_distributions()
        for entry in config.churn:
            self._push(entry["t"], ("churn", entry))

        self._workload = workload if workload is not None \
            else self._random_workload()
        self._qid = 0
        for spec in self._workload:
            self._push(spec.t_ms, ("query", spec))

    # ------------------------------------------------------------------
    # Scheduling primitives

    def _push(self, at_ms: int, item: tuple) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (at_ms, self._seq, item))

    def set_timer(self, owner_addr: str, at_ms: int, tag: tuple) -> int:
        self._timer_ids += 1
        tid = self._timer_ids
        self._timers_active.add(tid)
        self._push(at_ms, ("timer", owner_addr, tid, tag))
        return tid

    def cancel_timer(self, timer_id: int) -> None:
        self._timers_active.discard(timer_id)

    def emit(self, record: dict) -> None:
        record = dict(record)
        record["t"] = self.clock
        self.trace.append(record)

    def send_message(self, src_addr: str, src_peer_id: str | None, dst_addr: str,
                     message, routed_key: float | None = None) -> None:
        data = encode_message(message)
        if routed_key is not None and src_peer_id is not None \
                and src_peer_id in self.directory:
            hops = route_hops(self.directory, src_peer_id, routed_key)
        elif dst_addr == src_addr:
            hops = 0
        else:
            hops = 1
        delay = hops * (self._lat_base + self.rng.uniform(0, self._lat_jitter))
        self.messages_sent += 1
        self.emit({"ev": "send", "src": src_addr, "dst": dst_addr,
                   "kind": data[0], "bytes": len(data), "hops": hops})
        self._push(self.clock + int(delay), ("deliver", src_addr, dst_addr, data))

    # ------------------------------------------------------------------
    # Periodic machinery

    def _schedule_distributions(self) -> None:
        t = 0
        period = self.config.ticket.period_ms
        while t <= self.config.horizon_ms:
            self._push(t, ("distribute",))
            for r in range(self.config.ticket.exchange_rounds):
                self._push(t + (r + 1) * self.config.ticket.exchange_interval_ms,
                           ("exchange", r))
            t += period

    def _do_distribute(self) -> None:
        if self.config.protocol == PROTOCOL_PSEUDONYM:
            return  # fixed pseudonyms replace per-period tickets
        self.lbs.prune_seen(self.clock)
        cfg = self.config.ticket
        if cfg.batch_size == 0:
            return
        for pid in sorted(self.peers):
            if not self.active[pid]:
                continue
            batch = self.lbs.distribute(pid, cfg.batch_size, cfg.validity_ms,
                                        self.clock, self.rng)
            self.send_message(LBS_ADDR, None, self.peers[pid].address,
                              TicketBatch(tickets=tuple(batch)))
            self.peers[pid].queries_received = 0
        self.emit({"ev": "tickets_distributed", "peers": len(self.peers)})

    def _do_exchange(self, round_idx: int) -> None:
        if self.config.protocol == PROTOCOL_PSEUDONYM:
            return
        cfg = self.config.ticket
        if cfg.exchange_count == 0:
            return
        active_ids = [pid for pid in sorted(self.peers) if self.active[pid]]
        ring_order = [rec.peer_id for rec in self.directory.peers()
                      if self.active.get(rec.peer_id)]
        trust = {pid: self.peers[pid].trust for pid in active_ids}
        pools = {pid: self.peers[pid].pool for pid in active_ids}
        pairs = pair_round(active_ids, trust, cfg.topology, self.rng,
                           ring_order=ring_order, parity=round_idx)
        for a, b in pairs:
            pools[a].prune(self.clock)
            pools[b].prune(self.clock)
            k = min(cfg.exchange_count, len(pools[a]), len(pools[b]))
            if k == 0:
                continue
            out_a = self._outgoing_tickets(a, k)
            out_b = self._outgoing_tickets(b, k)
            self.send_message(self.peers[a].address, a, self.peers[b].address,
                              TicketExchange(sender_id=a, tickets=tuple(out_a)))
            self.send_message(self.peers[b].address, b, self.peers[a].address,
                              TicketExchange(sender_id=b, tickets=tuple(out_b)))
        self.emit({"ev": "exchange_round", "round": round_idx, "pairs": len(pairs)})

    def _outgoing_tickets(self, pid: str, k: int) -> list:
        peer = self.peers[pid]
        if peer.malicious_tickets:
            return [forge_unsigned_ticket(self.rng.uniform(RING_MIN, RING_MAX),
                                          self.clock + 60_000, self.rng)
                    for _ in range(k)]
        return select_for_exchange(peer.pool, k, self.rng, self.clock)

    # ------------------------------------------------------------------
    # Workload and churn

    def _random_workload(self) -> list:
        out = []
        if not self._clients or self.config.queries == 0:
            return out
        span = max(1, int(self.config.horizon_ms * 0.8))
        for _ in range(self.config.queries):
            t = self.rng.randrange(2000, max(2001, span))
            pid = self.rng.choice(self._clients)
            loc = GeoPoint(self.rng.uniform(-180.0, 180.0),
                           self.rng.uniform(-90.0, 90.0))
            text = "nearest:" + self.rng.choice(("restaurant", "hospital",
                                                 "cafe", "fuel"))
            out.append(QuerySpec(t, pid, loc, text))
        out.sort(key=lambda s: (s.t_ms, s.peer_id))
        return out

    def _do_churn(self, entry: dict) -> None:
        action = entry["action"]
        pid = entry.get("peer_id")
        self.emit({"ev": "churn", "action": action, "peer": pid})
        if action == "leave":
            if pid in self.directory:
                self.directory.leave(pid)
            self.active[pid] = False
        elif action == "join":
            ra = entry.get("ra", self.rng.uniform(RING_MIN, RING_MAX))
            record = PeerRecord(peer_id=pid, ra=ra, address=f"addr:{pid}")
            if pid in self.peers:
                self.peers[pid].record = record
            else:
                cfg = self.config
                peer = Peer(record, _PeerCtx(self, record.address, pid),
                            k=cfg.k, t_wait_ms=cfg.t_wait_ms,
                            min_cloak_side_deg=cfg.min_cloak_side_deg,
                            broker_timeout_ms=cfg.broker_timeout_ms,
                            retry_limit=cfg.retry_limit,
                            trust_threshold=cfg.ticket.trust_threshold)
                peer.trust.trust(set(self.peers))
                self.peers[pid] = peer
                self.lbs.register(pid)
                for other in self.peers.values():
                    other.trust.trusted.add(pid)
            self.directory.join(record)
            self.active[pid] = True
        elif action == "rejoin":
            self._rejoin_with_handoff(pid)
        elif action == "set_uncooperative":
            self.peers[pid].cooperative = False
        elif action == "set_malicious_tickets":
            self.peers[pid].malicious_tickets = True

    def collaborate(self, anon_id: str, side: ZoneTag, deficit: int) -> tuple:
        """Window-expiry hand-off: pull pending same-side queries from a ring
        neighbor when that covers the anonymity deficit; otherwise nothing.

        Checks the immediate successor first, then the predecessor, then the
        two combined.  The transfer happens synchronously at expiry time (the
        neighbors are one hop away and the wait window dominates latency).
        """
        if anon_id not in self.directory:
            return [], None
        pred, succ = self.directory.neighbors(anon_id)
        candidates = []
        for rec in (succ, pred):
            if rec.peer_id == anon_id or rec.peer_id in {c.peer_id for c in candidates}:
                continue
            neighbor = self.peers.get(rec.peer_id)
            if neighbor is None or not self.active.get(rec.peer_id) \
                    or not neighbor.cooperative:
                continue
            candidates.append(rec)

        def counts(rec):
            return self.peers[rec.peer_id].pending_count(side)

        chosen = []
        for rec in candidates:
            if counts(rec) >= deficit:
                chosen = [rec]
                break
        if not chosen and len(candidates) == 2 \
                and counts(candidates[0]) + counts(candidates[1]) >= deficit:
            chosen = [rec for rec in candidates if counts(rec) > 0]
        if not chosen or sum(counts(rec) for rec in chosen) < deficit:
            return [], None

        merged = []
        start = None
        for rec in chosen:
            entries, win_start = self.peers[rec.peer_id].donate_pending(side)
            merged.extend(entries)
            if win_start is not None:
                start = win_start if start is None else min(start, win_start)
            self.emit({"ev": "collab_donate", "from": rec.peer_id, "to": anon_id,
                       "side": side.value, "count": len(entries)})
        return merged, start

    def _rejoin_with_handoff(self, pid: str) -> None:
        """Leave + rejoin under a fresh RA; buffered queries get re-routed."""
        peer = self.peers[pid]
        held = []
        for side in (ZoneTag.LOW_LONGITUDE, ZoneTag.HIGH_LONGITUDE):
            entries, _ = peer.donate_pending(side)
            held.extend(entries)
        record = self.directory.rejoin_with_new_ra(pid, self.rng)
        peer.record = record
        peer.queries_received = 0
        self.emit({"ev": "rejoin", "peer": pid, "new_ra": record.ra,
                   "handoff": len(held)})
        for env, _ in held:
            key = geo_hash(env.location())
            target = self.directory.lookup(key)
            peer.counters.reforwarded += 1
            self.send_message(peer.address, pid, target.address, env,
                              routed_key=key)

    # ------------------------------------------------------------------
    # Event dispatch

    def _dispatch(self, item: tuple) -> None:
        kind = item[0]
        if kind == "deliver":
            _, src_addr, dst_addr, data = item
            self._deliver(src_addr, dst_addr, data)
        elif kind == "timer":
            _, owner_addr, tid, tag = item
            if tid not in self._timers_active:
                return
            self._timers_active.discard(tid)
            pid = owner_addr.removeprefix("addr:")
            if pid in self.peers:
                self.peers[pid].on_timer(tag, self.clock)
        elif kind == "query":
            spec: QuerySpec = item[1]
            self._qid += 1
            qid = self._qid
            peer = self.peers.get(spec.peer_id)
            if peer is None or not self.active[spec.peer_id]:
                self.emit({"ev": "query_skipped_absent", "peer": spec.peer_id})
                return
            peer.start_query(qid, spec.location, spec.text, self.clock)
        elif kind == "distribute":
            self._do_distribute()
        elif kind == "exchange":
            self._do_exchange(item[1])
        elif kind == "churn":
            self._do_churn(item[1])

    def _deliver(self, src_addr: str, dst_addr: str, data: bytes) -> None:
        msg = decode_message(data)
        if dst_addr == LBS_ADDR:
            self.messages_delivered += 1
            self.emit({"ev": "deliver", "src": src_addr, "dst": dst_addr,
                       "kind": data[0]})
            if isinstance(msg, AnonymizedBatch):
                routed = self.lbs.on_batch(msg, src_addr, self.clock, self.rng)
                for response, broker_addr in routed:
                    self.send_message(LBS_ADDR, None, broker_addr, response)
            return
        pid = dst_addr.removeprefix("addr:")
        peer = self.peers.get(pid)
        if peer is None or not self.active[pid]:
            self.messages_dropped += 1
            self.emit({"ev": "drop_peer_absent", "dst": dst_addr})
            return
        self.messages_delivered += 1
        self.emit({"ev": "deliver", "src": src_addr, "dst": dst_addr,
                   "kind": data[0]})
        peer.on_message(msg, self.clock)
        if isinstance(msg, QueryEnvelope):
            self._check_overload(peer)

    def _check_overload(self, peer: Peer) -> None:
        threshold = self.config.overload_threshold
        if threshold is not None and peer.queries_received > threshold \
                and peer.peer_id in self.directory:
            self.emit({"ev": "overload", "peer": peer.peer_id,
                       "received": peer.queries_received})
            self._rejoin_with_handoff(peer.peer_id)

    # ------------------------------------------------------------------
    # The loop

    def run(self) -> SimResult:
        import time as _time
        started = _time.perf_counter()
        horizon = self.config.horizon_ms
        while self._heap and self._heap[0][0] <= horizon:
            at, _, item = heapq.heappop(self._heap)
            if at < self.clock:
                raise InvariantViolation("clock moved backwards")
            self.clock = at
            self._dispatch(item)
        undelivered = sum(1 for _, _, item in self._heap if item[0] == "deliver")
        result = SimResult(
            config=self.config,
            trace=self.trace,
            trace_hash=trace_hash(self.trace),
            peers=self.peers,
            lbs=self.lbs,
            directory=self.directory,
            truth=build_truth(self.trace),
            messages_sent=self.messages_sent,
            messages_delivered=self.messages_delivered,
            messages_dropped=self.messages_dropped,
            messages_undelivered=undelivered,
            wall_seconds=_time.perf_counter() - started,
        )
        check_invariants(result)
        return result


def trace_hash(trace: list) -> str:
    h = hashlib.sha256()
    for record in trace:
        h.update(json.dumps(record, sort_keys=True).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def export_trace(trace: list, path: str) -> None:
    """Line-delimited JSON records, one event per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in trace:
            fh.write(json.dumps(record, sort_keys=True))
            fh.write("\n")


def build_truth(trace: list) -> SimTruth:
    truth = SimTruth()
    for record in trace:
        ev = record["ev"]
        if ev == "query_sent":
            qid = record["qid"]
            if qid not in truth.queries:
                truth.queries[qid] = ClientQueryTruth(
                    query_id=qid, peer_id=record["peer"],
                    t_ms=record.get("orig_t", record["t"]),
                    location=GeoPoint(record["lon"], record["lat"]))
            truth.queries[qid].tokens.append(record["token"])
            truth.token_to_query[record["token"]] = qid
        elif ev == "query_completed":
            qid = record["qid"]
            if qid in truth.queries:
                truth.queries[qid].completed_at = record["t"]
                truth.queries[qid].latency_ms = record["latency_ms"]
        elif ev == "fake_created":
            truth.fake_tokens[record["token"]] = record["creator"]
    return truth


def check_invariants(result: SimResult) -> None:
    """Post-run protocol invariants; violation is a first-class failure."""
    for view in result.lbs.batch_views():
        if len(view.tokens) < result.config.k:
            raise InvariantViolation(
                f"batch {view.batch_id} reached the server with "
                f"{len(view.tokens)} members (K={result.config.k})")
    total = result.messages_delivered + result.messages_dropped + \
        result.messages_undelivered
    if total != result.messages_sent:
        raise InvariantViolation(
            f"message accounting broken: sent={result.messages_sent} "
            f"delivered={result.messages_delivered} "
            f"dropped={result.messages_dropped} "
            f"undelivered={result.messages_undelivered}")
    if result.lbs.single_use:
        accepted = result.lbs.adversary_view().accepted_tokens()
        if len(accepted) != len(set(accepted)):
            raise InvariantViolation("a token was accepted twice")


def run(config: RunConfig, workload: list | None = None,
        store: PoiStore | None = None) -> SimResult:
    return Simnet(config, workload=workload, store=store).run()
