"""The location-based server: POI store, batch processing, adversary view.

The server opens each batch member, validates its ticket (signature, marker,
expiry, single use), answers the query against the POI store using only the
cloak region, and seals the answer under the member's proposed key.  Every
rejection carries a reason code; everything a compromised server would know
is collected in :class:`AdversaryLog`.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field

from .crypto import SYM, DecryptError, ServerKeys
from .envelope import (
    AnonymizedBatch,
    CodecError,
    ExpiredTicket,
    InvalidTicket,
    ResponseEnvelope,
    open_sealed_parts,
)
from .geo import GeoPoint
from .overlay import EmptyOverlayError, OverlayDirectory
from .tickets import TicketIssuer, distribute_batch

REASON_MALFORMED = "malformed"
REASON_AUTH_FAILURE = "auth_failure"
REASON_INVALID_TICKET = "invalid_ticket"
REASON_EXPIRED_TICKET = "expired_ticket"
REASON_DUPLICATE_TOKEN = "duplicate_token"
REASON_UNDERSIZED_BATCH = "undersized_batch"

POI_CATEGORIES = ("restaurant", "hospital", "cafe", "fuel",
                  "hotel", "pharmacy", "park", "school")


# ---------------------------------------------------------------------------
# POI store


@dataclass(frozen=True)
class Poi:
    poi_id: int
    point: GeoPoint
    category: str
    name: str


class PoiStore:
    """Point-of-interest fixture with a uniform-grid spatial index.

    The index answers the same queries as a linear scan over the entries;
    the scan variants stay available as the oracle side of that check.
    Distances are plain Euclidean degrees.
    """

    def __init__(self, entries, cell_deg: float = 10.0):
        self.entries = list(entries)
        self.cell_deg = cell_deg
        self._cells = {}
        for poi in self.entries:
            self._cells.setdefault(self._cell_of(poi.point), []).append(poi)

    def _cell_of(self, p: GeoPoint) -> tuple:
        return (math.floor(p.longitude / self.cell_deg),
                math.floor(p.latitude / self.cell_deg))

    @staticmethod
    def _dist(a: GeoPoint, b: GeoPoint) -> float:
        return math.hypot(a.longitude - b.longitude, a.latitude - b.latitude)

    def nearest(self, category: str, point: GeoPoint) -> Poi | None:
        """Closest POI of a category; ties broken by store order (lowest id)."""
        ci, cj = self._cell_of(point)
        best = None
        max_ring = int(540.0 / self.cell_deg) + 2
        for ring in range(max_ring + 1):
            for i in range(ci - ring, ci + ring + 1):
                for j in range(cj - ring, cj + ring + 1):
                    if max(abs(i - ci), abs(j - cj)) != ring:
                        continue
                    for poi in self._cells.get((i, j), ()):
                        if poi.category != category:
                            continue
                        cand = (self._dist(poi.point, point), poi.poi_id)
                        if best is None or cand < best[:2]:
                            best = (cand[0], cand[1], poi)
            # Any point in a farther ring lies at least ring * cell_deg away,
            # so once the best distance is under that bound we are done.
            if best is not None and best[0] <= ring * self.cell_deg:
                break
        return best[2] if best else None

    def nearest_linear(self, category: str, point: GeoPoint) -> Poi | None:
        best = None
        for poi in self.entries:
            if poi.category != category:
                continue
            cand = (self._dist(poi.point, point), poi.poi_id, poi)
            if best is None or cand[:2] < best[:2]:
                best = cand
        return best[2] if best else None

    def in_region(self, category: str, x1: float, y1: float,
                  x2: float, y2: float) -> list:
        i_lo = math.floor(x1 / self.cell_deg)
        i_hi = math.floor(x2 / self.cell_deg)
        j_lo = math.floor(y1 / self.cell_deg)
        j_hi = math.floor(y2 / self.cell_deg)
        out = []
        for i in range(i_lo, i_hi + 1):
            for j in range(j_lo, j_hi + 1):
                for poi in self._cells.get((i, j), ()):
                    if poi.category == category and \
                            x1 <= poi.point.longitude <= x2 and \
                            y1 <= poi.point.latitude <= y2:
                        out.append(poi)
        out.sort(key=lambda poi: poi.poi_id)
        return out

    def in_region_linear(self, category: str, x1: float, y1: float,
                         x2: float, y2: float) -> list:
        return [poi for poi in self.entries
                if poi.category == category
                and x1 <= poi.point.longitude <= x2
                and y1 <= poi.point.latitude <= y2]

    # -- fixture I/O: line-delimited `lon,lat,category,name` in UTF-8

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for poi in self.entries:
                fh.write(f"{poi.point.longitude!r},{poi.point.latitude!r},"
                         f"{poi.category},{poi.name}\n")

    @classmethod
    def load(cls, path) -> "PoiStore":
        entries = []
        with open(path, "r", encoding="utf-8") as fh:
            for idx, line in enumerate(fh):
                line = line.strip()
                if not line:
                    continue
                lon, lat, category, name = line.split(",", 3)
                entries.append(Poi(idx, GeoPoint(float(lon), float(lat)), category, name))
        return cls(entries)

    @classmethod
    def generate(cls, rng: random.Random, count: int = 1000) -> "PoiStore":
        entries = []
        for i in range(count):
            point = GeoPoint(rng.uniform(-180.0, 180.0), rng.uniform(-90.0, 90.0))
            category = rng.choice(POI_CATEGORIES)
            entries.append(Poi(i, point, category, f"{category}-{i:04d}"))
        return cls(entries)


# ---------------------------------------------------------------------------
# Query answering


def answer_query(store: PoiStore, query_text: str, region) -> str:
    """Evaluate a query against the store using only the cloak region.

    Grammar: ``nearest:<category>`` (anchored at the region centroid) and
    ``range:<category>`` (POIs inside the region).  Unknown text yields an
    error answer rather than a rejection so that every opened member gets
    exactly one response.
    """
    kind, _, category = query_text.partition(":")
    if kind == "nearest" and category:
        poi = store.nearest(category, region.center())
        body = None
        if poi is not None:
            body = {"id": poi.poi_id, "name": poi.name,
                    "lon": poi.point.longitude, "lat": poi.point.latitude}
        return json.dumps({"kind": "nearest", "category": category, "poi": body},
                          sort_keys=True)
    if kind == "range" and category:
        pois = store.in_region(category, region.x1, region.y1, region.x2, region.y2)
        return json.dumps({"kind": "range", "category": category,
                           "pois": [{"id": p.poi_id, "name": p.name,
                                     "lon": p.point.longitude, "lat": p.point.latitude}
                                    for p in pois]}, sort_keys=True)
    return json.dumps({"kind": "error", "reason": "unknown query"}, sort_keys=True)


# ---------------------------------------------------------------------------
# Adversary view


@dataclass
class BatchView:
    """What the server records about one batch: region, tokens, outcomes."""

    batch_id: int
    time_ms: int
    region: tuple
    anonymizer_addr: str
    tokens: list
    outcomes: list  # "accepted" or a reason code, aligned with tokens


@dataclass
class AdversaryLog:
    """Everything a compromised server knows; no client addresses, no keys."""

    issuance: list = field(default_factory=list)   # (token, peer_id, minted, expiry)
    batches: list = field(default_factory=list)    # BatchView
    routed: list = field(default_factory=list)     # (token, broker_addr, time_ms)

    def issued_to(self) -> dict:
        return {token: pid for token, pid, _, _ in self.issuance}

    def accepted_tokens(self) -> list:
        out = []
        for bv in self.batches:
            out.extend(tok for tok, oc in zip(bv.tokens, bv.outcomes)
                       if oc == "accepted" and tok is not None)
        return out


# ---------------------------------------------------------------------------
# The server actor


class Lbs:
    """Event-driven server: ticket distribution plus batch processing."""

    def __init__(self, server_keys: ServerKeys, store: PoiStore,
                 directory: OverlayDirectory, k_min: int,
                 single_use: bool = True):
        self.keys = server_keys
        self.store = store
        self.directory = directory
        self.k_min = k_min
        self.single_use = single_use
        self.issuer = TicketIssuer(server_keys=server_keys, registry=set())
        self.seen_tokens = {}      # token -> (accept_time, expiry)
        self.rejects = []          # (time, reason, token or None)
        self._views = []           # BatchView
        self._routed = []
        self.accepted = 0

    def register(self, peer_id: str) -> None:
        self.issuer.registry.add(peer_id)

    def distribute(self, peer_id: str, batch_size: int, validity_ms: int,
                   now_ms: int, rng: random.Random) -> list:
        return distribute_batch(self.issuer, peer_id, batch_size,
                                validity_ms, now_ms, rng)

    def prune_seen(self, now_ms: int) -> None:
        """Drop tokens whose expiry passed; replays of those fail the expiry check."""
        self.seen_tokens = {tok: rec for tok, rec in self.seen_tokens.items()
                            if rec[1] > now_ms}

    def on_batch(self, batch: AnonymizedBatch, anonymizer_addr: str,
                 now_ms: int, rng: random.Random) -> list:
        """Process one batch; returns [(ResponseEnvelope, broker_addr)] to route.

        Member rejections never abort the batch; an undersized batch is
        rejected whole.
        """
        view = BatchView(batch_id=len(self._views), time_ms=now_ms,
                         region=(batch.region.x1, batch.region.y1,
                                 batch.region.x2, batch.region.y2,
                                 batch.region.t1, batch.region.t2),
                         anonymizer_addr=anonymizer_addr, tokens=[], outcomes=[])
        self._views.append(view)
        if len(batch.members) < self.k_min:
            self.rejects.append((now_ms, REASON_UNDERSIZED_BATCH, None))
            view.tokens = [None] * len(batch.members)
            view.outcomes = [REASON_UNDERSIZED_BATCH] * len(batch.members)
            return []
        out = []
        for member in batch.members:
            token = None
            try:
                opened = open_sealed_parts(member.sealed_payload, member.sealed_key,
                                           self.keys, now_ms)
                token = opened.ticket.token
                if self.single_use and token in self.seen_tokens:
                    raise _Duplicate()
            except CodecError:
                self._reject(view, now_ms, REASON_MALFORMED, token)
                continue
            except DecryptError:
                self._reject(view, now_ms, REASON_AUTH_FAILURE, token)
                continue
            except ExpiredTicket:
                self._reject(view, now_ms, REASON_EXPIRED_TICKET, token)
                continue
            except InvalidTicket:
                self._reject(view, now_ms, REASON_INVALID_TICKET, token)
                continue
            except _Duplicate:
                self._reject(view, now_ms, REASON_DUPLICATE_TOKEN, token)
                continue
            self.seen_tokens[token] = (now_ms, opened.ticket.expiry_ms)
            self.accepted += 1
            view.tokens.append(token)
            view.outcomes.append("accepted")
            answer = answer_query(self.store, opened.query_text, batch.region)
            sealed = SYM.seal(opened.prop_key, answer.encode("utf-8"), rng)
            broker_addr = self._resolve_broker(opened.broker_addr, token)
            if broker_addr is not None:
                self._routed.append((token, broker_addr, now_ms))
                out.append((ResponseEnvelope(token=token, sealed_response=sealed),
                            broker_addr))
        return out

    def _resolve_broker(self, preferred_addr: str, token: float) -> str | None:
        """Prefer the sealed broker address; fall back to the token's nearest peer."""
        for record in self.directory.peers():
            if record.address == preferred_addr:
                return preferred_addr
        try:
            return self.directory.lookup(token).address
        except EmptyOverlayError:
            return None

    def _reject(self, view: BatchView, now_ms: int, reason: str, token) -> None:
        self.rejects.append((now_ms, reason, token))
        view.tokens.append(token)
        view.outcomes.append(reason)

    def batch_views(self) -> list:
        return list(self._views)

    def adversary_view(self) -> AdversaryLog:
        return AdversaryLog(issuance=list(self.issuer.ledger),
                            batches=list(self._views),
                            routed=list(self._routed))


class _Duplicate(Exception):
    pass
