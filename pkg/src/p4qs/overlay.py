"""The DHT ring of peers keyed by ring coordinate (RA).

The directory keeps peers sorted by RA and answers nearest-RA lookups
exactly; finger tables (4 successors, 4 predecessors at power-of-two index
offsets) are maintained for every peer on each membership change and are
what the hop-count cost model routes over.
"""

from __future__ import annotations

import bisect
import random
from dataclasses import dataclass, field

from .geo import RING_MAX, RING_MIN

FINGER_COUNT = 4


class EmptyOverlayError(Exception):
    """No peer is responsible for any key."""


class DuplicatePeerError(Exception):
    pass


class UnknownPeerError(Exception):
    pass


@dataclass(frozen=True)
class PeerRecord:
    peer_id: str
    ra: float
    address: str

    def __post_init__(self) -> None:
        if not (RING_MIN <= self.ra <= RING_MAX):
            raise ValueError(f"ra out of range: {self.ra!r}")


@dataclass(frozen=True)
class FingerTable:
    """Power-of-two neighbors: entry N is the 2^(N-1)-th node along the ring.

    With fewer than 9 peers the offsets wrap and entries repeat; that is
    accepted rather than rejected so tiny overlays stay usable.
    """

    successors: tuple
    predecessors: tuple


@dataclass
class OverlayDirectory:
    """RA-sorted index of peers with exact nearest-RA lookup.

    Mutations happen only on the simulation event loop; reads are safe
    anywhere.  Equal RAs are permitted and ordered by peer_id.
    """

    _order: list = field(default_factory=list)   # sorted list of (ra, peer_id)
    _by_id: dict = field(default_factory=dict)   # peer_id -> PeerRecord
    _fingers: dict = field(default_factory=dict)  # peer_id -> FingerTable

    def __len__(self) -> int:
        return len(self._order)

    def __contains__(self, peer_id: str) -> bool:
        return peer_id in self._by_id

    def peers(self) -> list:
        """All records in ring (RA, peer_id) order."""
        return [self._by_id[pid] for _, pid in self._order]

    def record(self, peer_id: str) -> PeerRecord:
        try:
            return self._by_id[peer_id]
        except KeyError:
            raise UnknownPeerError(peer_id) from None

    def lookup(self, key: float) -> PeerRecord:
        """The peer whose RA minimizes |ra - key|.

        Ties between two distinct RAs go to the lower RA; ties between
        peers sharing one RA go to the lowest peer_id.
        """
        if not self._order:
            raise EmptyOverlayError("lookup on empty overlay")
        i = bisect.bisect_left(self._order, (key, ""))
        best_dist = best_ra = None
        for j in (i - 1, i):
            if 0 <= j < len(self._order):
                ra, _ = self._order[j]
                d = abs(ra - key)
                if best_dist is None or (d, ra) < (best_dist, best_ra):
                    best_dist, best_ra = d, ra
        k = bisect.bisect_left(self._order, (best_ra, ""))
        return self._by_id[self._order[k][1]]

    def join(self, record: PeerRecord) -> FingerTable:
        if record.peer_id in self._by_id:
            raise DuplicatePeerError(record.peer_id)
        bisect.insort(self._order, (record.ra, record.peer_id))
        self._by_id[record.peer_id] = record
        self._refresh_fingers()
        return self._fingers[record.peer_id]

    def leave(self, peer_id: str) -> PeerRecord:
        record = self.record(peer_id)
        self._order.remove((record.ra, peer_id))
        del self._by_id[peer_id]
        del self._fingers[peer_id]
        self._refresh_fingers()
        return record

    def rejoin_with_new_ra(self, peer_id: str, rng: random.Random) -> PeerRecord:
        """Leave and immediately rejoin with a fresh uniform RA (overload relief)."""
        old = self.leave(peer_id)
        fresh = PeerRecord(peer_id=peer_id, ra=rng.uniform(RING_MIN, RING_MAX),
                           address=old.address)
        self.join(fresh)
        return fresh

    def finger_table(self, peer_id: str) -> FingerTable:
        if peer_id not in self._fingers:
            raise UnknownPeerError(peer_id)
        return self._fingers[peer_id]

    def neighbors(self, peer_id: str) -> tuple:
        """Immediate ring (predecessor, successor) of a peer; self when alone."""
        record = self.record(peer_id)
        n = len(self._order)
        i = self._order.index((record.ra, peer_id))
        pred = self._by_id[self._order[(i - 1) % n][1]]
        succ = self._by_id[self._order[(i + 1) % n][1]]
        return pred, succ

    def zone_interval(self, peer_id: str) -> tuple:
        """The [lo, hi] hash interval whose nearest peer is this one.

        Midpoints to the ring-order neighbors in linear coordinate space;
        the extremes extend to the ends of the ring.
        """
        record = self.record(peer_id)
        n = len(self._order)
        i = self._order.index((record.ra, peer_id))
        lo = RING_MIN if i == 0 else (self._order[i - 1][0] + record.ra) / 2.0
        hi = RING_MAX if i == n - 1 else (record.ra + self._order[i + 1][0]) / 2.0
        return lo, hi

    def _finger_for_index(self, i: int) -> FingerTable:
        n = len(self._order)
        succ = tuple(self._by_id[self._order[(i + (1 << k)) % n][1]]
                     for k in range(FINGER_COUNT))
        pred = tuple(self._by_id[self._order[(i - (1 << k)) % n][1]]
                     for k in range(FINGER_COUNT))
        return FingerTable(successors=succ, predecessors=pred)

    def _refresh_fingers(self) -> None:
        # Every membership change can shift power-of-two offsets for any
        # peer, so refresh all tables; overlays are small enough that this
        # O(N) pass is irrelevant next to the protocol work.
        self._fingers = {pid: self._finger_for_index(i)
                         for i, (_, pid) in enumerate(self._order)}

    def build_fingers_from_scratch(self) -> dict:
        """Oracle helper: recompute all finger tables from the sorted ring."""
        return {pid: self._finger_for_index(i)
                for i, (_, pid) in enumerate(self._order)}
