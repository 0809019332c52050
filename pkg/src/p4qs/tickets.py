"""Ticket pools, server distribution, peer ticket exchange, and circulation math.

Exchange dilutes the server's knowledge of who holds which ticket.  The
closed-form residual-ownership probability after R rounds is

    P = ((T - E) / T)^R + (E / T)^N * sum_{i=1..R-1} ((T - E) / T)^i

for batch size T, E tickets swapped per round and N peers.  The closed form
assumes every round pairs a peer with an effectively fresh partner; the
Monte-Carlo estimator here simulates the actual swap process under either a
uniform-random pairing (matching that assumption) or ring-adjacent pairing
(matching the deployed topology), so the gap between formula and protocol
is measurable instead of assumed away.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

import numpy as np

from .crypto import ServerKeys, ServerPublic
from .envelope import Ticket, mint_ticket

TOPOLOGY_UNIFORM = "uniform"
TOPOLOGY_RING = "ring"


class UnregisteredPeerError(Exception):
    """Ticket distribution requested for a peer the server does not know."""


@dataclass
class ExchangeParams:
    tickets_per_batch: int
    exchanged_per_round: int
    rounds: int
    peers: int

    def validate(self) -> None:
        if self.tickets_per_batch <= 0:
            raise ValueError("tickets_per_batch must be positive")
        if not (0 <= self.exchanged_per_round <= self.tickets_per_batch):
            raise ValueError("exchanged_per_round must be in [0, tickets_per_batch]")
        if self.rounds < 0:
            raise ValueError("rounds must be nonnegative")
        if self.peers <= 0:
            raise ValueError("peers must be positive")


def ownership_probability(params: ExchangeParams) -> float:
    """Residual probability that a peer's tickets are still the ones issued to it."""
    params.validate()
    t, e, r, n = (params.tickets_per_batch, params.exchanged_per_round,
                  params.rounds, params.peers)
    keep = (t - e) / t
    tail = (e / t) ** n * sum(keep ** i for i in range(1, r))
    return keep ** r + tail


def ownership_probability_mc(params: ExchangeParams, topology: str,
                             rng: random.Random, trials: int) -> float:
    """Monte-Carlo estimate of the same quantity by simulating the swaps.

    Each trial runs the full population for R rounds and samples one tagged
    peer's final own-ticket pool fraction.  Only the positions of the tagged
    peer's original tickets matter, so a trial's state is the per-peer count
    of tagged tickets; per-pair moves are hypergeometric draws (E slots out
    of a T-ticket pool).  Trials are vectorized with numpy.
    """
    params.validate()
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if topology not in (TOPOLOGY_UNIFORM, TOPOLOGY_RING):
        raise ValueError(f"unknown topology {topology!r}")
    t, e, r, n = (params.tickets_per_batch, params.exchanged_per_round,
                  params.rounds, params.peers)
    if e == 0 or r == 0 or n == 1:
        return 1.0
    gen = np.random.default_rng(rng.getrandbits(64))

    total = 0.0
    remaining = trials
    batch_cap = max(1, 4_000_000 // n)
    while remaining > 0:
        b = min(remaining, batch_cap)
        counts = np.zeros((b, n), dtype=np.int64)
        counts[:, 0] = t  # tagged peer starts holding all of its own tickets
        for round_idx in range(r):
            if topology == TOPOLOGY_UNIFORM:
                perm = gen.permuted(np.tile(np.arange(n), (b, 1)), axis=1)
            else:
                # alternating brick pairing of ring neighbors
                perm = np.tile(np.arange(n), (b, 1))
                if round_idx % 2:
                    perm = np.roll(perm, -1, axis=1)
            pairs = n // 2
            a_idx = perm[:, : 2 * pairs : 2]
            b_idx = perm[:, 1 : 2 * pairs : 2]
            rows = np.arange(b)[:, None]
            ka = counts[rows, a_idx]
            kb = counts[rows, b_idx]
            xa = gen.hypergeometric(ka, t - ka, e)
            xb = gen.hypergeometric(kb, t - kb, e)
            counts[rows, a_idx] = ka - xa + xb
            counts[rows, b_idx] = kb - xb + xa
        total += float(counts[:, 0].sum()) / t
        remaining -= b
    return total / trials


# ---------------------------------------------------------------------------
# Server-side distribution


@dataclass
class TicketIssuer:
    """Server minting state: the authorized registry and the issuance ledger.

    The ledger (token -> first recipient) is exactly the linking resource a
    compromised server would hold, so it is kept in the adversary-visible
    shape from the start.
    """

    server_keys: ServerKeys
    registry: set
    ledger: list = field(default_factory=list)  # (token, peer_id, minted_ms, expiry_ms)

    def issued_to(self) -> dict:
        return {token: pid for token, pid, _, _ in self.ledger}


def distribute_batch(issuer: TicketIssuer, peer_id: str, batch_size: int,
                     validity_ms: int, now_ms: int, rng: random.Random) -> list:
    """Mint ``batch_size`` fresh tickets for an authorized peer and ledger them."""
    if peer_id not in issuer.registry:
        raise UnregisteredPeerError(peer_id)
    batch = [mint_ticket(issuer.server_keys, rng, validity_ms, now_ms)
             for _ in range(batch_size)]
    issuer.ledger.extend((t.token, peer_id, now_ms, t.expiry_ms) for t in batch)
    return batch


# ---------------------------------------------------------------------------
# Protocol-level pools and exchange


@dataclass
class TicketPool:
    """Tickets a peer owns, plus the tokens it already attached to queries."""

    owned: list = field(default_factory=list)
    used: set = field(default_factory=set)

    def add(self, tickets) -> None:
        self.owned.extend(tickets)

    def prune(self, now_ms: int, min_remaining_ms: int = 0) -> None:
        """Drop tickets that are expired (or expire within the margin)."""
        self.owned = [t for t in self.owned
                      if t.expiry_ms - now_ms > min_remaining_ms
                      and t.token not in self.used]

    def take(self, server_public: ServerPublic, now_ms: int,
             min_remaining_ms: int, rng: random.Random) -> Ticket | None:
        """Pop a random usable ticket; prunes ones that expire too soon."""
        self.prune(now_ms, min_remaining_ms)
        if not self.owned:
            return None
        ticket = self.owned.pop(rng.randrange(len(self.owned)))
        self.used.add(ticket.token)
        return ticket

    def __len__(self) -> int:
        return len(self.owned)


@dataclass
class TrustList:
    """Per-peer invalid-ticket accounting with a removal threshold."""

    trusted: set = field(default_factory=set)
    invalid_counts: dict = field(default_factory=dict)
    threshold: int = 3

    def trust(self, peer_ids) -> None:
        self.trusted.update(peer_ids)

    def record_invalid(self, sender_id: str, count: int = 1) -> bool:
        """Count invalid tickets from a sender; returns True if it got removed."""
        if count <= 0:
            return False
        total = self.invalid_counts.get(sender_id, 0) + count
        self.invalid_counts[sender_id] = total
        if total > self.threshold and sender_id in self.trusted:
            self.trusted.discard(sender_id)
            return True
        return False


def select_for_exchange(pool: TicketPool, count: int, rng: random.Random,
                        now_ms: int = 0) -> list:
    """Remove and return up to ``count`` uniformly chosen live owned tickets.

    Expired tickets are pruned first; shipping one to a partner would get an
    honest peer debited as a junk sender.
    """
    pool.prune(now_ms)
    k = min(count, len(pool.owned))
    picked = []
    for _ in range(k):
        picked.append(pool.owned.pop(rng.randrange(len(pool.owned))))
    return picked


def accept_exchanged(pool: TicketPool, trust: TrustList, sender_id: str,
                     tickets, server_public: ServerPublic, now_ms: int) -> int:
    """Validate incoming exchange tickets; keep good ones, count bad ones.

    Returns the number of invalid tickets (already recorded against the
    sender's trust).
    """
    bad = 0
    for ticket in tickets:
        if ticket.is_valid(server_public, now_ms):
            pool.owned.append(ticket)
        else:
            bad += 1
    if bad:
        trust.record_invalid(sender_id, bad)
    return bad


def pair_round(peer_ids, trust_lists, topology: str, rng: random.Random,
               ring_order=None, parity: int = 0) -> list:
    """Choose this round's exchange pairs among mutually trusting peers.

    ``uniform`` draws a random perfect matching; ``ring`` pairs adjacent
    peers of the given ring order in an alternating brick pattern.  Pairs
    where either side distrusts the other are dropped.
    """
    pairs = []
    if topology == TOPOLOGY_RING:
        order = list(ring_order if ring_order is not None else peer_ids)
        n = len(order)
        start = parity % 2
        for i in range(start, n - 1, 2):
            pairs.append((order[i], order[i + 1]))
        if start == 1 and n >= 2 and n % 2 == 0:
            pairs.append((order[-1], order[0]))
    else:
        shuffled = list(peer_ids)
        rng.shuffle(shuffled)
        pairs = [(shuffled[i], shuffled[i + 1]) for i in range(0, len(shuffled) - 1, 2)]
    return [(a, b) for a, b in pairs
            if b in trust_lists[a].trusted and a in trust_lists[b].trusted]


def exchange_round(pools: dict, trust_lists: dict, exchanged_per_round: int,
                   topology: str, server_public: ServerPublic, now_ms: int,
                   rng: random.Random, ring_order=None, parity: int = 0,
                   garbage_senders=None, garbage_factory=None) -> dict:
    """One synchronous exchange round over all peers; returns per-peer bad counts.

    Peers flagged in ``garbage_senders`` substitute forged tickets for their
    outgoing share (``garbage_factory(count)`` builds them); receivers drop
    those and debit the sender's trust.
    """
    garbage_senders = garbage_senders or set()
    pairs = pair_round(list(pools), trust_lists, topology, rng,
                       ring_order=ring_order, parity=parity)
    bad_counts = {}
    for a, b in pairs:
        pools[a].prune(now_ms)
        pools[b].prune(now_ms)
        k = min(exchanged_per_round, len(pools[a].owned), len(pools[b].owned))
        out_a = select_for_exchange(pools[a], k, rng, now_ms)
        out_b = select_for_exchange(pools[b], k, rng, now_ms)
        if a in garbage_senders and garbage_factory is not None:
            pools[a].owned.extend(out_a)  # keeps its real tickets, ships junk
            out_a = [garbage_factory() for _ in range(k)]
        if b in garbage_senders and garbage_factory is not None:
            pools[b].owned.extend(out_b)
            out_b = [garbage_factory() for _ in range(k)]
        bad_counts[b] = bad_counts.get(b, 0) + accept_exchanged(
            pools[b], trust_lists[b], a, out_a, server_public, now_ms)
        bad_counts[a] = bad_counts.get(a, 0) + accept_exchanged(
            pools[a], trust_lists[a], b, out_b, server_public, now_ms)
    return bad_counts
