"""Deterministic fixture generation: the POI store and golden wire files.

Everything here is seed-driven and byte-stable so the shipped files can be
regenerated and diffed (``p4qs fixtures``).
"""

from __future__ import annotations

import random
from importlib import resources
from pathlib import Path

from .crypto import SYM, ServerKeys
from .envelope import (
    AnonymizedBatch,
    BatchMember,
    CloakRegion,
    QueryEnvelope,
    RequestForAnswer,
    ResponseEnvelope,
    TicketBatch,
    TicketExchange,
    build_query,
    encode_message,
    mint_ticket,
)
from .geo import GeoPoint
from .lbs import PoiStore

POI_SEED = 2025
POI_COUNT = 1000
GOLDEN_SEED = 7


def default_store_path() -> Path:
    return Path(resources.files("p4qs").joinpath("data/poi_fixture.csv"))


def load_default_store() -> PoiStore:
    return PoiStore.load(default_store_path())


def generate_poi_fixture(path, seed: int = POI_SEED, count: int = POI_COUNT) -> PoiStore:
    store = PoiStore.generate(random.Random(seed), count)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    store.save(path)
    return store


def golden_messages(seed: int = GOLDEN_SEED) -> dict:
    """One deterministic wire message per codec kind, keyed by name."""
    rng = random.Random(seed)
    keys = ServerKeys.generate(rng)
    ticket = mint_ticket(keys, rng, validity_ms=90_000, now_ms=1_000)
    prop_key = SYM.new_key(rng)
    query = build_query(GeoPoint(51.4, 35.7), "nearest:hospital", ticket,
                        "addr:broker-1", prop_key, keys.public, rng, now_ms=2_000)
    members = (BatchMember(query.sealed_payload, query.sealed_key),)
    batch = AnonymizedBatch(
        region=CloakRegion(x1=51.39, y1=35.69, x2=51.41, y2=35.71, t1=2_000, t2=7_000),
        members=members)
    response = ResponseEnvelope(
        token=ticket.token,
        sealed_response=SYM.seal(prop_key, b'{"kind":"nearest"}', rng))
    request = RequestForAnswer(token=ticket.token, requester_addr="addr:client-3")
    tbatch = TicketBatch(tickets=(ticket, mint_ticket(keys, rng, 90_000, 1_000)))
    texchange = TicketExchange(sender_id="peer-5",
                               tickets=(mint_ticket(keys, rng, 90_000, 1_000),))
    return {
        "query": encode_message(query),
        "batch": encode_message(batch),
        "response": encode_message(response),
        "request_for_answer": encode_message(request),
        "ticket_batch": encode_message(tbatch),
        "ticket_exchange": encode_message(texchange),
    }


def write_golden_files(out_dir, seed: int = GOLDEN_SEED) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, blob in golden_messages(seed).items():
        path = out / f"{name}.bin"
        path.write_bytes(blob)
        paths.append(path)
    return paths
