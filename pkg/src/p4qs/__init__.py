"""Peer-to-peer K-anonymous location query protocol engine and simulator.

Peers cooperate to anonymize location queries: a DHT keyed by the sum of
longitude and latitude assigns each query to an anonymizer peer, responses
come back through a broker peer selected by a single-use server-signed
ticket, and peers trade tickets among themselves so the server cannot tell
whose query it is answering.
"""

from .config import PROTOCOL_P4QS, PROTOCOL_PSEUDONYM, ConfigError, RunConfig
from .crypto import ServerKeys, ServerPublic
from .envelope import (
    AnonymizedBatch,
    CloakRegion,
    QueryEnvelope,
    RequestForAnswer,
    ResponseEnvelope,
    Ticket,
    build_query,
    mint_ticket,
    open_query,
)
from .geo import GeoPoint, RingCoordBounds, ZoneTag, geo_hash, zone_of
from .lbs import AdversaryLog, Lbs, PoiStore
from .overlay import FingerTable, OverlayDirectory, PeerRecord
from .peer import Peer, cloak
from .report import PrivacyReport, emit_report, render_figures
from .scenarios import PRESETS, link_attack, run_raw, run_scenario
from .simnet import QuerySpec, SimResult, Simnet, route_hops, run
from .tickets import (
    ExchangeParams,
    TicketPool,
    TrustList,
    distribute_batch,
    exchange_round,
    ownership_probability,
    ownership_probability_mc,
)

__version__ = "0.1.0"
