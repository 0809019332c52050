"""Scenario presets, adversarial linkage attacks, and privacy report assembly.

Five named workloads exercise the protocol from different angles:

* ``PM``   profile matching: stationary clients, accuracy-sensitive queries;
* ``DCM``  driving-condition monitoring: vehicles reporting along roads with
  a tight 0.001 degree cloak floor;
* ``RM``   road map: moving clients asking for nearby POIs;
* ``DUSQ`` sender identification from query sequences;
* ``DUSW`` highway speed inference from two linked queries per vehicle.

Each preset can run under the full ticket protocol or under a
pseudonym baseline that swaps every client's tickets for one fixed
pseudonym token while keeping everything else identical.
"""

from __future__ import annotations

import math
import random
from collections import defaultdict
from dataclasses import dataclass, field

from .config import PROTOCOL_P4QS, RunConfig, TicketConfig
from .geo import GeoPoint
from .lbs import AdversaryLog
from .report import PrivacyReport, latency_summary
from .simnet import QuerySpec, SimResult, SimTruth, run as run_sim
from .tickets import ExchangeParams, ownership_probability

STRATEGY_TOKEN_LEDGER = "TOKEN_LEDGER"
STRATEGY_SPATIOTEMPORAL = "SPATIOTEMPORAL"

KM_PER_DEG = 111.0

CITY_LON, CITY_LAT = 51.4, 35.7
CITY_SPAN = 0.05


@dataclass
class ScenarioMeta:
    scenario_id: str
    attack_window_ms: int = 30_000
    speeds_kmh: dict = field(default_factory=dict)
    speed_threshold_kmh: float | None = None


@dataclass
class ScenarioRun:
    result: SimResult
    report: PrivacyReport
    meta: ScenarioMeta
    adversary: AdversaryLog


# ---------------------------------------------------------------------------
# Attack plumbing


@dataclass(frozen=True)
class AcceptedQuery:
    """One accepted real query as the adversary can see it, joined to truth."""

    query_id: int
    client_id: str
    token: float
    batch_id: int
    batch_time_ms: int
    region: tuple
    send_ms: int

    def center(self) -> tuple:
        return ((self.region[0] + self.region[2]) / 2,
                (self.region[1] + self.region[3]) / 2)


def accepted_queries(log: AdversaryLog, truth: SimTruth) -> list:
    """Join LBS acceptances back to ground-truth queries.

    Tokens are usually unique per query; under the pseudonym baseline one
    token recurs, so a client's queries are matched to that token's accepted
    batch instances in time order.
    """
    instances = defaultdict(list)  # token -> [(batch_time, batch_id, region)]
    for view in log.batches:
        for token, outcome in zip(view.tokens, view.outcomes):
            if outcome == "accepted" and token in truth.token_to_query:
                instances[token].append((view.time_ms, view.batch_id, view.region))
    for seq in instances.values():
        seq.sort()
    cursor = defaultdict(int)
    out = []
    queries = sorted(truth.queries.values(), key=lambda q: (q.t_ms, q.query_id))
    for q in queries:
        for token in q.tokens:
            pos = cursor[token]
            if pos < len(instances.get(token, ())):
                cursor[token] += 1
                t, bid, region = instances[token][pos]
                out.append(AcceptedQuery(query_id=q.query_id, client_id=q.peer_id,
                                         token=token, batch_id=bid,
                                         batch_time_ms=t, region=region,
                                         send_ms=q.t_ms))
                break
    return out


def true_consecutive_pairs(log: AdversaryLog, truth: SimTruth) -> list:
    """Ground-truth consecutive accepted query pairs, as (first, second) views."""
    per_client = defaultdict(list)
    for aq in accepted_queries(log, truth):
        per_client[aq.client_id].append(aq)
    pairs = []
    for client in sorted(per_client):
        seq = sorted(per_client[client], key=lambda aq: (aq.send_ms, aq.query_id))
        pairs.extend(zip(seq, seq[1:]))
    return pairs


def link_attack(log: AdversaryLog, strategy: str, truth: SimTruth,
                attack_window_ms: int = 30_000) -> float:
    """Fraction of true consecutive-query pairs the adversary chains correctly.

    ``TOKEN_LEDGER`` joins accepted tokens to the issuance ledger; a pair
    counts only when both tokens trace back to the true sender, which is
    exactly the residual-ownership event the exchange protocol dilutes.
    ``SPATIOTEMPORAL`` chains each batch to the nearest-region batch within
    the following time window, with no identifiers involved.
    """
    pairs = true_consecutive_pairs(log, truth)
    if not pairs:
        return 0.0
    if strategy == STRATEGY_TOKEN_LEDGER:
        issued = log.issued_to()
        hits = sum(1 for a, b in pairs
                   if issued.get(a.token) == issued.get(b.token) == a.client_id)
        return hits / len(pairs)
    if strategy == STRATEGY_SPATIOTEMPORAL:
        batches = [(v.batch_id, v.time_ms, v.region) for v in log.batches
                   if any(oc == "accepted" for oc in v.outcomes)]
        hits = 0
        for a, b in pairs:
            if a.batch_id == b.batch_id:
                continue
            cax, cay = a.center()
            best = None
            for bid, t, region in batches:
                if not (a.batch_time_ms < t <= a.batch_time_ms + attack_window_ms):
                    continue
                cx, cy = (region[0] + region[2]) / 2, (region[1] + region[3]) / 2
                cand = (math.hypot(cx - cax, cy - cay), t, bid)
                if best is None or cand < best:
                    best = cand
            if best is not None and best[2] == b.batch_id:
                hits += 1
        return hits / len(pairs)
    raise ValueError(f"unknown strategy {strategy!r}")


def sender_attribution_accuracy(log: AdversaryLog, truth: SimTruth) -> float:
    """Per-query chance the issuance ledger names the true sender."""
    issued = log.issued_to()
    accepted = accepted_queries(log, truth)
    if not accepted:
        return 0.0
    hits = sum(1 for aq in accepted if issued.get(aq.token) == aq.client_id)
    return hits / len(accepted)


def speed_inference_success(log: AdversaryLog, truth: SimTruth,
                            meta: ScenarioMeta) -> float | None:
    """Fraction of truly speeding clients flagged through their own query pair.

    The adversary chains pairs by ledger-owner equality (attribution is not
    needed to read off a speed), then estimates speed from the two regions'
    centroids and the cloak window start times.
    """
    if meta.speed_threshold_kmh is None or not meta.speeds_kmh:
        return None
    issued = log.issued_to()
    speeders = {pid for pid, v in meta.speeds_kmh.items()
                if v > meta.speed_threshold_kmh}
    if not speeders:
        return None
    flagged = set()
    for a, b in true_consecutive_pairs(log, truth):
        if a.client_id not in speeders:
            continue
        owner_a, owner_b = issued.get(a.token), issued.get(b.token)
        if owner_a is None or owner_a != owner_b:
            continue
        cax, cay = a.center()
        cbx, cby = b.center()
        dist_km = math.hypot(cbx - cax, cby - cay) * KM_PER_DEG
        dt_h = max(b.region[4] - a.region[4], 1) / 3_600_000.0
        if dist_km / dt_h > meta.speed_threshold_kmh:
            flagged.add(a.client_id)
    return len(flagged) / len(speeders)


# ---------------------------------------------------------------------------
# Report assembly


def build_report(result: SimResult, meta: ScenarioMeta) -> PrivacyReport:
    log = result.lbs.adversary_view()
    truth = result.truth
    views = result.lbs.batch_views()
    sizes = [len(v.tokens) for v in views]
    dist = {}
    for size in sizes:
        dist[str(size)] = dist.get(str(size), 0) + 1
    total_batches = len(sizes)
    if total_batches:
        dist = {k: v / total_batches for k, v in sorted(dist.items(),
                                                        key=lambda kv: int(kv[0]))}
    rejects = {}
    for _, reason, _ in result.lbs.rejects:
        rejects[reason] = rejects.get(reason, 0) + 1

    cfg = result.config
    analytic = None
    if cfg.ticket.batch_size > 0 and cfg.protocol == PROTOCOL_P4QS:
        analytic = ownership_probability(ExchangeParams(
            tickets_per_batch=cfg.ticket.batch_size,
            exchanged_per_round=cfg.ticket.exchange_count,
            rounds=cfg.ticket.exchange_rounds,
            peers=cfg.peers))

    lat = latency_summary(result.latencies())
    return PrivacyReport(
        scenario=meta.scenario_id,
        protocol=cfg.protocol,
        seed=cfg.seed,
        peers=cfg.peers,
        k=cfg.k,
        queries_scheduled=len(truth.queries),
        queries_sent=result.counter_total("queries_sent"),
        queries_completed=result.counter_total("completed"),
        queries_failed=result.counter_total("failed"),
        queries_deferred=result.counter_total("deferred"),
        retries=result.counter_total("retries"),
        batches=total_batches,
        batch_members_real=result.counter_total("real_members"),
        fakes=result.counter_total("fakes"),
        fakes_unticketed=result.counter_total("fakes_unticketed"),
        collab_merges=result.counter_total("collab_merges"),
        reforwarded=result.counter_total("reforwarded"),
        non_delivery=result.counter_total("non_delivery"),
        anonymity_min=min(sizes) if sizes else 0,
        anonymity_mean=sum(sizes) / len(sizes) if sizes else 0.0,
        anonymity_distribution=dist,
        linkage_token_ledger=link_attack(log, STRATEGY_TOKEN_LEDGER, truth,
                                         meta.attack_window_ms),
        linkage_spatiotemporal=link_attack(log, STRATEGY_SPATIOTEMPORAL, truth,
                                           meta.attack_window_ms),
        linkage_chance=(1.0 / cfg.peers) ** 2,
        sender_attribution=sender_attribution_accuracy(log, truth),
        ownership_analytic=analytic,
        ownership_empirical=sender_attribution_accuracy(log, truth),
        speed_inference_success=speed_inference_success(log, truth, meta),
        latency_count=lat["count"],
        latency_mean_ms=lat["mean"],
        latency_p50_ms=lat["p50"],
        latency_p95_ms=lat["p95"],
        latency_max_ms=lat["max"],
        rejects=rejects,
        messages_sent=result.messages_sent,
        messages_delivered=result.messages_delivered,
        trace_hash=result.trace_hash,
    )


# ---------------------------------------------------------------------------
# Preset workloads


def _city_point(rng: random.Random) -> GeoPoint:
    return GeoPoint(CITY_LON + rng.uniform(-CITY_SPAN, CITY_SPAN),
                    CITY_LAT + rng.uniform(-CITY_SPAN, CITY_SPAN))


def _move(start: GeoPoint, heading_deg: float, speed_kmh: float,
          dt_ms: int) -> GeoPoint:
    dist_deg = speed_kmh * (dt_ms / 3_600_000.0) / KM_PER_DEG
    lon = start.longitude + dist_deg * math.cos(math.radians(heading_deg))
    lat = start.latitude + dist_deg * math.sin(math.radians(heading_deg))
    return GeoPoint(max(-180.0, min(180.0, lon)), max(-90.0, min(90.0, lat)))


def _exchange_ticket_config() -> TicketConfig:
    # half-pool swaps for three rounds: residual ownership 0.125 < 1/K.
    # Validity equals the period so each period's pool is exactly one batch,
    # matching the circulation formula's T.
    return TicketConfig(batch_size=20, period_ms=60_000, validity_ms=60_000,
                        exchange_count=10, exchange_rounds=3,
                        exchange_interval_ms=400, topology="uniform")


def _preset_pm(seed: int) -> tuple:
    rng = random.Random(seed * 1_000_003 + 1)
    n_clients, queries_each, gap_ms = 12, 3, 25_000
    workload = []
    for i in range(n_clients):
        pid = f"p{i:03d}"
        spot = _city_point(rng)
        start = 4_000 + i * 2_000
        for q in range(queries_each):
            workload.append(QuerySpec(start + q * gap_ms, pid, spot,
                                      "nearest:" + rng.choice(("cafe", "restaurant"))))
    cfg = RunConfig(peers=30, k=4, queries=0, horizon_ms=240_000,
                    ticket=_exchange_ticket_config())
    return cfg, sorted(workload, key=lambda s: (s.t_ms, s.peer_id)), \
        ScenarioMeta("PM", attack_window_ms=40_000)


def _preset_dcm(seed: int) -> tuple:
    rng = random.Random(seed * 1_000_003 + 2)
    n_clients, queries_each, gap_ms = 16, 4, 20_000
    workload = []
    for i in range(n_clients):
        pid = f"p{i:03d}"
        start_pos = _city_point(rng)
        heading = rng.choice((0.0, 90.0, 180.0, 270.0))
        speed = rng.uniform(60.0, 100.0)
        start = 4_000 + i * 1_500
        for q in range(queries_each):
            t = start + q * gap_ms
            workload.append(QuerySpec(t, pid, _move(start_pos, heading, speed, t),
                                      "range:fuel"))
    cfg = RunConfig(peers=40, k=4, queries=0, horizon_ms=240_000,
                    min_cloak_side_deg=0.001, ticket=_exchange_ticket_config())
    return cfg, sorted(workload, key=lambda s: (s.t_ms, s.peer_id)), \
        ScenarioMeta("DCM", attack_window_ms=30_000)


def _preset_rm(seed: int) -> tuple:
    rng = random.Random(seed * 1_000_003 + 3)
    n_clients, queries_each, gap_ms = 10, 3, 15_000
    workload = []
    for i in range(n_clients):
        pid = f"p{i:03d}"
        start_pos = _city_point(rng)
        heading = rng.uniform(0.0, 360.0)
        speed = rng.uniform(40.0, 70.0)
        start = 4_000 + i * 1_200
        for q in range(queries_each):
            t = start + q * gap_ms
            workload.append(QuerySpec(t, pid, _move(start_pos, heading, speed, t),
                                      "nearest:" + rng.choice(("hospital", "fuel",
                                                               "hotel"))))
    cfg = RunConfig(peers=30, k=4, queries=0, horizon_ms=180_000,
                    ticket=_exchange_ticket_config())
    return cfg, sorted(workload, key=lambda s: (s.t_ms, s.peer_id)), \
        ScenarioMeta("RM", attack_window_ms=25_000)


def _preset_dusq(seed: int) -> tuple:
    rng = random.Random(seed * 1_000_003 + 4)
    n_clients, queries_each, gap_ms = 15, 3, 20_000
    workload = []
    for i in range(n_clients):
        pid = f"p{i:03d}"
        start_pos = _city_point(rng)
        heading = rng.uniform(0.0, 360.0)
        speed = rng.uniform(3.0, 6.0)  # walking
        start = 4_000 + i * 1_500
        for q in range(queries_each):
            t = start + q * gap_ms
            workload.append(QuerySpec(t, pid, _move(start_pos, heading, speed, t),
                                      "nearest:" + rng.choice(("cafe", "pharmacy"))))
    ticket = _exchange_ticket_config()
    ticket.exchange_rounds = 5  # residual ownership 0.03, well under 1/K
    cfg = RunConfig(peers=50, k=4, queries=0, horizon_ms=240_000, ticket=ticket)
    return cfg, sorted(workload, key=lambda s: (s.t_ms, s.peer_id)), \
        ScenarioMeta("DUSQ", attack_window_ms=30_000)


DUSW_SPEEDS = (90.0, 95.0, 100.0, 105.0, 108.0, 110.0, 112.0, 115.0,
               128.0, 130.0, 132.0, 134.0, 136.0, 138.0, 139.0, 140.0)
DUSW_THRESHOLD = 120.0
DUSW_PAIR_GAP_MS = 600_000


def _preset_dusw(seed: int) -> tuple:
    rng = random.Random(seed * 1_000_003 + 5)
    n_clients = len(DUSW_SPEEDS)
    speeds = list(DUSW_SPEEDS)
    rng.shuffle(speeds)
    road_lon = CITY_LON + 0.2
    workload = []
    meta = ScenarioMeta("DUSW", attack_window_ms=DUSW_PAIR_GAP_MS + 60_000,
                        speed_threshold_kmh=DUSW_THRESHOLD)
    for i in range(n_clients):
        pid = f"p{i:03d}"
        speed = speeds[i]
        meta.speeds_kmh[pid] = speed
        entry_lat = CITY_LAT + rng.uniform(0.0, 1.0 / KM_PER_DEG)  # first km
        start_pos = GeoPoint(road_lon, entry_lat)
        # staggered so every query gets its own anonymizer window; the pair
        # gap is long enough that centroid noise from the cloak box cannot
        # blur a vehicle across the speed threshold
        t1 = 3_000 + i * 5_200
        t2 = t1 + DUSW_PAIR_GAP_MS
        workload.append(QuerySpec(t1, pid, start_pos, "nearest:fuel"))
        workload.append(QuerySpec(t2, pid, _move(start_pos, 90.0, speed,
                                                 DUSW_PAIR_GAP_MS),
                                  "nearest:fuel"))
    ticket = TicketConfig(batch_size=20, period_ms=300_000, validity_ms=300_000,
                          exchange_count=10, exchange_rounds=5,
                          exchange_interval_ms=400, topology="uniform")
    cfg = RunConfig(peers=100, k=4, queries=0, horizon_ms=780_000, ticket=ticket)
    return cfg, sorted(workload, key=lambda s: (s.t_ms, s.peer_id)), meta


PRESETS = {
    "PM": _preset_pm,
    "DCM": _preset_dcm,
    "RM": _preset_rm,
    "DUSQ": _preset_dusq,
    "DUSW": _preset_dusw,
}


def build_preset(preset_id: str, seed: int) -> tuple:
    try:
        builder = PRESETS[preset_id]
    except KeyError:
        raise ValueError(f"unknown scenario preset {preset_id!r}; "
                         f"choose from {sorted(PRESETS)}") from None
    return builder(seed)


def run_scenario(preset_id: str, protocol: str = PROTOCOL_P4QS, seed: int = 0,
                 config_overrides: dict | None = None) -> ScenarioRun:
    cfg, workload, meta = build_preset(preset_id, seed)
    cfg.seed = seed
    cfg.protocol = protocol
    if config_overrides:
        for key, value in config_overrides.items():
            if not hasattr(cfg, key):
                raise ValueError(f"unknown config override {key!r}")
            setattr(cfg, key, value)
    cfg.validate()
    result = run_sim(cfg, workload=workload)
    report = build_report(result, meta)
    return ScenarioRun(result=result, report=report, meta=meta,
                       adversary=result.lbs.adversary_view())


def run_raw(config: RunConfig) -> ScenarioRun:
    """A plain simulation (random workload) reported under scenario id RAW."""
    meta = ScenarioMeta("RAW")
    result = run_sim(config)
    report = build_report(result, meta)
    return ScenarioRun(result=result, report=report, meta=meta,
                       adversary=result.lbs.adversary_view())
