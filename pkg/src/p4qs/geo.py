"""Geographic coordinates, the ring-coordinate hash, and mirror-zone separation.

The overlay assigns responsibilities by a one-dimensional ring coordinate
obtained by summing longitude and latitude.  Two mirror half-planes map to
the same coordinate; ``zone_of`` separates them so an anonymizer can cloak
each side independently.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass

RING_MIN = -270.0
RING_MAX = 270.0
RingCoordBounds = (RING_MIN, RING_MAX)


@dataclass(frozen=True)
class GeoPoint:
    """A point on the map, degrees. Longitude in [-180, 180], latitude in [-90, 90]."""

    longitude: float
    latitude: float

    def __post_init__(self) -> None:
        if not (-180.0 <= self.longitude <= 180.0):
            raise ValueError(f"longitude out of range: {self.longitude!r}")
        if not (-90.0 <= self.latitude <= 90.0):
            raise ValueError(f"latitude out of range: {self.latitude!r}")


class ZoneTag(enum.Enum):
    LOW_LONGITUDE = "low_longitude"
    HIGH_LONGITUDE = "high_longitude"


def geo_hash(p: GeoPoint) -> float:
    """Ring coordinate of a location: longitude + latitude, always in [-270, 270]."""
    return p.longitude + p.latitude


def zone_of(p: GeoPoint) -> ZoneTag:
    """Which mirror half-plane the point lies in.

    Classified by the sign of (longitude - latitude); the tie
    longitude == latitude goes to LOW_LONGITUDE.  Two points with swapped
    coordinates therefore always land on different sides unless they are
    on the diagonal.
    """
    return ZoneTag.LOW_LONGITUDE if p.longitude <= p.latitude else ZoneTag.HIGH_LONGITUDE


def sample_point_in_subzone(
    lo: float, hi: float, side: ZoneTag, rng: random.Random, max_tries: int = 64
) -> GeoPoint:
    """Draw a uniform-ish point whose hash falls in [lo, hi] on the given side.

    Used to synthesize plausible fake-query locations inside an anonymizer's
    sub-zone.  Near the extremes of the ring only one side is feasible; after
    ``max_tries`` rejections the side constraint is dropped so the caller
    always gets a point with the right hash.
    """
    lo = max(lo, RING_MIN)
    hi = min(hi, RING_MAX)
    if lo > hi:
        lo = hi = max(RING_MIN, min(RING_MAX, lo))
    for attempt in range(max_tries + 1):
        h = rng.uniform(lo, hi)
        # delta = longitude - latitude; feasible range follows from the
        # coordinate bounds, then is narrowed to the requested side.
        d_lo = max(-360.0 - h, h - 180.0)
        d_hi = min(360.0 - h, h + 180.0)
        if attempt < max_tries:
            if side is ZoneTag.LOW_LONGITUDE:
                d_hi = min(d_hi, 0.0)
            else:
                d_lo = max(d_lo, 1e-9)
        if d_lo > d_hi:
            continue
        delta = rng.uniform(d_lo, d_hi)
        lon = (h + delta) / 2.0
        lat = (h - delta) / 2.0
        lon = max(-180.0, min(180.0, lon))
        lat = max(-90.0, min(90.0, lat))
        return GeoPoint(lon, lat)
    raise RuntimeError(f"no feasible point for hash interval [{lo}, {hi}]")
