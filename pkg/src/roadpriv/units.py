"""Unit constants and conversions.

Distances are kilometres, travel times are seconds, speeds are km/h at the
API surface.
"""
from __future__ import annotations

import math

EARTH_RADIUS_KM = 6371.0
SECONDS_PER_HOUR = 3600.0
SECONDS_PER_DAY = 86400.0

DEFAULT_SPEED_LIMIT_KMH = 120.0
DEFAULT_SAMPLE_INTERVAL_S = 20.0

# Cost of an unreachable node. Never a large finite stand-in.
UNREACHABLE = math.inf


def kmh_to_km_per_s(speed_kmh: float) -> float:
    return speed_kmh / SECONDS_PER_HOUR


def travel_radius_km(dt_s: float, speed_kmh: float) -> float:
    """Distance covered in ``dt_s`` seconds at ``speed_kmh``."""
    return dt_s * kmh_to_km_per_s(speed_kmh)


def seconds_for(distance_km: float, speed_kmh: float) -> float:
    return distance_km / kmh_to_km_per_s(speed_kmh)
