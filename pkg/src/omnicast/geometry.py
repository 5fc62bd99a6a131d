"""Solar position and analytic clear-sky irradiance.

Solar position follows the NOAA solar calculator formulation (declination
and equation of time from the sun's apparent longitude, then hour angle). Clear-sky GHI
uses the Haurwitz model, which needs only the zenith angle; it stands in for
an external clear-sky service and is only ever used through ratios and
normalisations.
"""
from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Union

import numpy as np

from .errors import DomainError

HAURWITZ_A = 1098.0
HAURWITZ_B = 0.057
SECONDS_PER_DAY = 86400

TimeLike = Union[float, int, np.ndarray, datetime]


@dataclass(frozen=True)
class SolarPosition:
    """Zenith and azimuth in degrees; azimuth clockwise from north."""

    zenith: Union[float, np.ndarray]
    azimuth: Union[float, np.ndarray]


def to_unix(timestamp: TimeLike) -> Union[float, np.ndarray]:
    """Convert a datetime (naive means UTC) or unix seconds to unix seconds."""
    if isinstance(timestamp, datetime):
        if timestamp.tzinfo is None:
            timestamp = timestamp.replace(tzinfo=timezone.utc)
        return timestamp.timestamp()
    if isinstance(timestamp, np.datetime64):
        return timestamp.astype("datetime64[s]").astype(np.int64).astype(float)
    return np.asarray(timestamp, dtype=float) if np.ndim(timestamp) else float(timestamp)


def _sun_declination_and_eot(unix):
    """Declination (rad) and equation of time (minutes) from Julian centuries."""
    jd = np.asarray(unix, dtype=float) / SECONDS_PER_DAY + 2440587.5
    t = (jd - 2451545.0) / 36525.0
    mean_long = np.mod(280.46646 + t * (36000.76983 + t * 0.0003032), 360.0)
    mean_anom = 357.52911 + t * (35999.05029 - 0.0001537 * t)
    ecc = 0.016708634 - t * (0.000042037 + 0.0000001267 * t)
    m = np.deg2rad(mean_anom)
    center = (
        np.sin(m) * (1.914602 - t * (0.004817 + 0.000014 * t))
        + np.sin(2 * m) * (0.019993 - 0.000101 * t)
        + np.sin(3 * m) * 0.000289
    )
    omega = np.deg2rad(125.04 - 1934.136 * t)
    apparent_long = np.deg2rad(mean_long + center - 0.00569 - 0.00478 * np.sin(omega))
    obliquity = 23.0 + (26.0 + (21.448 - t * (46.815 + t * (0.00059 - t * 0.001813))) / 60.0) / 60.0
    eps = np.deg2rad(obliquity + 0.00256 * np.cos(omega))
    decl = np.arcsin(np.sin(eps) * np.sin(apparent_long))

    y = np.tan(eps / 2.0) ** 2
    l0 = np.deg2rad(mean_long)
    eot = 4.0 * np.rad2deg(
        y * np.sin(2 * l0)
        - 2 * ecc * np.sin(m)
        + 4 * ecc * y * np.sin(m) * np.cos(2 * l0)
        - 0.5 * y * y * np.sin(4 * l0)
        - 1.25 * ecc * ecc * np.sin(2 * m)
    )
    return decl, eot


def solar_position(latitude: float, longitude: float, timestamp: TimeLike) -> SolarPosition:
    """Sun zenith and azimuth seen from (latitude, longitude) at a UTC instant.

    ``timestamp`` may be a datetime or unix seconds (scalar or array); the
    result has the same shape. No refraction correction is applied.
    """
    if not np.isfinite(latitude) or abs(latitude) > 90:
        raise DomainError(f"latitude must lie in [-90, 90], got {latitude}")
    scalar = np.ndim(timestamp) == 0
    unix = np.asarray(to_unix(timestamp), dtype=float)
    decl, eot = _sun_declination_and_eot(unix)

    minutes_utc = np.mod(unix, SECONDS_PER_DAY) / 60.0
    true_solar_minutes = minutes_utc + eot + 4.0 * longitude
    hour_angle = np.deg2rad(true_solar_minutes / 4.0 - 180.0)

    lat = np.deg2rad(latitude)
    cos_zen = np.sin(lat) * np.sin(decl) + np.cos(lat) * np.cos(decl) * np.cos(hour_angle)
    zenith = np.rad2deg(np.arccos(np.clip(cos_zen, -1.0, 1.0)))
    azimuth = np.rad2deg(
        np.arctan2(
            np.sin(hour_angle),
            np.cos(hour_angle) * np.sin(lat) - np.tan(decl) * np.cos(lat),
        )
    )
    azimuth = np.mod(azimuth + 180.0, 360.0)
    if scalar:
        return SolarPosition(float(zenith), float(azimuth))
    return SolarPosition(zenith, azimuth)


def clear_sky_ghi(position_or_zenith) -> Union[float, np.ndarray]:
    """Haurwitz clear-sky GHI in W/m2; exactly zero for zenith >= 90 degrees."""
    zenith = getattr(position_or_zenith, "zenith", position_or_zenith)
    scalar = np.ndim(zenith) == 0
    zen = np.asarray(zenith, dtype=float)
    cz = np.cos(np.deg2rad(zen))
    day = zen < 90.0
    safe = np.where(day, cz, 1.0)
    ghi = np.where(day, HAURWITZ_A * safe * np.exp(-HAURWITZ_B / safe), 0.0)
    ghi = np.maximum(ghi, 0.0)
    return float(ghi) if scalar else ghi


def clear_sky_at(latitude: float, longitude: float, timestamp: TimeLike):
    return clear_sky_ghi(solar_position(latitude, longitude, timestamp))


def sun_offset_on_layer(position: SolarPosition, height_m: float):
    """East/north offset (m) where the sun ray crosses a horizontal layer."""
    z = np.deg2rad(np.minimum(position.zenith, 89.0))
    az = np.deg2rad(position.azimuth)
    rho = height_m * np.tan(z)
    return rho * np.sin(az), rho * np.cos(az)
