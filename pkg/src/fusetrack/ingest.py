"""Logfile ingestion: parse raw sensor logs and resample onto a uniform clock.

The logfile is plain UTF-8 text, one record per line::

    KIND;app_ts;sensor_ts;v1;...;vn

where KIND is one of ACCE, GYRO, MAGN, PRES, WIFI, POSI, AHRS. Lines starting
with ``%`` are header comments and are skipped. Unknown kinds (e.g. BLUE,
GNSS, LIGH, SOUN) are skipped and counted into a single warning.

``app_ts`` (receipt time, seconds) is the canonical clock for every channel;
``sensor_ts`` is stored on the record but otherwise unused.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AlignmentError,
    EmptyInputError,
    LogParseError,
    MissingChannelError,
    RangeError,
)

log = logging.getLogger(__name__)

ACCE = "ACCE"
GYRO = "GYRO"
MAGN = "MAGN"
PRES = "PRES"
WIFI = "WIFI"
POSI = "POSI"
AHRS = "AHRS"

#: payload arity per record kind (WIFI payload is ``(ap_id, rss)``)
PAYLOAD_ARITY = {ACCE: 3, GYRO: 3, MAGN: 3, AHRS: 3, PRES: 1, WIFI: 2, POSI: 3}

#: consecutive WIFI lines closer than this belong to one scan burst
WIFI_SCAN_GAP_S = 0.5

#: observable RSS floor; scan readings are clamped into [floor, 0] dBm
RSS_FLOOR_DBM = -110.0

DEFAULT_RATE_HZ = 50.0

#: the nine axial IMU channels every stream must provide
AXIAL_CHANNELS = (
    "acce_x", "acce_y", "acce_z",
    "gyro_x", "gyro_y", "gyro_z",
    "magn_x", "magn_y", "magn_z",
)

#: canonical channel order for CSV export
CSV_CHANNEL_ORDER = AXIAL_CHANNELS + (
    "acce_mag", "gyro_mag", "magn_mag", "pressure", "yaw",
)

_KIND_CHANNELS = {
    ACCE: ("acce_x", "acce_y", "acce_z"),
    GYRO: ("gyro_x", "gyro_y", "gyro_z"),
    MAGN: ("magn_x", "magn_y", "magn_z"),
}


@dataclass(frozen=True)
class RawRecord:
    """One logfile line of a known kind.

    ``payload`` holds the kind-specific values: three axial readings for
    ACCE/GYRO/MAGN (SI units), yaw/pitch/roll radians for AHRS, pressure hPa
    for PRES, ``(ap_id, rss_dbm)`` for WIFI and ``(x, y, floor)`` for POSI.
    """

    kind: str
    app_timestamp: float
    sensor_timestamp: float
    payload: tuple


@dataclass(frozen=True)
class WifiScan:
    """One WiFi scan burst: AP id -> RSS dBm, clamped into [-110, 0]."""

    timestamp: float
    readings: dict[str, float]


@dataclass(frozen=True)
class Landmark:
    """Ground-truth position annotation (typically at a direction change)."""

    timestamp: float
    x: float
    y: float
    floor: int


@dataclass
class SensorStream:
    """Uniformly sampled, channel-aligned sensor data.

    All channels share one grid: sample ``i`` is at ``t0 + i / rate``.
    Streams are immutable by convention after construction and safe to share
    across concurrent readers.
    """

    rate: float
    t0: float
    channels: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        lengths = {len(v) for v in self.channels.values()}
        if len(lengths) > 1:
            raise AlignmentError(f"channel lengths differ: {sorted(lengths)}")

    @property
    def length(self) -> int:
        if not self.channels:
            return 0
        return len(next(iter(self.channels.values())))

    @property
    def end(self) -> float:
        """Exclusive end time: ``t0 + length / rate``."""
        return self.t0 + self.length / self.rate

    @property
    def duration(self) -> float:
        return self.length / self.rate

    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.length) / self.rate

    def has_channel(self, name: str) -> bool:
        return name in self.channels

    def channel(self, name: str) -> np.ndarray:
        try:
            return self.channels[name]
        except KeyError:
            raise MissingChannelError(f"stream has no channel '{name}'") from None

    def with_channels(self, extra: dict[str, np.ndarray]) -> "SensorStream":
        """New stream sharing this grid with additional channels."""
        merged = dict(self.channels)
        for name, values in extra.items():
            values = np.asarray(values, dtype=float)
            if len(values) != self.length:
                raise AlignmentError(
                    f"channel '{name}' has {len(values)} samples, stream has {self.length}"
                )
            merged[name] = values
        return SensorStream(rate=self.rate, t0=self.t0, channels=merged)

    def value_at(self, name: str, t: float) -> float:
        """Channel value at time ``t`` by linear interpolation."""
        return float(np.interp(t, self.times(), self.channel(name)))

    def to_csv(self, path) -> None:
        """Export as ``t,<channels...>`` with channels in canonical order."""
        names = [c for c in CSV_CHANNEL_ORDER if c in self.channels]
        names += [c for c in sorted(self.channels) if c not in names]
        cols = [self.times()] + [self.channels[n] for n in names]
        data = np.column_stack(cols)
        header = ",".join(["t"] + names)
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.9g")


def parse_logfile(path) -> tuple[list[RawRecord], list[WifiScan], list[Landmark]]:
    """Parse a sensor logfile.

    Returns records sorted by app timestamp, WiFi lines grouped into scan
    bursts, and POSI lines as landmarks. Unknown kinds are skipped with one
    counted warning. Raises ``OSError`` if the file cannot be read,
    :class:`LogParseError` naming the line for malformed fields, and
    :class:`EmptyInputError` if no valid record was found.
    """
    records: list[RawRecord] = []
    skipped: Counter[str] = Counter()
    with open(path, encoding="utf-8") as fh:
        for line_no, raw_line in enumerate(fh, start=1):
            line = raw_line.strip()
            if not line or line.startswith("%"):
                continue
            parts = line.split(";")
            kind = parts[0].strip()
            if kind not in PAYLOAD_ARITY:
                skipped[kind] += 1
                continue
            arity = PAYLOAD_ARITY[kind]
            if len(parts) != 3 + arity:
                raise LogParseError(
                    f"{kind} record needs {arity} values, got {len(parts) - 3}",
                    line_no,
                )
            app_ts = _parse_float(parts[1], "app_timestamp", line_no)
            sensor_ts = _parse_float(parts[2], "sensor_timestamp", line_no)
            if not math.isfinite(app_ts) or app_ts < 0:
                raise LogParseError(
                    f"app_timestamp must be finite and non-negative, got {parts[1]}",
                    line_no,
                )
            if kind == WIFI:
                ap_id = parts[3].strip()
                if not ap_id:
                    raise LogParseError("empty access point id", line_no)
                rss = _parse_float(parts[4], "rss", line_no)
                payload: tuple = (ap_id, rss)
            else:
                payload = tuple(
                    _parse_float(p, f"value {i + 1}", line_no)
                    for i, p in enumerate(parts[3:])
                )
            records.append(RawRecord(kind, app_ts, sensor_ts, payload))
    if skipped:
        total = sum(skipped.values())
        log.warning(
            "skipped %d lines with unknown kinds: %s",
            total,
            ", ".join(f"{k}={n}" for k, n in sorted(skipped.items())),
        )
    if not records:
        raise EmptyInputError(f"no valid records in {path}")
    records.sort(key=lambda r: r.app_timestamp)
    return records, group_wifi_scans(records), extract_landmarks(records)


def _parse_float(text: str, what: str, line_no: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise LogParseError(f"malformed {what}: {text!r}", line_no) from None


def group_wifi_scans(records: list[RawRecord]) -> list[WifiScan]:
    """Group time-sorted WIFI records into scan bursts.

    A new burst starts whenever the gap to the previous WIFI line is at least
    ``WIFI_SCAN_GAP_S``. Within a burst the last reading wins for a duplicated
    AP; readings are clamped into [RSS_FLOOR_DBM, 0].
    """
    scans: list[WifiScan] = []
    current: dict[str, float] = {}
    t_first = None
    t_prev = None
    for rec in records:
        if rec.kind != WIFI:
            continue
        if t_prev is not None and rec.app_timestamp - t_prev >= WIFI_SCAN_GAP_S:
            scans.append(WifiScan(t_first, current))
            current = {}
            t_first = None
        if t_first is None:
            t_first = rec.app_timestamp
        ap_id, rss = rec.payload
        current[ap_id] = min(0.0, max(RSS_FLOOR_DBM, float(rss)))
        t_prev = rec.app_timestamp
    if current:
        scans.append(WifiScan(t_first, current))
    return scans


def extract_landmarks(records: list[RawRecord]) -> list[Landmark]:
    """POSI records as landmarks, strictly increasing in time (ties: last wins)."""
    landmarks: list[Landmark] = []
    for rec in records:
        if rec.kind != POSI:
            continue
        x, y, floor = rec.payload
        lm = Landmark(rec.app_timestamp, float(x), float(y), int(round(floor)))
        if landmarks and lm.timestamp == landmarks[-1].timestamp:
            landmarks[-1] = lm
        else:
            landmarks.append(lm)
    return landmarks


def write_logfile(records: list[RawRecord], path=None) -> str:
    """Serialize records back to logfile text (parse round-trips exactly)."""
    lines = []
    for rec in records:
        vals = []
        for v in rec.payload:
            if isinstance(v, str):
                vals.append(v)
            else:
                vals.append(repr(float(v)))
        lines.append(
            ";".join([rec.kind, repr(float(rec.app_timestamp)),
                      repr(float(rec.sensor_timestamp))] + vals)
        )
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text


def resample_stream(records: list[RawRecord], rate: float = DEFAULT_RATE_HZ) -> SensorStream:
    """Linearly interpolate every channel onto a uniform grid at ``rate`` Hz.

    The grid starts at the latest first-sample time across channels and ends
    at the earliest last-sample time, so every grid point is interpolated, not
    extrapolated. The nine axial IMU channels are required; ``pressure`` and
    ``yaw`` (from AHRS, unwrapped to a continuous angle) are included when
    present.
    """
    if rate <= 0:
        raise AlignmentError(f"rate must be positive, got {rate}")
    series: dict[str, tuple[list[float], list[float]]] = {}

    def push(name, t, v):
        series.setdefault(name, ([], []))[0].append(t)
        series[name][1].append(v)

    for rec in records:
        if rec.kind in _KIND_CHANNELS:
            for name, value in zip(_KIND_CHANNELS[rec.kind], rec.payload):
                push(name, rec.app_timestamp, float(value))
        elif rec.kind == PRES:
            push("pressure", rec.app_timestamp, float(rec.payload[0]))
        elif rec.kind == AHRS:
            push("yaw", rec.app_timestamp, float(rec.payload[0]))

    for name in AXIAL_CHANNELS:
        if name not in series:
            raise MissingChannelError(f"required channel '{name}' has no records")
    for name, (ts, _) in series.items():
        if len(ts) < 2:
            raise AlignmentError(f"channel '{name}' has fewer than 2 samples")

    t_start = max(ts[0] for ts, _ in series.values())
    t_end = min(ts[-1] for ts, _ in series.values())
    if t_end < t_start:
        raise AlignmentError(
            f"channels do not overlap in time (start {t_start}, end {t_end})"
        )
    n = int(math.floor((t_end - t_start) * rate + 1e-9)) + 1
    grid = t_start + np.arange(n) / rate

    channels = {}
    for name, (ts, vs) in series.items():
        values = np.asarray(vs, dtype=float)
        if name == "yaw":
            values = np.unwrap(values)
        channels[name] = np.interp(grid, np.asarray(ts), values)
    return SensorStream(rate=rate, t0=t_start, channels=channels)


def slice_stream(stream: SensorStream, t_a: float, t_b: float) -> SensorStream:
    """Contiguous sub-stream covering ``[t_a, t_b)``; rate preserved."""
    tol = 1e-9
    if not (stream.t0 - tol <= t_a < t_b <= stream.end + tol):
        raise RangeError(
            f"slice [{t_a}, {t_b}) outside stream [{stream.t0}, {stream.end})"
        )
    i0 = int(math.ceil((t_a - stream.t0) * stream.rate - tol))
    i1 = int(math.ceil((t_b - stream.t0) * stream.rate - tol))
    i0 = max(0, i0)
    i1 = min(stream.length, i1)
    channels = {name: v[i0:i1].copy() for name, v in stream.channels.items()}
    return SensorStream(rate=stream.rate, t0=stream.t0 + i0 / stream.rate,
                        channels=channels)
