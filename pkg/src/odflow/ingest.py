"""Trip-record CSV parsing and time-slot bucketing.

Rows that fail validation are counted per reject reason, never silently
dropped. Timestamps are naive local time: the slot structure is aligned to
local rush hours, so no timezone math is applied anywhere.
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field
from datetime import date, datetime

MINUTES_PER_DAY = 1440

DEFAULT_COLUMNS = {
    "pickup_time": "pickup_time",
    "pickup_lat": "pickup_lat",
    "pickup_lon": "pickup_lon",
    "dropoff_lat": "dropoff_lat",
    "dropoff_lon": "dropoff_lon",
    "passenger_count": "passenger_count",
}

_TIME_FORMATS = ("%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M")


class SchemaError(ValueError):
    """A required column is missing from the CSV header."""


@dataclass(frozen=True)
class TripRecord:
    pickup_time: datetime
    pickup_lat: float
    pickup_lon: float
    dropoff_lat: float
    dropoff_lon: float
    passenger_count: int


@dataclass(frozen=True)
class SlotKey:
    """One (day, time-slot) bucket; slots are 1-based within the day."""

    day_index: int
    slot: int
    day_of_week: int


@dataclass
class RejectTally:
    counts: Counter = field(default_factory=Counter)

    def add(self, reason: str):
        self.counts[reason] += 1

    @property
    def total(self):
        return sum(self.counts.values())

    def as_dict(self):
        return dict(sorted(self.counts.items()))


def _parse_timestamp(text: str) -> datetime:
    text = text.strip()
    for fmt in _TIME_FORMATS:
        try:
            return datetime.strptime(text, fmt)
        except ValueError:
            continue
    raise ValueError(f"unparsable timestamp {text!r}")


def _parse_count(text: str) -> int:
    value = float(text)
    if not value.is_integer():
        raise ValueError(f"passenger count {text!r} is not an integer")
    return int(value)


def parse_trips(source, columns=None):
    """Parse a trips CSV into validated TripRecords plus a reject tally.

    ``source`` may be a path, a text stream, or a binary stream of UTF-8
    CSV with a header row. ``columns`` maps the logical field names of
    DEFAULT_COLUMNS to the header names actually present; extra columns in
    the file are ignored.
    """
    columns = {**DEFAULT_COLUMNS, **(columns or {})}
    if hasattr(source, "read"):
        stream = source
        if isinstance(stream.read(0), bytes):
            stream = io.TextIOWrapper(stream, encoding="utf-8")
        return _parse_stream(stream, columns)
    with open(source, "r", encoding="utf-8", newline="") as fh:
        return _parse_stream(fh, columns)


def _parse_stream(stream, columns):
    reader = csv.DictReader(stream)
    records = []
    rejects = RejectTally()
    if reader.fieldnames is None:
        return records, rejects
    header = set(reader.fieldnames)
    missing = [name for name in columns.values() if name not in header]
    if missing:
        raise SchemaError(f"missing required columns: {', '.join(sorted(missing))}")

    for row in reader:
        try:
            when = _parse_timestamp(row[columns["pickup_time"]])
            plat = float(row[columns["pickup_lat"]])
            plon = float(row[columns["pickup_lon"]])
            dlat = float(row[columns["dropoff_lat"]])
            dlon = float(row[columns["dropoff_lon"]])
            count = _parse_count(row[columns["passenger_count"]])
        except (ValueError, TypeError):
            rejects.add("malformed")
            continue
        if not all(-90.0 <= v <= 90.0 for v in (plat, dlat)) or \
           not all(-180.0 <= v <= 180.0 for v in (plon, dlon)):
            rejects.add("out-of-range")
            continue
        if count < 1:
            rejects.add("zero-passengers")
            continue
        records.append(TripRecord(when, plat, plon, dlat, dlon, count))
    return records, rejects


def slots_per_day(slot_minutes: int) -> int:
    if slot_minutes <= 0 or MINUTES_PER_DAY % slot_minutes != 0:
        raise ValueError(f"slot_minutes must divide {MINUTES_PER_DAY}, got {slot_minutes}")
    return MINUTES_PER_DAY // slot_minutes


def slot_of(timestamp: datetime, slot_minutes: int, dataset_start_day: date) -> SlotKey:
    """Half-open bucketing: minute m lands in slot floor(m / slot_minutes) + 1."""
    slots_per_day(slot_minutes)
    day_index = (timestamp.date() - dataset_start_day).days
    if day_index < 0:
        raise ValueError(f"timestamp {timestamp} precedes dataset start {dataset_start_day}")
    minutes = timestamp.hour * 60 + timestamp.minute
    slot = minutes // slot_minutes + 1
    return SlotKey(day_index, slot, timestamp.weekday())
