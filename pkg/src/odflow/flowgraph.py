"""Per-slot OD request graphs, demand vectors, and semantic neighbor sets.

Each time slot of each day gets one SlotGraph: a complete weighted digraph
over the grid cells, stored as sparse triplets (absent edge = weight 0).
Slots with no trips are present as all-zero graphs, never skipped.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import date

import numpy as np

from .geogrid import GridSpec, assign_cell
from .ingest import SlotKey, slot_of, slots_per_day


@dataclass
class SlotGraph:
    """OD matrix for one (day, slot): triplets (origin, dest, weight), 1-based."""

    key: SlotKey
    n: int
    triplets: list

    def dense(self) -> np.ndarray:
        od = np.zeros((self.n, self.n), dtype=np.float64)
        for i, j, w in self.triplets:
            od[i - 1, j - 1] += w
        return od

    def total(self):
        return sum(w for _, _, w in self.triplets)


def forward_neighbors(g: SlotGraph, i: int) -> set:
    """Cells receiving at least one request from cell i (self excluded)."""
    _check_cell(g, i)
    return {j for a, j, w in g.triplets if a == i and w > 0 and j != i}


def backward_neighbors(g: SlotGraph, i: int) -> set:
    """Cells sending at least one request to cell i (self excluded)."""
    _check_cell(g, i)
    return {a for a, j, w in g.triplets if j == i and w > 0 and a != i}


def degrees(g: SlotGraph, k: int):
    """(in_degree, out_degree) of cell k: column and row sums of the OD matrix."""
    _check_cell(g, k)
    ind = sum(w for a, j, w in g.triplets if j == k)
    outd = sum(w for a, j, w in g.triplets if a == k)
    return ind, outd


def demand_vector(g: SlotGraph) -> np.ndarray:
    """Outgoing requests per cell: row sums of the OD matrix."""
    d = np.zeros(g.n, dtype=np.float64)
    for i, _, w in g.triplets:
        d[i - 1] += w
    return d


def _check_cell(g, i):
    if not 1 <= i <= g.n:
        raise ValueError(f"cell index {i} outside [1, {g.n}]")


class GraphStore:
    """Ordered sequence of SlotGraphs, one per (day, slot), dense in slots."""

    def __init__(self, grid: GridSpec, slot_minutes: int, start_date: date,
                 graphs: list, weight_mode="passengers"):
        self.grid = grid
        self.slot_minutes = slot_minutes
        self.start_date = start_date
        self.graphs = graphs
        self.weight_mode = weight_mode
        self.slots_per_day = slots_per_day(slot_minutes)
        self._by_abs = {self.abs_index(g.key): g for g in graphs}

    @property
    def n(self):
        return self.grid.n

    @property
    def days(self):
        return len(self.graphs) // self.slots_per_day

    def abs_index(self, key: SlotKey) -> int:
        return key.day_index * self.slots_per_day + (key.slot - 1)

    def key_of_abs(self, abs_index: int) -> SlotKey:
        day, s = divmod(abs_index, self.slots_per_day)
        return SlotKey(day, s + 1, (self.start_date.weekday() + day) % 7)

    def graph_at(self, key: SlotKey) -> SlotGraph:
        return self._by_abs[self.abs_index(key)]

    def graph_at_abs(self, abs_index: int) -> SlotGraph:
        return self._by_abs[abs_index]

    def has_abs(self, abs_index: int) -> bool:
        return abs_index in self._by_abs

    def keys(self):
        return [g.key for g in self.graphs]


def build_slot_graphs(trips, grid: GridSpec, slot_minutes: int, start_date=None,
                      weight_mode="passengers"):
    """Aggregate accepted trips into one SlotGraph per (day, slot).

    Trips with an endpoint outside the bbox are excluded and tallied.
    Returns (GraphStore, excluded_count).
    """
    if weight_mode not in ("passengers", "trips"):
        raise ValueError(f"unknown weight mode {weight_mode!r}")
    if start_date is None:
        if not trips:
            raise ValueError("cannot infer a start date from zero trips")
        start_date = min(t.pickup_time for t in trips).date()
    per_day = slots_per_day(slot_minutes)

    buckets = {}
    excluded = 0
    max_day = -1
    for trip in trips:
        origin = assign_cell(grid, trip.pickup_lat, trip.pickup_lon)
        dest = assign_cell(grid, trip.dropoff_lat, trip.dropoff_lon)
        if origin is None or dest is None:
            excluded += 1
            continue
        key = slot_of(trip.pickup_time, slot_minutes, start_date)
        weight = trip.passenger_count if weight_mode == "passengers" else 1
        abs_idx = key.day_index * per_day + (key.slot - 1)
        cell = buckets.setdefault(abs_idx, {})
        pair = (origin.index, dest.index)
        cell[pair] = cell.get(pair, 0) + weight
        max_day = max(max_day, key.day_index)

    graphs = []
    dow0 = start_date.weekday()
    for day in range(max_day + 1):
        for slot in range(1, per_day + 1):
            key = SlotKey(day, slot, (dow0 + day) % 7)
            pairs = buckets.get(day * per_day + (slot - 1), {})
            triplets = [(i, j, w) for (i, j), w in sorted(pairs.items())]
            graphs.append(SlotGraph(key, grid.n, triplets))
    store = GraphStore(grid, slot_minutes, start_date, graphs, weight_mode)
    return store, excluded


# ---------------------------------------------------------------------------
# persistence: JSON lines, one record per (day, slot), plus a sidecar meta file


def _meta_path(path):
    return str(path) + ".meta.json"


def save_store(store: GraphStore, path):
    with open(path, "w", encoding="utf-8") as fh:
        for g in store.graphs:
            record = {
                "day": g.key.day_index,
                "slot": g.key.slot,
                "dow": g.key.day_of_week,
                "od": [[i, j, w] for i, j, w in g.triplets],
            }
            fh.write(json.dumps(record, separators=(",", ":")))
            fh.write("\n")
    meta = {
        "grid": store.grid.to_dict(),
        "slot_minutes": store.slot_minutes,
        "start_date": store.start_date.isoformat(),
        "weight": store.weight_mode,
        "days": store.days,
    }
    with open(_meta_path(path), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_store(path) -> GraphStore:
    with open(_meta_path(path), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    grid = GridSpec.from_dict(meta["grid"])
    start = date.fromisoformat(meta["start_date"])
    graphs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            key = SlotKey(rec["day"], rec["slot"], rec["dow"])
            triplets = [(i, j, w) for i, j, w in rec["od"]]
            graphs.append(SlotGraph(key, grid.n, triplets))
    return GraphStore(grid, meta["slot_minutes"], start, graphs, meta["weight"])
