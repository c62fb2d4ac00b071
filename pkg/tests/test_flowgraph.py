"""OD aggregation, semantic neighbors, degrees, and store persistence."""

from datetime import date, datetime

import numpy as np
import pytest

from conftest import make_grid
from odflow.flowgraph import (SlotGraph, backward_neighbors, build_slot_graphs,
                              degrees, demand_vector, forward_neighbors,
                              load_store, save_store)
from odflow.ingest import SlotKey, TripRecord


def _trip(when, origin_center, dest_center, count=1):
    return TripRecord(when, origin_center[0], origin_center[1],
                      dest_center[0], dest_center[1], count)


def _graph(n, entries, key=SlotKey(0, 1, 0)):
    return SlotGraph(key, n, [(i, j, w) for (i, j, w) in entries])


def test_slots_without_trips_are_present_and_zero():
    grid = make_grid(2, 2)
    trips = [_trip(datetime(2024, 1, 1, 0, 10), grid.center(1), grid.center(2))]
    store, excluded = build_slot_graphs(trips, grid, 60)
    assert excluded == 0
    assert len(store.graphs) == 24
    assert store.graph_at(SlotKey(0, 5, 0)).triplets == []
    assert np.all(store.graph_at(SlotKey(0, 5, 0)).dense() == 0.0)


def test_three_trips_single_bucket_trip_weighted():
    grid = make_grid(2, 3)
    when = datetime(2024, 1, 1, 7, 30)
    trips = [_trip(when, grid.center(2), grid.center(5), count=9)] * 3
    store, _ = build_slot_graphs(trips, grid, 60, weight_mode="trips")
    g = store.graph_at(SlotKey(0, 8, 0))
    assert g.triplets == [(2, 5, 3)]


def test_passenger_weighting_uses_counts():
    grid = make_grid(2, 3)
    when = datetime(2024, 1, 1, 7, 30)
    trips = [_trip(when, grid.center(2), grid.center(5), count=2),
             _trip(when, grid.center(2), grid.center(5), count=3)]
    store, _ = build_slot_graphs(trips, grid, 60, weight_mode="passengers")
    assert store.graph_at(SlotKey(0, 8, 0)).triplets == [(2, 5, 5)]


def test_out_of_bbox_trips_are_excluded_and_tallied():
    grid = make_grid(2, 2)
    inside = grid.center(1)
    trips = [_trip(datetime(2024, 1, 1, 1, 0), inside, inside),
             _trip(datetime(2024, 1, 1, 1, 0), inside, (0.0, 0.0))]
    store, excluded = build_slot_graphs(trips, grid, 60)
    assert excluded == 1
    assert store.graph_at(SlotKey(0, 2, 0)).total() == 1


def test_random_trips_match_group_by_oracle(rng):
    grid = make_grid(3, 3)
    start = date(2024, 1, 1)
    trips = []
    oracle = {}
    for _ in range(500):
        day = int(rng.integers(0, 3))
        minute = int(rng.integers(0, 1440))
        origin = int(rng.integers(1, grid.n + 1))
        dest = int(rng.integers(1, grid.n + 1))
        count = int(rng.integers(1, 4))
        when = datetime(2024, 1, 1 + day, minute // 60, minute % 60)
        trips.append(_trip(when, grid.center(origin), grid.center(dest), count))
        key = (day, minute // 60 + 1, origin, dest)
        oracle[key] = oracle.get(key, 0) + count
    store, excluded = build_slot_graphs(trips, grid, 60, start_date=start)
    assert excluded == 0
    rebuilt = {}
    for g in store.graphs:
        for i, j, w in g.triplets:
            rebuilt[(g.key.day_index, g.key.slot, i, j)] = w
    assert rebuilt == oracle
    total = sum(g.total() for g in store.graphs)
    assert total == sum(t.passenger_count for t in trips)


# ---------------------------------------------------------------------------
# neighbors and degrees


def test_forward_backward_neighbors_reproduce_flow_example():
    # flows into and out of cell 14 as drawn in the source material; the
    # grid is sized to admit index 28 as-is
    g = _graph(30, [(14, 19, 2), (14, 21, 1), (14, 28, 4),
                    (7, 14, 1), (8, 14, 2), (9, 14, 5)])
    assert forward_neighbors(g, 14) == {19, 21, 28}
    assert backward_neighbors(g, 14) == {7, 8, 9}


def test_neighbors_of_empty_graph_are_empty():
    g = _graph(9, [])
    assert forward_neighbors(g, 4) == set()
    assert backward_neighbors(g, 4) == set()


def test_neighbors_exclude_self_loops():
    g = _graph(4, [(2, 2, 5), (2, 3, 1)])
    assert forward_neighbors(g, 2) == {3}
    assert backward_neighbors(g, 2) == set()


def test_random_od_matches_scan_oracles(rng):
    for _ in range(25):
        n = int(rng.integers(2, 8))
        od = (rng.uniform(size=(n, n)) < 0.3) * rng.integers(1, 5, size=(n, n))
        g = _graph(n, [(i + 1, j + 1, int(od[i, j]))
                       for i in range(n) for j in range(n) if od[i, j] > 0])
        for i in range(1, n + 1):
            row = {j + 1 for j in range(n) if od[i - 1, j] > 0 and j + 1 != i}
            col = {a + 1 for a in range(n) if od[a, i - 1] > 0 and a + 1 != i}
            assert forward_neighbors(g, i) == row
            assert backward_neighbors(g, i) == col
            assert j_in_f_iff_i_in_b(g, i, n)


def j_in_f_iff_i_in_b(g, i, n):
    fwd = forward_neighbors(g, i)
    return all((i in backward_neighbors(g, j)) == (j in fwd) for j in range(1, n + 1) if j != i)


def test_degrees_from_stated_matrix():
    g = _graph(3, [(1, 2, 2), (2, 1, 1)])
    assert degrees(g, 2) == (2, 1)
    assert degrees(g, 3) == (0, 0)


def test_degrees_of_empty_graph():
    assert degrees(_graph(3, []), 1) == (0, 0)


def test_out_degree_equals_demand_and_totals_balance(rng):
    for _ in range(10):
        n = int(rng.integers(2, 7))
        od = rng.integers(0, 4, size=(n, n))
        g = _graph(n, [(i + 1, j + 1, int(od[i, j]))
                       for i in range(n) for j in range(n) if od[i, j] > 0])
        delta = demand_vector(g)
        in_total = out_total = 0
        for k in range(1, n + 1):
            ind, outd = degrees(g, k)
            assert outd == delta[k - 1]
            in_total += ind
            out_total += outd
        assert in_total == out_total == od.sum()


def test_cell_index_bounds_checked():
    g = _graph(3, [])
    with pytest.raises(ValueError):
        forward_neighbors(g, 0)
    with pytest.raises(ValueError):
        degrees(g, 4)


# ---------------------------------------------------------------------------
# persistence


def test_store_round_trip_is_bit_exact(tmp_path, rng):
    grid = make_grid(2, 2)
    trips = []
    for _ in range(60):
        day = int(rng.integers(0, 2))
        minute = int(rng.integers(0, 1440))
        when = datetime(2024, 1, 1 + day, minute // 60, minute % 60)
        trips.append(_trip(when, grid.center(int(rng.integers(1, 5))),
                           grid.center(int(rng.integers(1, 5))),
                           int(rng.integers(1, 3))))
    store, _ = build_slot_graphs(trips, grid, 60)
    first = tmp_path / "a.jsonl"
    second = tmp_path / "b.jsonl"
    save_store(store, first)
    loaded = load_store(first)
    save_store(loaded, second)
    assert first.read_bytes() == second.read_bytes()
    assert (tmp_path / "a.jsonl.meta.json").read_bytes() == \
        (tmp_path / "b.jsonl.meta.json").read_bytes()
    assert loaded.days == store.days
    assert all(a.triplets == b.triplets for a, b in zip(loaded.graphs, store.graphs))


def test_store_record_format(tmp_path):
    grid = make_grid(2, 2)
    trips = [_trip(datetime(2024, 1, 1, 0, 5), grid.center(1), grid.center(4), 2)]
    store, _ = build_slot_graphs(trips, grid, 60)
    path = tmp_path / "g.jsonl"
    save_store(store, path)
    first_line = path.read_text().splitlines()[0]
    assert first_line == '{"day":0,"slot":1,"dow":0,"od":[[1,4,2]]}'
