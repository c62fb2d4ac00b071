"""Origin-destination passenger flow prediction over a city grid."""

__version__ = "0.1.0"

from .geogrid import GridSpec, build_grid, haversine_km
from .ingest import SlotKey, TripRecord, parse_trips, slot_of
from .flowgraph import SlotGraph, build_slot_graphs, load_store, save_store
from .model import ModelConfig, ODFlowModel, ParamStore
from .trainer import TrainConfig, split_days, train

__all__ = [
    "GridSpec", "build_grid", "haversine_km",
    "SlotKey", "TripRecord", "parse_trips", "slot_of",
    "SlotGraph", "build_slot_graphs", "load_store", "save_store",
    "ModelConfig", "ODFlowModel", "ParamStore",
    "TrainConfig", "split_days", "train",
]
