"""MAPE-k / MAE-k evaluation and report assembly.

The percentage error keeps the +1 in its denominator, so it stays finite on
zero-actual entries. Thresholds filter on actual values only: MAPE-k and
MAE-k for the same k always cover the same index set. An empty selection
reports null rather than a misleading 0.
"""

from __future__ import annotations

import numpy as np

from .flowgraph import demand_vector
from .model import ModelConfig, ODFlowModel, load_checkpoint

THRESHOLDS = (0, 3, 5)


def _selected(pred, actual, k):
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    actual = np.asarray(actual, dtype=np.float64).reshape(-1)
    if pred.shape != actual.shape:
        raise ValueError(f"pred and actual differ in length: {pred.shape} vs {actual.shape}")
    mask = actual >= k
    return pred[mask], actual[mask]


def mape(pred, actual, k=0):
    """Mean of |pred - actual| / (actual + 1) over entries with actual >= k."""
    p, a = _selected(pred, actual, k)
    if p.size == 0:
        return None
    return float(np.mean(np.abs(p - a) / (a + 1.0)))


def mae(pred, actual, k=0):
    """Mean absolute error over entries with actual >= k."""
    p, a = _selected(pred, actual, k)
    if p.size == 0:
        return None
    return float(np.mean(np.abs(p - a)))


def metric_block(pred, actual, ks=THRESHOLDS):
    block = {"mape": {}, "mae": {}, "counts": {}}
    for k in ks:
        p, a = _selected(pred, actual, k)
        block["counts"][str(k)] = int(p.size)
        block["mape"][str(k)] = mape(pred, actual, k)
        block["mae"][str(k)] = mae(pred, actual, k)
    return block


def evaluate_model(model: ODFlowModel, target_keys, ks=THRESHOLDS, config_echo=None):
    """Model and historical-average metrics over the given targets.

    Returns {"od": report, "demand": report}; each report carries the
    model block, the baseline block, and the evaluated target count.
    """
    if model.ha is None:
        raise ValueError("evaluation requires the checkpoint's historical-average tables")
    store = model.store
    demand_pred, demand_actual, demand_base = [], [], []
    od_pred, od_actual, od_base = [], [], []
    for key in target_keys:
        delta_hat, od_hat = model.predict(key)
        g = store.graph_at(key)
        demand_pred.append(delta_hat)
        demand_actual.append(demand_vector(g))
        demand_base.append(model.ha.demand_of(key))
        od_pred.append(od_hat.reshape(-1))
        od_actual.append(g.dense().reshape(-1))
        od_base.append(model.ha.od_of(key).reshape(-1))

    def flat(parts):
        return np.concatenate(parts) if parts else np.zeros(0)

    reports = {}
    for task, pred, actual, base in (
            ("demand", demand_pred, demand_actual, demand_base),
            ("od", od_pred, od_actual, od_base)):
        pred, actual, base = flat(pred), flat(actual), flat(base)
        report = {"task": task}
        report.update(metric_block(pred, actual, ks))
        report["baseline"] = metric_block(base, actual, ks)
        report["targets"] = len(target_keys)
        report["config"] = config_echo or {}
        reports[task] = report
    return reports


def eligible_targets(model: ODFlowModel, days):
    keys = []
    s = model.store.slots_per_day
    for day in days:
        for slot in range(s):
            key = model.store.key_of_abs(day * s + slot)
            if model.eligible(key):
                keys.append(key)
    return keys


def evaluate_checkpoint(checkpoint_path, store, split="test", ks=THRESHOLDS):
    """Load a checkpoint, check grid compatibility, and score the split."""
    params, ha, meta = load_checkpoint(checkpoint_path)
    if meta["grid"] != store.grid.to_dict():
        raise ValueError("checkpoint grid does not match the graph store grid: "
                         f"{meta['grid']} vs {store.grid.to_dict()}")
    if meta["slot_minutes"] != store.slot_minutes:
        raise ValueError("checkpoint slot granularity does not match the store")
    model_cfg = ModelConfig.from_dict(meta["model_config"])
    model = ODFlowModel(store, params, model_cfg, meta["degree_norms"],
                        ha if model_cfg.use_ha else None)
    model.ha = ha   # baseline tables are required even when blending is off
    days = meta["split"][split if split in ("train", "val", "test") else "test"]
    targets = eligible_targets(model, days)
    echo = {"split": split, "train_config": meta["train_config"]}
    return evaluate_model(model, targets, ks, config_echo=echo)
