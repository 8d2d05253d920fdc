"""Range-normalised RMSE and the error profiles used to compare forecasters."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np

from .linalg import ShapeError
from .serialization import canonical_dump


class DegenerateRangeError(ValueError):
    pass


def nrmse_per_variable(truth, pred, zero_range: str = "raise") -> np.ndarray:
    """RMSE of every column divided by that column's range in ``truth``.

    ``zero_range="rmse"`` leaves constant columns unnormalised instead of
    raising :class:`DegenerateRangeError`.
    """
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.shape != pred.shape:
        raise ShapeError(f"truth {truth.shape} and prediction {pred.shape} differ in shape")
    if truth.ndim == 1:
        truth, pred = truth[:, None], pred[:, None]
    if truth.ndim != 2 or truth.shape[0] < 1:
        raise ShapeError("expected (samples, variables) arrays")
    rmse = np.sqrt(np.mean((truth - pred) ** 2, axis=0))
    span = truth.max(axis=0) - truth.min(axis=0)
    flat = np.flatnonzero(span == 0)
    if flat.size:
        if zero_range != "rmse":
            raise DegenerateRangeError(f"variable {int(flat[0])} has zero range in the ground truth")
        span = np.where(span == 0, 1.0, span)
    return rmse / span


def nrmse(truth, pred, zero_range: str = "raise") -> float:
    """Mean over variables of ``RMSE_i / (max truth_i - min truth_i)``."""
    return float(np.mean(nrmse_per_variable(truth, pred, zero_range)))


def _examples(segment, seq_len, horizon):
    # local import: training imports this module
    from .training import make_examples

    return make_examples(segment, seq_len, horizon)


def horizon_error_profile(model, segment, seq_len=None, horizon=None, zero_range="raise") -> np.ndarray:
    """NRMSE of the k-th forecast step over every window of ``segment``, for k = 1..horizon."""
    from .model import predict_windows

    seq_len = model.cfg.seq_len if seq_len is None else seq_len
    horizon = model.cfg.horizon if horizon is None else horizon
    X, Y = _examples(segment, seq_len, horizon)
    P = predict_windows(model, X, horizon)
    return np.array([nrmse(Y[:, k], P[:, k], zero_range) for k in range(horizon)])


@dataclass
class Snapshot:
    index: int
    lead: int
    truth: np.ndarray
    forecast: np.ndarray
    abs_error: np.ndarray


def snapshot_error(model, segment, t_future: int, lead: int = 1) -> Snapshot:
    """Forecast state ``t_future`` of ``segment`` from the window ending ``lead`` steps earlier."""
    states = segment.states if hasattr(segment, "states") else np.asarray(segment, dtype=np.float64)
    l = model.cfg.seq_len
    first = l + lead - 1
    if lead < 1 or not first <= t_future < len(states):
        raise IndexError(f"t_future must lie in [{first}, {len(states) - 1}] for lead {lead}")
    end = t_future - lead + 1
    pred = model.forward(states[end - l : end], lead, "eval")[0][-1]
    truth = states[t_future]
    return Snapshot(t_future, lead, truth.copy(), pred, np.abs(truth - pred))


def bus_trace(model, segment, bus: int, start: int, horizon: int) -> dict:
    """Voltage magnitude and angle of one bus over ``horizon`` steps forecast from ``start``."""
    states = segment.states if hasattr(segment, "states") else np.asarray(segment, dtype=np.float64)
    l = model.cfg.seq_len
    K = states.shape[1] // 2
    if not 1 <= bus <= K:
        raise IndexError(f"bus must lie in 1..{K}")
    if start < 0 or start + l + horizon > len(states):
        raise IndexError("window plus horizon runs past the end of the segment")
    pred = model.forward(states[start : start + l], horizon, "eval")[0]
    truth = states[start + l : start + l + horizon]

    def polar(a):
        v = a[:, bus - 1] + 1j * a[:, K + bus - 1]
        return np.abs(v), np.angle(v)

    tm, ta = polar(truth)
    pm, pa = polar(pred)
    return {
        "bus": bus,
        "start": start,
        "step": list(range(1, horizon + 1)),
        "truth_magnitude": tm.tolist(),
        "forecast_magnitude": pm.tolist(),
        "truth_angle": ta.tolist(),
        "forecast_angle": pa.tolist(),
        "abs_error_magnitude": np.abs(tm - pm).tolist(),
        "abs_error_angle": np.abs(ta - pa).tolist(),
    }


@dataclass
class EvalResult:
    nrmse: float
    per_variable: list
    per_horizon: list
    snapshot: dict
    bus_trace: dict

    def to_dict(self) -> dict:
        return asdict(self)

    def save_json(self, path) -> None:
        canonical_dump(self.to_dict(), path)

    def save_profile_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "nrmse"])
            for k, v in enumerate(self.per_horizon, start=1):
                w.writerow([k, format(v, ".17g")])

    def save_snapshot_csv(self, path) -> None:
        K = len(self.snapshot["truth"]) // 2
        names = [f"x_r_{k}" for k in range(1, K + 1)] + [f"x_i_{k}" for k in range(1, K + 1)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variable", "truth", "forecast", "abs_error"])
            s = self.snapshot
            for i, name in enumerate(names):
                w.writerow([name] + [format(s[c][i], ".17g") for c in ("truth", "forecast", "abs_error")])


def evaluate(model, segment, bus: int = 1, snapshot_index: int | None = None, trace_start: int = 0) -> EvalResult:
    """Overall, per-variable and per-horizon NRMSE on ``segment`` plus a snapshot and a bus trace."""
    from .model import predict_windows

    cfg = model.cfg
    X, Y = _examples(segment, cfg.seq_len, cfg.horizon)
    P = predict_windows(model, X, cfg.horizon)
    d = Y.shape[-1]
    # same constant-variable fallback as training, so the two NRMSEs agree exactly
    per_var = nrmse_per_variable(Y.reshape(-1, d), P.reshape(-1, d), zero_range="rmse")
    per_h = [nrmse(Y[:, k], P[:, k], zero_range="rmse") for k in range(cfg.horizon)]
    n = len(segment.states if hasattr(segment, "states") else segment)
    t = n - 1 if snapshot_index is None else snapshot_index
    snap = snapshot_error(model, segment, t)
    trace = bus_trace(model, segment, bus, trace_start, cfg.horizon)
    return EvalResult(
        nrmse=float(np.mean(per_var)),
        per_variable=per_var.tolist(),
        per_horizon=per_h,
        snapshot={
            "index": snap.index,
            "lead": snap.lead,
            "truth": snap.truth.tolist(),
            "forecast": snap.forecast.tolist(),
            "abs_error": snap.abs_error.tolist(),
        },
        bus_trace=trace,
    )
