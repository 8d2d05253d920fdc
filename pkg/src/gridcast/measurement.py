"""Quadratic measurement model and synthetic voltage trajectories.

A state vector stacks the real parts of the K bus voltages followed by the
imaginary parts, ``x = [x_r | x_i]``. Every measurement is a quadratic form
``x^T H_j x`` of the state plus Gaussian noise.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .linalg import ShapeError, mode_product_quadratic

BUS_CHANNELS = ("vmag2", "p_inj", "q_inj")
LINE_CHANNELS = ("pf_begin", "qf_begin", "pf_end", "qf_end")
CHANNEL_KINDS = BUS_CHANNELS + LINE_CHANNELS
PROFILES = ("sinusoidal_load", "random_walk")

# hourly samples
DAY = 24
WEEK = 168


class DataParseError(ValueError):
    """Malformed state CSV; ``line`` is the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class GridTopology:
    bus_count: int
    lines: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if self.bus_count < 2:
            raise ValueError("a grid needs at least two buses")
        lines = tuple((int(k), int(j)) for k, j in self.lines)
        seen = set()
        for k, j in lines:
            if not (1 <= k <= self.bus_count and 1 <= j <= self.bus_count):
                raise ValueError(f"line ({k}, {j}) references a bus outside 1..{self.bus_count}")
            if k == j:
                raise ValueError(f"self-loop at bus {k}")
            if (k, j) in seen:
                raise ValueError(f"duplicate line ({k}, {j})")
            seen.add((k, j))
        object.__setattr__(self, "lines", lines)

    @classmethod
    def ring(cls, bus_count: int) -> "GridTopology":
        """Buses joined in a cycle (a single line when there are two buses)."""
        if bus_count == 2:
            return cls(2, ((1, 2),))
        return cls(bus_count, tuple((k, k % bus_count + 1) for k in range(1, bus_count + 1)))

    def neighbours(self, bus: int) -> list[int]:
        out = {j for k, j in self.lines if k == bus} | {k for k, j in self.lines if j == bus}
        return sorted(out)

    def hops_from(self, root: int = 1) -> np.ndarray:
        """Graph distance of every bus from ``root``; unreachable buses get ``bus_count``."""
        dist = np.full(self.bus_count, self.bus_count, dtype=int)
        dist[root - 1] = 0
        queue = deque([root])
        while queue:
            k = queue.popleft()
            for j in self.neighbours(k):
                if dist[j - 1] == self.bus_count and j != root:
                    dist[j - 1] = dist[k - 1] + 1
                    queue.append(j)
        return dist


@dataclass(frozen=True)
class MeasurementTensor:
    """Slice-major tensor ``H`` of shape ``(M, 2K, 2K)`` with one label per slice.

    Labels are ``(kind, buses)`` pairs, e.g. ``("vmag2", (3,))`` or
    ``("pf_begin", (1, 2))``.
    """

    H: np.ndarray
    labels: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        if self.H.ndim != 3 or self.H.shape[1] != self.H.shape[2]:
            raise ShapeError(f"measurement tensor must be (M, 2K, 2K), got {self.H.shape}")
        if self.H.shape[0] != len(self.labels):
            raise ShapeError(f"{self.H.shape[0]} slices but {len(self.labels)} labels")

    @property
    def state_dim(self) -> int:
        return self.H.shape[1]

    @property
    def channel_count(self) -> int:
        return self.H.shape[0]


def channel_labels(topology: GridTopology, kinds=CHANNEL_KINDS):
    labels = []
    for kind in kinds:
        if kind in BUS_CHANNELS:
            labels += [(kind, (k,)) for k in range(1, topology.bus_count + 1)]
        elif kind in LINE_CHANNELS:
            labels += [(kind, line) for line in topology.lines]
        else:
            raise ValueError(f"unknown channel kind {kind!r}")
    return labels


def _coords(buses, K):
    idx = [b - 1 for b in buses]
    return np.array(idx + [K + i for i in idx])


def build_measurement_tensor(topology: GridTopology, seed=None, channels=CHANNEL_KINDS) -> MeasurementTensor:
    """Build one quadratic-form slice per measurement channel.

    ``vmag2`` slices are exact: a 2x2 identity on the bus's (real, imag)
    coordinates. All other slices are random symmetric matrices, entries
    uniform in [-1, 1], supported on the coordinates of the buses involved
    (a bus and its neighbours for injections, the two endpoints for flows).
    """
    K = topology.bus_count
    rng = np.random.default_rng(seed)
    labels = channel_labels(topology, channels)
    H = np.zeros((len(labels), 2 * K, 2 * K))
    for j, (kind, buses) in enumerate(labels):
        if kind == "vmag2":
            c = _coords(buses, K)
            H[j, c, c] = 1.0
            continue
        involved = buses if kind not in ("p_inj", "q_inj") else (buses[0], *topology.neighbours(buses[0]))
        c = _coords(involved, K)
        m = len(c)
        block = np.triu(rng.uniform(-1.0, 1.0, size=(m, m)))
        block = block + np.triu(block, 1).T
        H[j][np.ix_(c, c)] = block
    return MeasurementTensor(H, tuple(labels))


def measure(H, x, noise_sigma: float = 0.01, seed=None) -> np.ndarray:
    """Noisy measurements ``z = H x_1 x x_2 x + eps`` with ``eps ~ N(0, noise_sigma^2 I)``."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    tensor = H.H if isinstance(H, MeasurementTensor) else np.asarray(H, dtype=np.float64)
    z = mode_product_quadratic(tensor, x)
    if noise_sigma == 0:
        return z
    rng = np.random.default_rng(seed)
    return z + noise_sigma * rng.standard_normal(z.shape[0])


@dataclass(frozen=True)
class StateSeries:
    """``T`` states of dimension ``2K``; row ``t`` is ``[x_r_1..x_r_K, x_i_1..x_i_K]``."""

    states: np.ndarray = field(repr=False)

    def __post_init__(self):
        s = np.asarray(self.states, dtype=np.float64)
        if s.ndim != 2 or s.shape[0] < 1 or s.shape[1] < 2 or s.shape[1] % 2:
            raise ShapeError(f"states must be (T >= 1, 2K), got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError("state series contains non-finite values")
        object.__setattr__(self, "states", s)

    @property
    def T(self) -> int:
        return self.states.shape[0]

    @property
    def K(self) -> int:
        return self.states.shape[1] // 2

    def __len__(self):
        return self.T

    def __getitem__(self, item) -> "StateSeries":
        if not isinstance(item, slice):
            raise TypeError("index a StateSeries with a slice")
        return StateSeries(self.states[item])

    def complex_voltages(self) -> np.ndarray:
        return self.states[:, : self.K] + 1j * self.states[:, self.K :]

    def magnitudes(self) -> np.ndarray:
        return np.abs(self.complex_voltages())

    def angles(self) -> np.ndarray:
        return np.angle(self.complex_voltages())


def _ou_path(rng, T, size, reversion, scale):
    out = np.zeros((T, size))
    for t in range(1, T):
        out[t] = (1.0 - reversion) * out[t - 1] + scale * rng.standard_normal(size)
    return out


def generate_state_series(
    topology: GridTopology,
    T: int,
    seed=None,
    profile: str = "sinusoidal_load",
    jitter: float = 0.002,
) -> StateSeries:
    """Synthetic hourly bus-voltage trajectories.

    ``sinusoidal_load`` drives every bus from a shared load curve (daily and
    weekly sinusoids, with a per-bus phase lag): heavier load lowers the
    magnitude and pulls the angle further from its base value, more so for
    buses far from bus 1. ``random_walk`` uses independent mean-reverting
    walks instead. Gaussian jitter of size ``jitter`` is added to magnitude
    and angle, and magnitudes are clipped to [0.9, 1.1].
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    K = topology.bus_count
    rng = np.random.default_rng(seed)
    t = np.arange(T, dtype=np.float64)[:, None]
    depth = topology.hops_from(1)[None, :]
    base_angle = rng.uniform(-0.2, 0.2, size=K)

    if profile == "sinusoidal_load":
        day_phase, week_phase = rng.uniform(0.0, 2.0 * np.pi, size=2)
        lag = rng.uniform(-0.6, 0.6, size=K)
        sag = rng.uniform(0.03, 0.08, size=K)
        swing = rng.uniform(0.05, 0.15, size=K) * (1.0 + 0.5 * depth[0])
        load = (
            0.5
            + 0.25 * np.sin(2.0 * np.pi * t / DAY + day_phase + lag)
            + 0.10 * np.sin(2.0 * np.pi * t / WEEK + week_phase)
        )
        mag = 1.04 - sag * load
        ang = base_angle - swing * load
    else:
        mag = 1.0 + _ou_path(rng, T, K, 0.05, 0.01)
        ang = base_angle + _ou_path(rng, T, K, 0.02, 0.01)

    mag = mag + jitter * rng.standard_normal((T, K))
    ang = ang + jitter * rng.standard_normal((T, K))
    mag = np.clip(mag, 0.9, 1.1)
    return StateSeries(np.hstack([mag * np.cos(ang), mag * np.sin(ang)]))


def csv_header(K: int) -> list[str]:
    return ["t"] + [f"x_r_{k}" for k in range(1, K + 1)] + [f"x_i_{k}" for k in range(1, K + 1)]


def write_state_csv(series: StateSeries, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(csv_header(series.K))
        for t, row in enumerate(series.states):
            writer.writerow([t] + [format(v, ".17g") for v in row])


def read_state_csv(path) -> StateSeries:
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataParseError("empty file", 1) from None
        header = [h.strip() for h in header]
        ncol = len(header)
        if ncol < 5 or ncol % 2 == 0 or header != csv_header((ncol - 1) // 2):
            raise DataParseError(f"unexpected header {header!r}", 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != ncol:
                raise DataParseError(f"expected {ncol} fields, found {len(row)}", lineno)
            try:
                values = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise DataParseError(str(exc), lineno) from None
            if not all(np.isfinite(values)):
                raise DataParseError("non-finite value", lineno)
            rows.append(values)
    if not rows:
        raise DataParseError("no data rows", 2)
    return StateSeries(np.array(rows))


def write_measurement_csv(Z: np.ndarray, labels, path) -> None:
    names = ["t"] + [kind + ":" + "-".join(str(b) for b in buses) for kind, buses in labels]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for t, row in enumerate(Z):
            writer.writerow([t] + [format(v, ".17g") for v in row])
