"""Uniformly sampled multichannel records and their on-disk format.

A record is stored as two files: ``<stem>.csv`` holds a ``time`` column
followed by one column per channel, and ``<stem>.meta.json`` holds the
per-channel metadata plus ``dt``/``t0``.  Values are written with 17
significant digits so a write/read round trip is lossless.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

KINDS = ("rotor_angle", "rotor_speed", "bus_angle", "bus_freq", "line_flow", "input")


@dataclass(frozen=True)
class Channel:
    id: str
    kind: str
    location: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown channel kind {self.kind!r}")


@dataclass
class TimeSeriesSet:
    """Samples x channels matrix with a uniform time base."""

    dt: float
    data: np.ndarray
    channels: list[Channel]
    t0: float = 0.0
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim == 1:
            self.data = self.data[:, None]
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.data.shape[1] != len(self.channels):
            raise ValueError(
                f"data has {self.data.shape[1]} columns but {len(self.channels)} channels"
            )
        ids = [c.id for c in self.channels]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate channel ids")

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.channels]

    @property
    def time(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_samples)

    @property
    def duration(self) -> float:
        return self.n_samples * self.dt

    def index(self, channel_id: str) -> int:
        for k, c in enumerate(self.channels):
            if c.id == channel_id:
                return k
        raise KeyError(f"channel {channel_id!r} not in record")

    def __contains__(self, channel_id) -> bool:
        return any(c.id == channel_id for c in self.channels)

    def channel(self, channel_id: str) -> np.ndarray:
        return self.data[:, self.index(channel_id)]

    def select(self, ids=None, kinds=None) -> "TimeSeriesSet":
        """Sub-record with the given channel ids (in that order) or kinds."""
        if ids is None:
            ids = [c.id for c in self.channels if kinds is None or c.kind in kinds]
        missing = [i for i in ids if i not in self]
        if missing:
            raise KeyError(f"channels not in record: {', '.join(missing)}")
        cols = [self.index(i) for i in ids]
        return TimeSeriesSet(
            self.dt, self.data[:, cols], [self.channels[k] for k in cols], self.t0, dict(self.attrs)
        )

    def window(self, start: float, stop: float | None = None) -> "TimeSeriesSet":
        """Samples with ``start <= t < stop`` (times absolute)."""
        t = self.time
        keep = t >= start - 1e-9 * self.dt
        if stop is not None:
            keep &= t < stop - 1e-9 * self.dt
        idx = np.flatnonzero(keep)
        t0 = float(t[idx[0]]) if idx.size else start
        return TimeSeriesSet(self.dt, self.data[idx], list(self.channels), t0, dict(self.attrs))

    def with_data(self, data: np.ndarray) -> "TimeSeriesSet":
        return TimeSeriesSet(self.dt, data, list(self.channels), self.t0, dict(self.attrs))

    def scaled(self, c: float) -> "TimeSeriesSet":
        return self.with_data(self.data * c)


def _paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix == ".csv":
        stem = stem.with_suffix("")
    return stem.with_suffix(".csv"), stem.with_name(stem.name + ".meta.json")


def write_timeseries(ts: TimeSeriesSet, stem) -> Path:
    """Write ``ts`` as CSV + sidecar metadata; returns the CSV path."""
    csv_path, meta_path = _paths(stem)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    table = np.column_stack([ts.time, ts.data])
    header = ",".join(["time"] + ts.ids)
    np.savetxt(csv_path, table, delimiter=",", header=header, comments="", fmt="%.17g")
    meta = {
        "format": "foloc-timeseries",
        "version": FORMAT_VERSION,
        "dt": ts.dt,
        "t0": ts.t0,
        "n_samples": ts.n_samples,
        "channels": [{"id": c.id, "kind": c.kind, "location": c.location} for c in ts.channels],
        "attrs": ts.attrs,
    }
    meta_path.write_text(json.dumps(meta, indent=2, default=_jsonable))
    return csv_path


def read_timeseries(stem) -> TimeSeriesSet:
    csv_path, meta_path = _paths(stem)
    if not csv_path.exists():
        raise FileNotFoundError(f"no such dataset: {csv_path}")
    if not meta_path.exists():
        raise FileNotFoundError(f"missing metadata sidecar: {meta_path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("version") != FORMAT_VERSION:
        raise ValueError(f"{meta_path}: unsupported format version {meta.get('version')!r}")
    table = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    with open(csv_path) as fh:
        header = fh.readline().strip().split(",")
    channels = [Channel(c["id"], c["kind"], c["location"]) for c in meta["channels"]]
    if header[1:] != [c.id for c in channels]:
        raise ValueError(f"{csv_path}: column header does not match metadata channels")
    return TimeSeriesSet(
        float(meta["dt"]), table[:, 1:], channels, float(meta["t0"]), meta.get("attrs", {})
    )


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
