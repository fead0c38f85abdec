"""Incomplete concatenated multi-sensor signals and participant-local datasets.

A signal lives on a fixed index grid of length ``N``. Only the entries listed
in ``observed`` carry data; everything else is stored as NaN and must never be
read. Shorter (failure-truncated) signals are expressed through the observed
set, not through a shorter array.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np


class StructuralError(ValueError):
    """Array shapes or index sets are inconsistent with the grid."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class GridSpec:
    """Per-sensor grid sizes of a concatenated signal."""

    sensor_lengths: tuple[int, ...]

    def __post_init__(self):
        lengths = tuple(int(n) for n in self.sensor_lengths)
        if not lengths:
            raise StructuralError("a grid needs at least one sensor")
        if any(n < 1 for n in lengths):
            raise StructuralError(f"sensor lengths must be >= 1, got {lengths}")
        object.__setattr__(self, "sensor_lengths", lengths)

    @property
    def N(self) -> int:
        return sum(self.sensor_lengths)

    @property
    def sensor_count(self) -> int:
        return len(self.sensor_lengths)

    def offsets(self) -> list[int]:
        """Start index of each sensor block."""
        out, acc = [], 0
        for n in self.sensor_lengths:
            out.append(acc)
            acc += n
        return out

    def to_meta(self) -> str:
        return json.dumps({"sensor_lengths": list(self.sensor_lengths)})

    @classmethod
    def from_meta(cls, text: str) -> "GridSpec":
        return cls(tuple(json.loads(text)["sensor_lengths"]))


@dataclass(frozen=True, eq=False)
class ObservedSignal:
    """One system's signal on the common grid with its observed index set.

    Parameters
    ----------
    values : ndarray of shape (N,)
        Signal values. Entries outside ``observed`` are replaced by NaN.
    observed : array-like of int
        Indices carrying data; sorted and deduplicated on construction.
    system_id : hashable, optional
        Opaque identifier.
    """

    values: np.ndarray
    observed: np.ndarray
    system_id: Hashable = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise StructuralError("signal values must be one-dimensional")
        omega = np.unique(np.asarray(self.observed, dtype=np.int64))
        if omega.size == 0:
            raise StructuralError("a signal needs at least one observed index")
        if omega[0] < 0 or omega[-1] >= values.size:
            raise StructuralError(
                f"observed indices must lie in [0, {values.size}), got [{omega[0]}, {omega[-1]}]"
            )
        if not np.all(np.isfinite(values[omega])):
            raise StructuralError("observed entries must be finite")
        masked = np.full(values.size, np.nan)
        masked[omega] = values[omega]
        object.__setattr__(self, "values", _frozen(masked))
        object.__setattr__(self, "observed", _frozen(omega))

    @property
    def N(self) -> int:
        return self.values.size

    @property
    def observed_values(self) -> np.ndarray:
        return self.values[self.observed]

    def mask(self) -> np.ndarray:
        m = np.zeros(self.N, dtype=bool)
        m[self.observed] = True
        return m

    def sensor_slice(self, grid: GridSpec, p: int) -> tuple[np.ndarray, np.ndarray]:
        """Return sensor ``p``'s block and its local observed indices."""
        start = grid.offsets()[p]
        stop = start + grid.sensor_lengths[p]
        sel = self.observed[(self.observed >= start) & (self.observed < stop)]
        return self.values[start:stop].copy(), sel - start


@dataclass(frozen=True, eq=False)
class LocalDataset:
    """Training signals and times-to-failure owned by a single participant."""

    participant_id: str
    signals: tuple[ObservedSignal, ...]
    ttfs: np.ndarray
    grid: GridSpec

    def __post_init__(self):
        signals = tuple(self.signals)
        ttfs = np.array(self.ttfs, dtype=np.float64).reshape(-1)
        if len(signals) != ttfs.size:
            raise StructuralError(
                f"{len(signals)} signals but {ttfs.size} failure times for {self.participant_id!r}"
            )
        if np.any(ttfs <= 0):
            raise StructuralError("failure times must be positive")
        for s in signals:
            if s.N != self.grid.N:
                raise StructuralError(f"signal length {s.N} does not match grid N={self.grid.N}")
        object.__setattr__(self, "signals", signals)
        object.__setattr__(self, "ttfs", _frozen(ttfs))
        object.__setattr__(self, "participant_id", str(self.participant_id))

    def __len__(self) -> int:
        return len(self.signals)

    def subset(self, index: Sequence[int], participant_id: str | None = None) -> "LocalDataset":
        index = list(index)
        return LocalDataset(
            participant_id if participant_id is not None else self.participant_id,
            tuple(self.signals[i] for i in index),
            self.ttfs[index] if index else np.empty(0),
            self.grid,
        )


def concatenate_sensors(per_sensor, grid: GridSpec, system_id=None) -> ObservedSignal:
    """Stack per-sensor ``(values, observed)`` pairs into one grid signal."""
    per_sensor = list(per_sensor)
    if len(per_sensor) != grid.sensor_count:
        raise StructuralError(f"expected {grid.sensor_count} sensors, got {len(per_sensor)}")
    values = np.full(grid.N, np.nan)
    omega = []
    for (vals, obs), n_p, start in zip(per_sensor, grid.sensor_lengths, grid.offsets()):
        vals = np.asarray(vals, dtype=np.float64)
        if vals.size != n_p:
            raise StructuralError(f"sensor block has length {vals.size}, grid expects {n_p}")
        obs = np.asarray(sorted(obs), dtype=np.int64)
        if obs.size and (obs[0] < 0 or obs[-1] >= n_p):
            raise StructuralError("sensor observed index out of range")
        values[start + obs] = vals[obs]
        omega.append(start + obs)
    return ObservedSignal(values, np.concatenate(omega) if omega else [], system_id)


def apply_missingness(signal: ObservedSignal, fraction: float, rng_seed) -> ObservedSignal:
    """Keep a uniform random subset of ``floor((1 - fraction) * |observed|)`` entries."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"missing fraction must be in [0, 1), got {fraction}")
    n_obs = signal.observed.size
    # the epsilon guards 0.7 * 100 evaluating to 69.999...
    keep = int(math.floor((1.0 - fraction) * n_obs + 1e-9))
    if keep < 1:
        raise ValueError(f"removing {fraction:.0%} of {n_obs} observations leaves nothing")
    if keep == n_obs:
        return signal
    rng = np.random.default_rng(rng_seed)
    kept = np.sort(rng.choice(signal.observed, size=keep, replace=False))
    return ObservedSignal(signal.values, kept, signal.system_id)


def truncate_at_failure(full, observed_len: int, system_id=None) -> ObservedSignal:
    """Observe only the first ``observed_len`` entries of ``full``."""
    full = np.asarray(full, dtype=np.float64)
    if not 1 <= observed_len <= full.size:
        raise ValueError(f"observed_len must be in [1, {full.size}], got {observed_len}")
    return ObservedSignal(full, np.arange(observed_len), system_id)


# -- on-disk layout -----------------------------------------------------------
#
#   DIR/grid.meta                {"sensor_lengths": [...]}
#   DIR/<participant>/signals.csv    system_id,index,value   (rows only for observed entries)
#   DIR/<participant>/ttf.csv        system_id,ttf


def write_dataset(dataset: LocalDataset, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "signals.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["system_id", "index", "value"])
        for k, s in enumerate(dataset.signals):
            sid = s.system_id if s.system_id is not None else k
            for i, v in zip(s.observed.tolist(), s.observed_values.tolist()):
                w.writerow([sid, i, repr(v)])
    with open(os.path.join(directory, "ttf.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["system_id", "ttf"])
        for k, (s, t) in enumerate(zip(dataset.signals, dataset.ttfs.tolist())):
            w.writerow([s.system_id if s.system_id is not None else k, repr(t)])


def read_dataset(directory, grid: GridSpec, participant_id: str | None = None) -> LocalDataset:
    """Load one participant directory written by :func:`write_dataset`."""
    pid = participant_id or os.path.basename(os.path.normpath(directory))
    with open(os.path.join(directory, "ttf.csv"), newline="") as fh:
        rows = list(csv.DictReader(fh))
    order = [r["system_id"] for r in rows]
    ttfs = [float(r["ttf"]) for r in rows]
    idx: dict[str, list[int]] = {sid: [] for sid in order}
    vals: dict[str, list[float]] = {sid: [] for sid in order}
    with open(os.path.join(directory, "signals.csv"), newline="") as fh:
        for lineno, r in enumerate(csv.DictReader(fh), start=2):
            sid = r["system_id"]
            if sid not in idx:
                raise StructuralError(f"{directory}/signals.csv:{lineno}: unknown system {sid!r}")
            idx[sid].append(int(r["index"]))
            vals[sid].append(float(r["value"]))
    signals = []
    for sid in order:
        v = np.full(grid.N, np.nan)
        v[idx[sid]] = vals[sid]
        signals.append(ObservedSignal(v, idx[sid], sid))
    return LocalDataset(pid, tuple(signals), np.asarray(ttfs), grid)


def write_study(directory, participants: Sequence[LocalDataset], test: LocalDataset | None = None) -> None:
    """Write a whole study: grid sidecar, a roster manifest and one folder per participant."""
    os.makedirs(directory, exist_ok=True)
    grids = {d.grid for d in participants} | ({test.grid} if test is not None else set())
    if len(grids) != 1:
        raise StructuralError("all datasets of a study must share one grid")
    grid = grids.pop()
    with open(os.path.join(directory, "grid.meta"), "w") as fh:
        fh.write(grid.to_meta() + "\n")
    roster = [d.participant_id for d in participants]
    with open(os.path.join(directory, "roster.json"), "w") as fh:
        json.dump({"participants": roster, "test": test.participant_id if test else None}, fh, indent=1)
    for d in participants:
        write_dataset(d, os.path.join(directory, d.participant_id))
    if test is not None:
        write_dataset(test, os.path.join(directory, test.participant_id))


def read_study(directory) -> tuple[list[LocalDataset], LocalDataset | None]:
    with open(os.path.join(directory, "grid.meta")) as fh:
        grid = GridSpec.from_meta(fh.read())
    with open(os.path.join(directory, "roster.json")) as fh:
        roster = json.load(fh)
    parts = [read_dataset(os.path.join(directory, p), grid, p) for p in roster["participants"]]
    test = None
    if roster.get("test"):
        test = read_dataset(os.path.join(directory, roster["test"]), grid, roster["test"])
    return parts, test
