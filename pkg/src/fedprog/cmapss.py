"""Reader and case-study builder for the NASA C-MAPSS turbofan files.

Rows of ``train_FD00x.txt`` / ``test_FD00x.txt`` hold 26 whitespace-separated
numbers: unit, cycle, three operating settings and 21 sensor readings.
``RUL_FD00x.txt`` lists the true remaining life of each test unit.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .signals import GridSpec, LocalDataset, ObservedSignal, apply_missingness

N_COLUMNS = 26
N_SENSORS = 21
DEFAULT_SENSORS = (4, 15, 17, 20)


class CmapssParseError(ValueError):
    pass


class CmapssValidationError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CmapssRecord:
    unit: int
    cycle: int
    op_settings: np.ndarray
    sensors: np.ndarray


def parse_cmapss(path) -> list[CmapssRecord]:
    """Parse one C-MAPSS trajectory file, checking that cycles run 1, 2, 3, ... per unit."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != N_COLUMNS:
                raise CmapssParseError(f"{path}:{lineno}: expected {N_COLUMNS} columns, found {len(fields)}")
            try:
                nums = [float(f) for f in fields]
            except ValueError as exc:
                raise CmapssParseError(f"{path}:{lineno}: {exc}") from None
            if nums[0] != int(nums[0]) or nums[1] != int(nums[1]):
                raise CmapssParseError(f"{path}:{lineno}: unit and cycle must be integers")
            records.append(CmapssRecord(int(nums[0]), int(nums[1]), np.array(nums[2:5]), np.array(nums[5:])))
    last: dict[int, int] = {}
    for r in records:
        expect = last.get(r.unit, 0) + 1
        if r.cycle != expect:
            raise CmapssValidationError(f"unit {r.unit}: cycle {r.cycle} follows {expect - 1}")
        last[r.unit] = r.cycle
    return records


def group_units(records: Sequence[CmapssRecord]) -> dict[int, np.ndarray]:
    """Sensor matrix (cycles x 21) per unit, in unit order."""
    by: dict[int, list] = {}
    for r in records:
        by.setdefault(r.unit, []).append(r.sensors)
    return {u: np.vstack(by[u]) for u in sorted(by)}


def parse_rul(path) -> np.ndarray:
    with open(path) as fh:
        vals = [float(x) for x in fh.read().split()]
    return np.array(vals)


def _engine_signal(sensors: np.ndarray, cols: list[int], grid: GridSpec, system_id) -> ObservedSignal:
    T = sensors.shape[0]
    L = grid.sensor_lengths[0]
    vals = np.full(grid.N, np.nan)
    obs = []
    for p, col in enumerate(cols):
        vals[p * L: p * L + T] = sensors[:, col]
        obs.append(np.arange(p * L, p * L + T))
    return ObservedSignal(vals, np.concatenate(obs), system_id)


def build_case_study(records: Sequence[CmapssRecord], test_records: Sequence[CmapssRecord] | None = None,
                     rul=None, selected_sensors=DEFAULT_SENSORS, missing_fraction: float = 0.0,
                     user_split=(60, 30, 10), seed: int = 0):
    """Per-user training sets and the test set for the turbofan study.

    Sensor numbers are 1-based positions among the 21 sensor columns. Every
    engine becomes one signal of ``len(selected_sensors)`` blocks, each as
    long as the longest engine history. Training failure time is the last
    cycle; a test engine's failure time is its observed cycles plus its true
    remaining life.
    """
    cols = [int(s) - 1 for s in selected_sensors]
    if any(not 0 <= c < N_SENSORS for c in cols):
        raise ValueError(f"sensor numbers must be in 1..{N_SENSORS}, got {list(selected_sensors)}")
    train = group_units(records)
    test = group_units(test_records) if test_records is not None else {}
    if test_records is not None and rul is None:
        raise ConfigurationError("test trajectories were given without their remaining-life file")
    if sum(user_split) > len(train):
        raise ValueError(f"user split {list(user_split)} needs {sum(user_split)} engines, have {len(train)}")
    L = max(m.shape[0] for m in list(train.values()) + list(test.values()))
    grid = GridSpec((L,) * len(cols))
    ss = np.random.SeedSequence([seed, 11])
    order = np.random.default_rng(ss.spawn(1)[0]).permutation(sorted(train))
    miss = np.random.SeedSequence([seed, 12]).spawn(len(train) + len(test))
    signals, ttfs = {}, {}
    for k, u in enumerate(sorted(train)):
        s = _engine_signal(train[u], cols, grid, f"train{u:03d}")
        if missing_fraction > 0:
            s = apply_missingness(s, missing_fraction, np.random.default_rng(miss[k]))
        signals[u], ttfs[u] = s, float(train[u].shape[0])
    parts, lo = [], 0
    for i, J in enumerate(user_split, start=1):
        units = order[lo: lo + J]
        parts.append(LocalDataset(f"user{i}", tuple(signals[u] for u in units), np.array([ttfs[u] for u in units]), grid))
        lo += J
    test_ds = None
    if test_records is not None:
        rul = np.asarray(rul, dtype=np.float64).reshape(-1)
        if rul.size != len(test):
            raise ConfigurationError(f"{rul.size} remaining-life values for {len(test)} test units")
        tsig, tttf = [], []
        for k, u in enumerate(sorted(test)):
            s = _engine_signal(test[u], cols, grid, f"test{u:03d}")
            if missing_fraction > 0:
                s = apply_missingness(s, missing_fraction, np.random.default_rng(miss[len(train) + k]))
            tsig.append(s)
            tttf.append(test[u].shape[0] + rul[k])
        test_ds = LocalDataset("test", tuple(tsig), np.array(tttf), grid)
    return parts, test_ds


def cmapss_files(directory, subset: str = "FD001") -> dict:
    return {k: os.path.join(directory, f"{k}_{subset}.txt") for k in ("train", "test", "RUL")}


def load_case_study(directory, subset: str = "FD001", **kwargs):
    """Read the three files of one subset from ``directory`` and build the study."""
    files = cmapss_files(directory, subset)
    if not os.path.exists(files["train"]):
        raise FileNotFoundError(f"missing {files['train']}")
    if not os.path.exists(files["test"]):
        raise FileNotFoundError(f"missing {files['test']}")
    if not os.path.exists(files["RUL"]):
        raise ConfigurationError(f"missing remaining-life file {files['RUL']}")
    return build_case_study(parse_cmapss(files["train"]), parse_cmapss(files["test"]),
                            parse_rul(files["RUL"]), **kwargs)
